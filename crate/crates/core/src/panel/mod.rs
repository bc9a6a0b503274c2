//! Panel storage: unit identifiers, the daily outcome grid, unit metadata,
//! predictor tables and the CSV formats they are read from.

mod age;
mod clean;

pub use age::{age_band_rate, AgeBand, BandCounts, DoseScheme, RawVaxCounts};
pub use clean::{
    clean_series, enforce_monotone, interpolate_missing, repair_series, rolling_mean, CleanOutcome,
    CleaningPolicy, RepairMode,
};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Read;
use std::path::Path;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATE_FORMAT: &str = "%Y-%m-%d";

pub fn parse_date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), DATE_FORMAT).map_err(|_| Error::UnparseableDate(s.into()))
}

/// Identifier of a panel unit: a state postal code or a 5-digit county FIPS code.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct UnitId(String);

impl UnitId {
    pub fn new(code: impl Into<String>) -> Result<Self> {
        let code = code.into();
        let trimmed = code.trim();
        if trimmed.is_empty() {
            return Err(Error::InvalidUnitId(code));
        }
        // An all-digit code is a FIPS code and must have exactly five digits.
        if trimmed.bytes().all(|b| b.is_ascii_digit()) && trimmed.len() != 5 {
            return Err(Error::InvalidUnitId(code));
        }
        Ok(UnitId(trimmed.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_fips(&self) -> bool {
        self.0.len() == 5 && self.0.bytes().all(|b| b.is_ascii_digit())
    }

    /// Two-letter postal code of the state this unit belongs to, if known.
    pub fn state(&self) -> Option<&'static str> {
        if self.is_fips() {
            crate::donors::state_postal_from_fips(&self.0[..2])
        } else {
            crate::donors::canonical_postal(&self.0)
        }
    }

    /// Stable 64-bit key used to seed per-donor randomness (FNV-1a).
    pub fn stable_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.0.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for UnitId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        UnitId::new(s)
    }
}

impl From<UnitId> for String {
    fn from(u: UnitId) -> String {
        u.0
    }
}

impl std::str::FromStr for UnitId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        UnitId::new(s)
    }
}

/// Size class of a vaccination incentive (0 = unclassifiable).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncentiveCategory(u8);

impl IncentiveCategory {
    pub fn new(level: u8) -> Result<Self> {
        if level > 3 {
            return Err(Error::InvalidParameter(format!(
                "incentive category must be 0..=3, got {level}"
            )));
        }
        Ok(IncentiveCategory(level))
    }

    pub fn level(self) -> u8 {
        self.0
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UnitMeta {
    pub treated: bool,
    pub t0: Option<NaiveDate>,
    pub cluster: Option<String>,
    pub incentive_category: Option<IncentiveCategory>,
}

/// Units that can be joined on their identifier.
pub trait KeyedTable {
    fn unit_ids(&self) -> Vec<UnitId>;
}

/// Dense daily outcome grid. Cells may be missing (`None`), never silently zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    units: Vec<UnitId>,
    index: HashMap<UnitId, usize>,
    dates: Vec<NaiveDate>,
    values: Vec<Vec<Option<f64>>>,
    meta: Vec<UnitMeta>,
}

impl Panel {
    pub fn new(units: Vec<UnitId>, dates: Vec<NaiveDate>, values: Vec<Vec<Option<f64>>>) -> Result<Self> {
        if values.len() != units.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} units but {} rows",
                units.len(),
                values.len()
            )));
        }
        for row in &values {
            if row.len() != dates.len() {
                return Err(Error::LengthMismatch { expected: dates.len(), got: row.len() });
            }
        }
        for pair in dates.windows(2) {
            if pair[1] - pair[0] != Duration::days(1) {
                return Err(Error::InvalidParameter(format!(
                    "date grid is not contiguous between {} and {}",
                    pair[0], pair[1]
                )));
            }
        }
        let mut index = HashMap::with_capacity(units.len());
        for (i, u) in units.iter().enumerate() {
            if index.insert(u.clone(), i).is_some() {
                return Err(Error::InvalidParameter(format!("duplicate unit {u}")));
            }
        }
        let meta = vec![UnitMeta::default(); units.len()];
        Ok(Panel { units, index, dates, values, meta })
    }

    /// Builds a panel with no missing cells, starting at `start`.
    pub fn from_dense(units: Vec<UnitId>, start: NaiveDate, rows: Vec<Vec<f64>>) -> Result<Self> {
        let len = rows.first().map_or(0, Vec::len);
        let dates = (0..len).map(|d| start + Duration::days(d as i64)).collect();
        let values = rows.into_iter().map(|r| r.into_iter().map(Some).collect()).collect();
        Panel::new(units, dates, values)
    }

    pub fn units(&self) -> &[UnitId] {
        &self.units
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn n_days(&self) -> usize {
        self.dates.len()
    }

    pub fn index_of(&self, unit: &UnitId) -> Option<usize> {
        self.index.get(unit).copied()
    }

    pub fn date_index(&self, date: NaiveDate) -> Option<usize> {
        let first = *self.dates.first()?;
        let offset = (date - first).num_days();
        (offset >= 0 && (offset as usize) < self.dates.len()).then_some(offset as usize)
    }

    pub fn series(&self, unit: &UnitId) -> Result<&[Option<f64>]> {
        let i = self.index_of(unit).ok_or_else(|| Error::UnknownUnit(unit.to_string()))?;
        Ok(&self.values[i])
    }

    /// Outcome row with every cell present, or `MissingOutcome`.
    pub fn dense_series(&self, unit: &UnitId) -> Result<Vec<f64>> {
        self.series(unit)?
            .iter()
            .enumerate()
            .map(|(day, v)| v.ok_or_else(|| Error::MissingOutcome { unit: unit.to_string(), day }))
            .collect()
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().flatten().filter(|v| v.is_none()).count()
    }

    pub fn meta(&self, unit: &UnitId) -> Option<&UnitMeta> {
        self.index_of(unit).map(|i| &self.meta[i])
    }

    /// Attaches metadata. Entries for units outside the panel are ignored.
    pub fn set_meta(&mut self, meta: &BTreeMap<UnitId, UnitMeta>) -> Result<()> {
        for (unit, m) in meta {
            let Some(i) = self.index_of(unit) else { continue };
            if let Some(t0) = m.t0 {
                if self.date_index(t0).is_none() {
                    return Err(Error::InvalidParameter(format!(
                        "t0 {t0} of unit {unit} lies outside the panel dates"
                    )));
                }
            } else if m.treated {
                return Err(Error::InvalidParameter(format!("treated unit {unit} has no t0")));
            }
            self.meta[i] = m.clone();
        }
        Ok(())
    }

    /// Keeps only the listed units, in the order given.
    pub fn restrict(&self, keep: &[UnitId]) -> Result<Panel> {
        let mut values = Vec::with_capacity(keep.len());
        let mut meta = Vec::with_capacity(keep.len());
        for u in keep {
            let i = self.index_of(u).ok_or_else(|| Error::UnknownUnit(u.to_string()))?;
            values.push(self.values[i].clone());
            meta.push(self.meta[i].clone());
        }
        let mut p = Panel::new(keep.to_vec(), self.dates.clone(), values)?;
        p.meta = meta;
        Ok(p)
    }

    /// Replaces the series of one unit.
    pub fn with_series(&self, unit: &UnitId, series: Vec<Option<f64>>) -> Result<Panel> {
        let i = self.index_of(unit).ok_or_else(|| Error::UnknownUnit(unit.to_string()))?;
        if series.len() != self.n_days() {
            return Err(Error::LengthMismatch { expected: self.n_days(), got: series.len() });
        }
        let mut p = self.clone();
        p.values[i] = series;
        Ok(p)
    }

    /// Writes the panel in long format (`unit,date,value`); missing cells are left empty.
    pub fn write_long_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["unit", "date", "value"])?;
        for (u, row) in self.units.iter().zip(&self.values) {
            for (d, v) in self.dates.iter().zip(row) {
                let value = v.map(crate::report::fmt_f64).unwrap_or_default();
                w.write_record([u.as_str(), &d.format(DATE_FORMAT).to_string(), &value])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

impl KeyedTable for Panel {
    fn unit_ids(&self) -> Vec<UnitId> {
        self.units.clone()
    }
}

/// Column names of a long-format outcome file.
#[derive(Debug, Clone)]
pub struct LongSchema {
    pub unit: String,
    pub date: String,
    pub value: String,
}

impl Default for LongSchema {
    fn default() -> Self {
        LongSchema { unit: "unit".into(), date: "date".into(), value: "value".into() }
    }
}

fn parse_cell(column: &str, raw: &str) -> Result<Option<f64>> {
    let s = raw.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .map(Some)
        .ok_or_else(|| Error::UnparseableValue { column: column.into(), value: raw.into() })
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Csv(format!("missing column {name:?}")))
}

/// Reads a long-format outcome table into a dense daily panel.
///
/// Units are sorted by identifier. The date grid spans the earliest to the
/// latest date seen; cells absent from the file are marked missing.
pub fn ingest_panel<R: Read>(input: R, schema: &LongSchema) -> Result<Panel> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    let (ui, di, vi) = (
        column_index(&headers, &schema.unit)?,
        column_index(&headers, &schema.date)?,
        column_index(&headers, &schema.value)?,
    );
    let mut cells: BTreeMap<UnitId, BTreeMap<NaiveDate, Option<f64>>> = BTreeMap::new();
    let mut rows = 0usize;
    for rec in rdr.records() {
        let rec = rec?;
        rows += 1;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let unit = UnitId::new(field(ui))?;
        let date = parse_date(field(di))?;
        let value = parse_cell(&schema.value, field(vi))?;
        if cells.entry(unit.clone()).or_default().insert(date, value).is_some() {
            return Err(Error::DuplicateCell { unit: unit.to_string(), date: date.to_string() });
        }
    }
    if rows == 0 {
        return Err(Error::EmptyFile("outcome table".into()));
    }
    let first = cells.values().filter_map(|m| m.keys().next()).min().copied().unwrap();
    let last = cells.values().filter_map(|m| m.keys().next_back()).max().copied().unwrap();
    let n_days = (last - first).num_days() as usize + 1;
    let dates: Vec<NaiveDate> = (0..n_days).map(|d| first + Duration::days(d as i64)).collect();
    let mut units = Vec::with_capacity(cells.len());
    let mut values = Vec::with_capacity(cells.len());
    for (unit, by_date) in cells {
        let mut row = vec![None; n_days];
        for (date, v) in by_date {
            row[(date - first).num_days() as usize] = v;
        }
        units.push(unit);
        values.push(row);
    }
    Panel::new(units, dates, values)
}

pub fn read_panel(path: &Path) -> Result<Panel> {
    let f = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    ingest_panel(f, &LongSchema::default())
}

fn parse_bool(raw: &str) -> Result<bool> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "" | "0" | "false" | "no" | "n" => Ok(false),
        "1" | "true" | "yes" | "y" => Ok(true),
        _ => Err(Error::UnparseableValue { column: "treated".into(), value: raw.into() }),
    }
}

/// Reads `unit,treated,t0,cluster,incentive_category`; empty fields are allowed.
pub fn ingest_metadata<R: Read>(input: R) -> Result<BTreeMap<UnitId, UnitMeta>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    let ui = column_index(&headers, "unit")?;
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (ti, t0i, ci, ii) = (col("treated"), col("t0"), col("cluster"), col("incentive_category"));
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let get = |i: Option<usize>| i.and_then(|i| rec.get(i)).unwrap_or("").trim().to_string();
        let unit = UnitId::new(get(Some(ui)))?;
        let t0 = get(t0i);
        let cluster = get(ci);
        let category = get(ii);
        let meta = UnitMeta {
            treated: parse_bool(&get(ti))?,
            t0: if t0.is_empty() { None } else { Some(parse_date(&t0)?) },
            cluster: (!cluster.is_empty()).then_some(cluster),
            incentive_category: if category.is_empty() {
                None
            } else {
                let level = category.parse::<u8>().map_err(|_| Error::UnparseableValue {
                    column: "incentive_category".into(),
                    value: category.clone(),
                })?;
                Some(IncentiveCategory::new(level)?)
            },
        };
        if out.insert(unit.clone(), meta).is_some() {
            return Err(Error::InvalidParameter(format!("duplicate metadata row for {unit}")));
        }
    }
    Ok(out)
}

pub fn read_metadata(path: &Path) -> Result<BTreeMap<UnitId, UnitMeta>> {
    let f = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    ingest_metadata(f)
}

/// Static unit characteristics, one row per unit and one column per predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorTable {
    names: Vec<String>,
    units: Vec<UnitId>,
    rows: Vec<Vec<f64>>,
}

impl PredictorTable {
    pub fn new(names: Vec<String>, units: Vec<UnitId>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() != units.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} units but {} predictor rows",
                units.len(),
                rows.len()
            )));
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != names.len()) {
            return Err(Error::LengthMismatch { expected: names.len(), got: bad.len() });
        }
        let distinct: BTreeSet<_> = units.iter().collect();
        if distinct.len() != units.len() {
            return Err(Error::InvalidParameter("duplicate unit in predictor table".into()));
        }
        Ok(PredictorTable { names, units, rows })
    }

    /// A table without predictor columns, for outcome-only fits.
    pub fn empty(units: Vec<UnitId>) -> Self {
        let rows = vec![Vec::new(); units.len()];
        PredictorTable { names: Vec::new(), units, rows }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn units(&self) -> &[UnitId] {
        &self.units
    }

    pub fn row(&self, unit: &UnitId) -> Result<&[f64]> {
        self.units
            .iter()
            .position(|u| u == unit)
            .map(|i| self.rows[i].as_slice())
            .ok_or_else(|| Error::UnknownUnit(unit.to_string()))
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let j = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownPredictor(name.into()))?;
        Ok(self.rows.iter().map(|r| r[j]).collect())
    }

    /// Keeps the named predictors, in the order given.
    pub fn select(&self, names: &[String]) -> Result<PredictorTable> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.names.iter().position(|m| m == n).ok_or_else(|| Error::UnknownPredictor(n.clone()))
            })
            .collect::<Result<_>>()?;
        let rows = self.rows.iter().map(|r| idx.iter().map(|&j| r[j]).collect()).collect();
        PredictorTable::new(names.to_vec(), self.units.clone(), rows)
    }

    pub fn restrict(&self, keep: &[UnitId]) -> Result<PredictorTable> {
        let rows = keep.iter().map(|u| self.row(u).map(<[f64]>::to_vec)).collect::<Result<_>>()?;
        PredictorTable::new(self.names.clone(), keep.to_vec(), rows)
    }
}

impl KeyedTable for PredictorTable {
    fn unit_ids(&self) -> Vec<UnitId> {
        self.units.clone()
    }
}

/// Reads `unit,<predictor1>,<predictor2>,...`. Every cell must be numeric.
pub fn ingest_predictors<R: Read>(input: R) -> Result<PredictorTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.get(0).map(str::trim) != Some("unit") {
        return Err(Error::Csv("predictor table must start with a `unit` column".into()));
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut units = Vec::new();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        units.push(UnitId::new(rec.get(0).unwrap_or(""))?);
        let row = names
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let raw = rec.get(j + 1).unwrap_or("");
                parse_cell(name, raw)?
                    .ok_or_else(|| Error::UnparseableValue { column: name.clone(), value: raw.into() })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if units.is_empty() {
        return Err(Error::EmptyFile("predictor table".into()));
    }
    PredictorTable::new(names, units, rows)
}

pub fn read_predictors(path: &Path) -> Result<PredictorTable> {
    let f = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    ingest_predictors(f)
}

/// Outcome of an inner join on unit identifiers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JoinReport {
    pub kept: Vec<UnitId>,
    pub dropped: Vec<UnitId>,
}

/// Inner join of several keyed tables. Units absent from any table are dropped and listed.
pub fn join_on_key(tables: &[&dyn KeyedTable]) -> Result<JoinReport> {
    let sets: Vec<BTreeSet<UnitId>> = tables.iter().map(|t| t.unit_ids().into_iter().collect()).collect();
    let union: BTreeSet<UnitId> = sets.iter().flatten().cloned().collect();
    let (kept, dropped): (Vec<UnitId>, Vec<UnitId>) =
        union.into_iter().partition(|u| sets.iter().all(|s| s.contains(u)));
    if kept.is_empty() {
        return Err(Error::EmptyIntersection);
    }
    Ok(JoinReport { kept, dropped })
}

impl KeyedTable for Vec<UnitId> {
    fn unit_ids(&self) -> Vec<UnitId> {
        self.clone()
    }
}

impl KeyedTable for BTreeMap<UnitId, UnitMeta> {
    fn unit_ids(&self) -> Vec<UnitId> {
        self.keys().cloned().collect()
    }
}
