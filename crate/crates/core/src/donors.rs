//! Predictor and donor pool reduction.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::panel::{PredictorTable, UnitId, UnitMeta};

/// State FIPS prefix and postal code, 50 states plus DC.
const STATES: [(&str, &str); 51] = [
    ("01", "AL"), ("02", "AK"), ("04", "AZ"), ("05", "AR"), ("06", "CA"), ("08", "CO"),
    ("09", "CT"), ("10", "DE"), ("11", "DC"), ("12", "FL"), ("13", "GA"), ("15", "HI"),
    ("16", "ID"), ("17", "IL"), ("18", "IN"), ("19", "IA"), ("20", "KS"), ("21", "KY"),
    ("22", "LA"), ("23", "ME"), ("24", "MD"), ("25", "MA"), ("26", "MI"), ("27", "MN"),
    ("28", "MS"), ("29", "MO"), ("30", "MT"), ("31", "NE"), ("32", "NV"), ("33", "NH"),
    ("34", "NJ"), ("35", "NM"), ("36", "NY"), ("37", "NC"), ("38", "ND"), ("39", "OH"),
    ("40", "OK"), ("41", "OR"), ("42", "PA"), ("44", "RI"), ("45", "SC"), ("46", "SD"),
    ("47", "TN"), ("48", "TX"), ("49", "UT"), ("50", "VT"), ("51", "VA"), ("53", "WA"),
    ("54", "WV"), ("55", "WI"), ("56", "WY"),
];

pub(crate) fn state_postal_from_fips(prefix: &str) -> Option<&'static str> {
    STATES.iter().find(|(f, _)| *f == prefix).map(|(_, p)| *p)
}

pub(crate) fn canonical_postal(code: &str) -> Option<&'static str> {
    STATES.iter().find(|(_, p)| p.eq_ignore_ascii_case(code)).map(|(_, p)| *p)
}

/// The fifteen American Communities Project county types with their county counts.
pub const ACP_CLUSTERS: [(&str, usize); 15] = [
    ("Exurbs", 222),
    ("Graying America", 364),
    ("African American South", 370),
    ("Evangelical Hubs", 372),
    ("Working Class Country", 337),
    ("Military Posts", 89),
    ("Urban Suburbs", 106),
    ("Hispanic Centers", 161),
    ("Native American Lands", 43),
    ("Rural American Lands", 599),
    ("College Towns", 154),
    ("LDS Enclaves", 41),
    ("Aging Farmlands", 161),
    ("Big Cities", 47),
    ("Middle Suburbs", 77),
];

/// Canonical cluster label, accepting the project's alternative name for the
/// largest cluster.
pub fn canonical_cluster(label: &str) -> Option<&'static str> {
    let label = if label == "Rural Middle America" { "Rural American Lands" } else { label };
    ACP_CLUSTERS.iter().find(|(l, _)| *l == label).map(|(l, _)| *l)
}

/// Thematic grouping of predictors, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorBlocks {
    blocks: Vec<(String, Vec<String>)>,
}

impl PredictorBlocks {
    pub fn new(blocks: Vec<(String, Vec<String>)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (_, members) in &blocks {
            for m in members {
                if !seen.insert(m.clone()) {
                    return Err(Error::InvalidParameter(format!("predictor {m} appears in two blocks")));
                }
            }
        }
        Ok(PredictorBlocks { blocks })
    }

    pub fn blocks(&self) -> &[(String, Vec<String>)] {
        &self.blocks
    }
}

/// Reads `block,predictor` rows.
pub fn ingest_blocks<R: Read>(input: R) -> Result<PredictorBlocks> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut blocks: Vec<(String, Vec<String>)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let (b, p) = (rec.get(0).unwrap_or(""), rec.get(1).unwrap_or(""));
        if b.is_empty() || p.is_empty() {
            return Err(Error::Csv("block file rows need a block and a predictor".into()));
        }
        match blocks.iter_mut().find(|(name, _)| name == b) {
            Some((_, members)) => members.push(p.to_string()),
            None => blocks.push((b.to_string(), vec![p.to_string()])),
        }
    }
    if blocks.is_empty() {
        return Err(Error::EmptyFile("block file".into()));
    }
    PredictorBlocks::new(blocks)
}

pub fn read_blocks(path: &Path) -> Result<PredictorBlocks> {
    let f = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    ingest_blocks(f)
}

/// Symmetric matrix of absolute correlations between named predictors.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrMatrix {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl CorrMatrix {
    fn index(&self, name: &str) -> Result<usize> {
        self.names.iter().position(|n| n == name).ok_or_else(|| Error::UnknownPredictor(name.into()))
    }

    /// Absolute Pearson correlations between the predictor columns, across units.
    /// Constant columns correlate 0 with everything else.
    pub fn from_table(table: &PredictorTable) -> Result<Self> {
        let cols: Vec<Vec<f64>> = table.names().iter().map(|n| table.column(n)).collect::<Result<_>>()?;
        let centred: Vec<(Vec<f64>, f64)> = cols
            .iter()
            .map(|c| {
                let m = c.iter().sum::<f64>() / c.len() as f64;
                let d: Vec<f64> = c.iter().map(|x| x - m).collect();
                let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
                (d, norm)
            })
            .collect();
        let n = cols.len();
        let mut values = vec![vec![0.0; n]; n];
        for i in 0..n {
            values[i][i] = 1.0;
            for j in i + 1..n {
                let (a, na) = &centred[i];
                let (b, nb) = &centred[j];
                let c = if *na > 0.0 && *nb > 0.0 {
                    (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).abs().min(1.0)
                } else {
                    0.0
                };
                values[i][j] = c;
                values[j][i] = c;
            }
        }
        Ok(CorrMatrix { names: table.names().to_vec(), values })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorSelection {
    /// (block, predictor) pairs in selection order.
    pub selected: Vec<(String, String)>,
    /// Blocks that could not supply `per_block` weakly correlated predictors.
    pub short_blocks: Vec<String>,
}

impl PredictorSelection {
    pub fn names(&self) -> Vec<String> {
        self.selected.iter().map(|(_, p)| p.clone()).collect()
    }
}

/// Per block: repeatedly pick the member with the highest mean absolute
/// correlation to the rest of its block, then discard members correlated
/// above `threshold` with it, until `per_block` are chosen or none survive.
pub fn select_predictors_naive(
    corr: &CorrMatrix,
    blocks: &PredictorBlocks,
    threshold: f64,
    per_block: usize,
) -> Result<PredictorSelection> {
    let mut selected = Vec::new();
    let mut short_blocks = Vec::new();
    for (block, members) in blocks.blocks() {
        if members.is_empty() {
            return Err(Error::EmptyBlock(block.clone()));
        }
        let idx: Vec<usize> = members.iter().map(|m| corr.index(m)).collect::<Result<_>>()?;
        let score = |i: usize| -> f64 {
            if idx.len() < 2 {
                return 0.0;
            }
            idx.iter().filter(|&&j| j != i).map(|&j| corr.values[i][j].abs()).sum::<f64>() / (idx.len() - 1) as f64
        };
        let mut pool: Vec<usize> = idx.clone();
        let mut picked = 0;
        while picked < per_block && !pool.is_empty() {
            // First maximum wins ties, keeping file order.
            let best = pool
                .iter()
                .copied()
                .fold(None::<(usize, f64)>, |acc, i| match acc {
                    Some((_, s)) if s >= score(i) => acc,
                    _ => Some((i, score(i))),
                })
                .map(|(i, _)| i)
                .unwrap();
            selected.push((block.clone(), corr.names[best].clone()));
            picked += 1;
            pool.retain(|&j| j != best && corr.values[best][j].abs() <= threshold);
        }
        if picked < per_block {
            short_blocks.push(block.clone());
        }
    }
    Ok(PredictorSelection { selected, short_blocks })
}

/// Cluster label per unit, drawn from the fifteen-type vocabulary.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClusterMap {
    assignment: BTreeMap<UnitId, String>,
}

impl ClusterMap {
    pub fn new(assignment: BTreeMap<UnitId, String>) -> Result<Self> {
        let assignment = assignment
            .into_iter()
            .map(|(u, label)| match canonical_cluster(&label) {
                Some(c) => Ok((u, c.to_string())),
                None => Err(Error::UnknownCluster(label)),
            })
            .collect::<Result<_>>()?;
        Ok(ClusterMap { assignment })
    }

    /// Labels from unit metadata, skipping unlabeled units.
    pub fn from_meta(meta: &BTreeMap<UnitId, UnitMeta>) -> Result<Self> {
        ClusterMap::new(meta.iter().filter_map(|(u, m)| m.cluster.clone().map(|c| (u.clone(), c))).collect())
    }

    pub fn label(&self, unit: &UnitId) -> Option<&str> {
        self.assignment.get(unit).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }
}

/// Reads `fips,cluster` rows.
pub fn ingest_clusters<R: Read>(input: R) -> Result<ClusterMap> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut assignment = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let unit = UnitId::new(rec.get(0).unwrap_or(""))?;
        let label = rec.get(1).unwrap_or("").to_string();
        if assignment.insert(unit.clone(), label).is_some() {
            return Err(Error::InvalidParameter(format!("unit {unit} has two cluster rows")));
        }
    }
    ClusterMap::new(assignment)
}

pub fn read_clusters(path: &Path) -> Result<ClusterMap> {
    let f = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    ingest_clusters(f)
}

/// Candidates sharing the target's cluster label, target excluded.
pub fn filter_by_cluster(target: &UnitId, candidates: &[UnitId], clusters: &ClusterMap) -> Result<Vec<UnitId>> {
    let label = clusters.label(target).ok_or_else(|| Error::UnlabeledUnit(target.to_string()))?;
    Ok(candidates.iter().filter(|c| *c != target && clusters.label(c) == Some(label)).cloned().collect())
}

/// Cluster filter that falls back to the full candidate list when no candidate
/// shares the target's label. The flag reports the fallback.
pub fn cluster_pool_or_fallback(
    target: &UnitId,
    candidates: &[UnitId],
    clusters: &ClusterMap,
) -> Result<(Vec<UnitId>, bool)> {
    let pool = filter_by_cluster(target, candidates, clusters)?;
    if pool.is_empty() {
        log::warn!("no candidate shares the cluster of {target}; using the full control pool");
        let all = candidates.iter().filter(|c| *c != target).cloned().collect();
        return Ok((all, true));
    }
    Ok((pool, false))
}

/// State adjacency keyed by postal code.
pub type Adjacency = BTreeMap<String, BTreeSet<String>>;

/// Reads `state,neighbor` rows. The relation is used as given, not symmetrized.
pub fn ingest_adjacency<R: Read>(input: R) -> Result<Adjacency> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut adj = Adjacency::new();
    for rec in rdr.records() {
        let rec = rec?;
        let state = rec.get(0).unwrap_or("").to_ascii_uppercase();
        let neighbor = rec.get(1).unwrap_or("").to_ascii_uppercase();
        if state.is_empty() {
            return Err(Error::Csv("adjacency row without a state".into()));
        }
        let entry = adj.entry(state).or_default();
        if !neighbor.is_empty() {
            entry.insert(neighbor);
        }
    }
    Ok(adj)
}

pub fn read_adjacency(path: &Path) -> Result<Adjacency> {
    let f = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    ingest_adjacency(f)
}

/// Candidates located in a state adjacent to the target's state. Candidates in
/// the target's own state are always excluded.
pub fn filter_by_neighbor_states(target: &UnitId, candidates: &[UnitId], adjacency: &Adjacency) -> Result<Vec<UnitId>> {
    let state = target.state().ok_or_else(|| Error::UnknownState(target.to_string()))?;
    let neighbors = adjacency.get(state).ok_or_else(|| Error::UnknownState(target.to_string()))?;
    Ok(candidates
        .iter()
        .filter(|c| match c.state() {
            Some(s) => s != state && neighbors.contains(s),
            None => false,
        })
        .cloned()
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlTargetSplit {
    pub control: Vec<UnitId>,
    pub target: Vec<UnitId>,
}

impl ControlTargetSplit {
    /// Difference between the split size and an externally reported unit count.
    pub fn discrepancy(&self, reported_total: usize) -> i64 {
        (self.control.len() + self.target.len()) as i64 - reported_total as i64
    }
}

/// Units in any state containing a treated unit become targets; all others are controls.
/// Units whose state is unknown are classified by their own flag.
pub fn split_control_target(units: &[UnitId], meta: &BTreeMap<UnitId, UnitMeta>) -> ControlTargetSplit {
    let is_treated = |u: &UnitId| meta.get(u).is_some_and(|m| m.treated);
    let treated_states: BTreeSet<&str> = units.iter().filter(|u| is_treated(u)).filter_map(UnitId::state).collect();
    let (target, control) = units.iter().cloned().partition(|u| match u.state() {
        Some(s) => treated_states.contains(s),
        None => is_treated(u),
    });
    ControlTargetSplit { control, target }
}
