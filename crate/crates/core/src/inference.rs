//! Placebo-based inference: windowed RMSE, post/pre ratios, permutation
//! p-values and the training-length sweep.

use rayon::prelude::*;

use crate::engine::{fit_synth, StudySpec, SynthResult};
use crate::error::{Error, Result};
use crate::panel::{Panel, PredictorTable, UnitId};

/// Floor applied to a zero pre-period RMSE inside placebo loops.
pub const PRE_RMSE_FLOOR: f64 = 1e-12;

/// Root mean squared gap over the inclusive day range `t1..=t2` (0-based).
pub fn rmse_window(actual: &[f64], synthetic: &[f64], t1: usize, t2: usize) -> Result<f64> {
    if t2 < t1 {
        return Err(Error::EmptyWindow);
    }
    if t2 >= actual.len() || t2 >= synthetic.len() {
        return Err(Error::DimensionMismatch(format!(
            "window ends at day {t2} but series have {} and {} points",
            actual.len(),
            synthetic.len()
        )));
    }
    let n = (t2 - t1 + 1) as f64;
    let ss: f64 = (t1..=t2).map(|t| (actual[t] - synthetic[t]).powi(2)).sum();
    Ok((ss / n).sqrt())
}

pub fn post_pre_ratio(r_post: f64, r_pre: f64) -> Result<f64> {
    if !(r_pre > 0.0) {
        return Err(Error::ZeroPreRmse);
    }
    Ok(r_post / r_pre)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaceboEntry {
    pub unit: UnitId,
    /// Post/pre RMSE ratio; NaN when skipped.
    pub r: f64,
    pub r_pre: f64,
    pub r_post: f64,
    /// Pre-period length used for this unit's fit.
    pub pre_len: usize,
    /// Failure message when the fit for this unit did not complete.
    pub skipped: Option<String>,
    /// The pre-period RMSE was zero and has been floored.
    pub floored: bool,
}

impl PlaceboEntry {
    fn from_fit(unit: UnitId, fit: &SynthResult) -> Result<Self> {
        let t = fit.actual.len();
        if fit.pre_len >= t {
            return Err(Error::InvalidStudy("no post-intervention days".into()));
        }
        let r_pre = rmse_window(&fit.actual, &fit.synthetic, 0, fit.pre_len - 1)?;
        let r_post = rmse_window(&fit.actual, &fit.synthetic, fit.pre_len, t - 1)?;
        let floored = !(r_pre > 0.0);
        let r = post_pre_ratio(r_post, r_pre.max(PRE_RMSE_FLOOR))?;
        Ok(PlaceboEntry { unit, r, r_pre, r_post, pre_len: fit.pre_len, skipped: None, floored })
    }

    fn skipped(unit: UnitId, pre_len: usize, reason: String) -> Self {
        PlaceboEntry { unit, r: f64::NAN, r_pre: f64::NAN, r_post: f64::NAN, pre_len, skipped: Some(reason), floored: false }
    }
}

/// Ratios of the treated unit and of every placebo, ordered by unit id.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaceboEnsemble {
    pub treated: UnitId,
    pub entries: Vec<PlaceboEntry>,
    pub treated_index: usize,
}

impl PlaceboEnsemble {
    /// Builds an ensemble from raw ratios; used for analysis of precomputed runs.
    pub fn from_ratios(units: Vec<UnitId>, ratios: &[f64], treated_index: usize) -> Result<Self> {
        if units.len() != ratios.len() || treated_index >= units.len() {
            return Err(Error::DimensionMismatch("one ratio per unit and a valid treated index required".into()));
        }
        let treated = units[treated_index].clone();
        let entries = units
            .into_iter()
            .zip(ratios)
            .map(|(unit, &r)| PlaceboEntry { unit, r, r_pre: 1.0, r_post: r, pre_len: 0, skipped: None, floored: false })
            .collect();
        Ok(PlaceboEnsemble { treated, entries, treated_index })
    }

    pub fn treated_entry(&self) -> &PlaceboEntry {
        &self.entries[self.treated_index]
    }

    /// Number of entries that enter the p-value denominator.
    pub fn n_valid(&self) -> usize {
        self.entries.iter().filter(|e| e.skipped.is_none()).count()
    }
}

/// Share of units whose ratio strictly exceeds the treated unit's ratio.
/// Skipped entries count in neither the numerator nor the denominator.
pub fn p_value(ensemble: &PlaceboEnsemble) -> f64 {
    let r1 = ensemble.treated_entry().r;
    let valid: Vec<f64> = ensemble.entries.iter().filter(|e| e.skipped.is_none()).map(|e| e.r).collect();
    let above = valid.iter().filter(|&&r| r > r1).count();
    above as f64 / valid.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaceboOptions {
    /// Worker threads for the placebo fits.
    pub parallelism: usize,
    /// Pre-period length for the placebo units; defaults to the treated unit's.
    pub placebo_pre_len: Option<usize>,
}

impl Default for PlaceboOptions {
    fn default() -> Self {
        PlaceboOptions {
            parallelism: std::thread::available_parallelism().map_or(1, |n| n.get()),
            placebo_pre_len: None,
        }
    }
}

fn pool(parallelism: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot start worker pool: {e}")))
}

/// Fits the treated unit and each donor as a pseudo-treated unit against the
/// remaining donors. The treated unit never enters a placebo donor pool.
pub fn placebo_run(
    spec: &StudySpec,
    panel: &Panel,
    predictors: &PredictorTable,
    opts: &PlaceboOptions,
) -> Result<PlaceboEnsemble> {
    if spec.donors.len() < 2 {
        return Err(Error::TooFewUnits { needed: 2, got: spec.donors.len() });
    }
    let treated_fit = fit_synth(spec, panel, predictors)?;
    let treated_entry = PlaceboEntry::from_fit(spec.treated.clone(), &treated_fit)?;
    let placebo_pre_len = opts.placebo_pre_len.unwrap_or(spec.pre_len);

    let placebos: Vec<PlaceboEntry> = pool(opts.parallelism)?.install(|| {
        spec.donors
            .par_iter()
            .map(|unit| {
                let mut s = spec.clone();
                s.treated = unit.clone();
                s.donors = spec.donors.iter().filter(|d| *d != unit).cloned().collect();
                s.pre_len = placebo_pre_len;
                match fit_synth(&s, panel, predictors).and_then(|fit| PlaceboEntry::from_fit(unit.clone(), &fit)) {
                    Ok(e) => e,
                    Err(e) => PlaceboEntry::skipped(unit.clone(), placebo_pre_len, e.to_string()),
                }
            })
            .collect()
    });

    let mut entries: Vec<PlaceboEntry> = std::iter::once(treated_entry).chain(placebos).collect();
    entries.sort_by(|a, b| a.unit.cmp(&b.unit));
    let treated_index = entries.iter().position(|e| e.unit == spec.treated).expect("treated entry present");
    Ok(PlaceboEnsemble { treated: spec.treated.clone(), entries, treated_index })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub t_fit: usize,
    /// Sum of squared gaps over the whole pre-period.
    pub pre_deviation: Option<f64>,
    pub p_value: Option<f64>,
    pub error: Option<String>,
}

/// One fit and placebo ensemble per training length, sorted by training length.
pub fn training_sweep(
    template: &StudySpec,
    t_fits: &[usize],
    panel: &Panel,
    predictors: &PredictorTable,
    opts: &PlaceboOptions,
) -> Vec<SweepRow> {
    let mut t_fits = t_fits.to_vec();
    t_fits.sort_unstable();
    t_fits.dedup();
    t_fits
        .into_iter()
        .map(|t_fit| {
            let spec = StudySpec { t_fit, ..template.clone() };
            let cell = fit_synth(&spec, panel, predictors).and_then(|fit| {
                let ensemble = placebo_run(&spec, panel, predictors, opts)?;
                Ok((fit.pre_mspe, p_value(&ensemble)))
            });
            match cell {
                Ok((dev, p)) => SweepRow { t_fit, pre_deviation: Some(dev), p_value: Some(p), error: None },
                Err(e) => SweepRow { t_fit, pre_deviation: None, p_value: None, error: Some(e.to_string()) },
            }
        })
        .collect()
}
