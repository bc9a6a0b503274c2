//! The synthetic control procedure: split the pre-period into training and
//! validation windows, choose predictor importance weights V on the
//! validation window, fit donor weights W on the training predictors and
//! build the synthetic and gap series.

use std::ops::Range;

use chrono::NaiveDate;
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::optim::{multistart, NelderMeadOptions};
use crate::panel::{Panel, PredictorTable, UnitId};
use crate::weights::{
    solve_w_keyed, solve_w_warm, sparsify_and_resolve, Regularization, SolverOptions, WeightSolution, WeightVector,
};

/// Name of the predictor appended from the outcome series.
pub const OUTCOME_MEAN_PREDICTOR: &str = "outcome_mean_train";

#[derive(Debug, Clone, PartialEq)]
pub enum VMode {
    Optimized,
    InverseVariance,
    Fixed(Vec<f64>),
}

impl std::str::FromStr for VMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "optimized" => Ok(VMode::Optimized),
            "inverse_variance" | "inverse-variance" => Ok(VMode::InverseVariance),
            other => {
                let body = other.strip_prefix("fixed:").ok_or_else(|| {
                    Error::InvalidParameter(format!(
                        "unknown v-mode {other:?} (expected optimized, inverse_variance or fixed:v1,v2,...)"
                    ))
                })?;
                let v = body
                    .split(',')
                    .map(|x| {
                        x.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::InvalidParameter(format!("bad fixed weight {x:?}")))
                    })
                    .collect::<Result<Vec<f64>>>()?;
                Ok(VMode::Fixed(v))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrainPlacement {
    /// Training window at the start of the pre-period.
    Head,
    /// Training window immediately before the intervention.
    #[default]
    Tail,
}

impl std::str::FromStr for TrainPlacement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "head" => Ok(TrainPlacement::Head),
            "tail" => Ok(TrainPlacement::Tail),
            _ => Err(Error::InvalidParameter(format!("unknown train placement {s:?}"))),
        }
    }
}

/// Settings of the derivative-free search over V.
#[derive(Debug, Clone, PartialEq)]
pub struct VSearchOptions {
    /// Random starts in addition to the uniform and inverse-variance starts.
    pub random_starts: usize,
    /// Evaluation budget per Nelder–Mead run.
    pub max_evals: usize,
    /// Stop when validation MSPE improves less than `stall_tol` over this many evaluations.
    pub stall_window: usize,
    pub stall_tol: f64,
    /// Restarts of the inner weight solve during the search.
    pub inner_restarts: usize,
}

impl Default for VSearchOptions {
    fn default() -> Self {
        VSearchOptions { random_starts: 2, max_evals: 600, stall_window: 50, stall_tol: 1e-10, inner_restarts: 2 }
    }
}

/// One synthetic control run.
#[derive(Debug, Clone, PartialEq)]
pub struct StudySpec {
    pub treated: UnitId,
    pub donors: Vec<UnitId>,
    /// Number of pre-intervention days (T0).
    pub pre_len: usize,
    /// Training window length.
    pub t_fit: usize,
    pub v_mode: VMode,
    pub reg: Regularization,
    pub train_placement: TrainPlacement,
    /// Z-score predictors across units before fitting.
    pub standardize: bool,
    /// Threshold small weights and re-solve after the main fit.
    pub sparsify: bool,
    pub solver: SolverOptions,
    pub v_search: VSearchOptions,
}

impl StudySpec {
    pub fn new(treated: UnitId, donors: Vec<UnitId>, pre_len: usize) -> Self {
        StudySpec {
            treated,
            donors,
            pre_len,
            t_fit: 10,
            v_mode: VMode::Optimized,
            reg: Regularization::default(),
            train_placement: TrainPlacement::Tail,
            standardize: true,
            sparsify: false,
            solver: SolverOptions::default(),
            v_search: VSearchOptions::default(),
        }
    }

    /// Pre-period length for an intervention starting on `t0`.
    pub fn pre_len_for(panel: &Panel, t0: NaiveDate) -> Result<usize> {
        panel
            .date_index(t0)
            .ok_or_else(|| Error::InvalidStudy(format!("t0 {t0} is outside the panel dates")))
    }

    pub fn validate(&self, panel: &Panel) -> Result<()> {
        if self.donors.is_empty() {
            return Err(Error::InvalidStudy("donor list is empty".into()));
        }
        if self.donors.contains(&self.treated) {
            return Err(Error::InvalidStudy(format!("treated unit {} is among the donors", self.treated)));
        }
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.donors {
            if !seen.insert(d) {
                return Err(Error::InvalidStudy(format!("donor {d} is listed twice")));
            }
            panel.index_of(d).ok_or_else(|| Error::UnknownUnit(d.to_string()))?;
        }
        panel.index_of(&self.treated).ok_or_else(|| Error::UnknownUnit(self.treated.to_string()))?;
        if self.pre_len > panel.n_days() {
            return Err(Error::InvalidStudy(format!(
                "pre-period of {} days exceeds the {} panel days",
                self.pre_len,
                panel.n_days()
            )));
        }
        if self.t_fit == 0 || self.t_fit >= self.pre_len {
            return Err(Error::InvalidSplit { t_fit: self.t_fit, pre_len: self.pre_len });
        }
        self.reg.validate()?;
        self.solver.validate()
    }
}

/// Splits `0..pre_len` into (training, validation) windows.
pub fn split_pre_period(pre_len: usize, t_fit: usize, placement: TrainPlacement) -> Result<(Range<usize>, Range<usize>)> {
    if t_fit == 0 || t_fit >= pre_len {
        return Err(Error::InvalidSplit { t_fit, pre_len });
    }
    Ok(match placement {
        TrainPlacement::Head => (0..t_fit, t_fit..pre_len),
        TrainPlacement::Tail => (pre_len - t_fit..pre_len, 0..pre_len - t_fit),
    })
}

/// Sum of squared prediction errors over `window`.
pub fn mspe(actual: &[f64], synthetic: &[f64], window: Range<usize>) -> Result<f64> {
    if window.is_empty() {
        return Err(Error::EmptyWindow);
    }
    if window.end > actual.len() || window.end > synthetic.len() {
        return Err(Error::DimensionMismatch(format!(
            "window ends at {} but series have {} and {} points",
            window.end,
            actual.len(),
            synthetic.len()
        )));
    }
    Ok(window.map(|t| (actual[t] - synthetic[t]).powi(2)).sum())
}

/// V proportional to the inverse cross-unit variance of each predictor row,
/// normalized to sum 1. `x_all` is predictors × units.
pub fn inverse_variance_v(x_all: &DMatrix<f64>, names: &[String]) -> Result<Vec<f64>> {
    let n = x_all.ncols();
    if n < 2 {
        return Err(Error::TooFewUnits { needed: 2, got: n });
    }
    let raw = (0..x_all.nrows())
        .map(|h| {
            let row = x_all.row(h);
            let mean = row.mean();
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            if var > 0.0 && var.is_finite() {
                Ok(1.0 / var)
            } else {
                Err(Error::ZeroVariancePredictor(names.get(h).cloned().unwrap_or_else(|| format!("#{h}"))))
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|r| r / total).collect())
}

fn normalize_v(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::InvalidParameter("importance weights must be finite and >= 0".into()));
    }
    let total: f64 = v.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidParameter("importance weights sum to zero".into()));
    }
    Ok(v.iter().map(|x| x / total).collect())
}

fn softmax(theta: &[f64]) -> Vec<f64> {
    let m = theta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = theta.iter().map(|t| (t - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Everything a fit needs, extracted from the panel and predictor table.
#[derive(Debug, Clone)]
pub struct StudyData {
    pub treated: UnitId,
    pub donors: Vec<UnitId>,
    pub dates: Vec<NaiveDate>,
    pub predictor_names: Vec<String>,
    /// Treated outcome series (length T).
    pub y_treated: Vec<f64>,
    /// Donor outcome series, one row per donor.
    pub y_donors: Vec<Vec<f64>>,
    /// Treated predictor vector (k), after optional standardization.
    pub x_treated: Vec<f64>,
    /// Donor predictor matrix (k × J), after optional standardization.
    pub x_donors: DMatrix<f64>,
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub pre_len: usize,
    pub donor_keys: Vec<u64>,
}

impl StudyData {
    /// `x` over treated and donors (k × (1 + J)).
    pub fn x_all(&self) -> DMatrix<f64> {
        let k = self.x_treated.len();
        DMatrix::from_fn(k, 1 + self.donors.len(), |h, j| {
            if j == 0 {
                self.x_treated[h]
            } else {
                self.x_donors[(h, j - 1)]
            }
        })
    }

    pub fn synthetic(&self, w: &[f64]) -> Vec<f64> {
        (0..self.y_treated.len())
            .map(|t| w.iter().zip(&self.y_donors).map(|(wj, y)| wj * y[t]).sum())
            .collect()
    }

    fn solve(&self, v: &[f64], reg: &Regularization, opts: &SolverOptions) -> Result<WeightSolution> {
        solve_w_keyed(&self.x_treated, &self.x_donors, v, reg, opts, &self.donor_keys)
    }

    fn validation_mspe(&self, w: &[f64]) -> f64 {
        let synth = self.synthetic(w);
        mspe(&self.y_treated, &synth, self.validation.clone()).unwrap_or(f64::INFINITY)
    }
}

/// Extracts outcome series and builds the (optionally standardized) predictor matrix:
/// every predictor column of `predictors` plus the training-window outcome mean.
pub fn prepare_study(spec: &StudySpec, panel: &Panel, predictors: &PredictorTable) -> Result<StudyData> {
    spec.validate(panel)?;
    let (train, validation) = split_pre_period(spec.pre_len, spec.t_fit, spec.train_placement)?;
    let y_treated = panel.dense_series(&spec.treated)?;
    let y_donors = spec.donors.iter().map(|d| panel.dense_series(d)).collect::<Result<Vec<_>>>()?;

    let mut names: Vec<String> = predictors.names().to_vec();
    names.push(OUTCOME_MEAN_PREDICTOR.to_string());
    let k = names.len();
    let units: Vec<&UnitId> = std::iter::once(&spec.treated).chain(&spec.donors).collect();
    let mut x = DMatrix::zeros(k, units.len());
    for (j, (unit, series)) in units.iter().zip(std::iter::once(&y_treated).chain(&y_donors)).enumerate() {
        let row = predictors.row(unit)?;
        for (h, value) in row.iter().enumerate() {
            x[(h, j)] = *value;
        }
        x[(k - 1, j)] = series[train.clone()].iter().sum::<f64>() / train.len() as f64;
    }
    if spec.standardize {
        let n = units.len() as f64;
        for h in 0..k {
            let mean = x.row(h).mean();
            let sd = (x.row(h).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            for j in 0..units.len() {
                x[(h, j)] = if sd > 0.0 { (x[(h, j)] - mean) / sd } else { 0.0 };
            }
        }
    }
    let x_treated: Vec<f64> = x.column(0).iter().copied().collect();
    let x_donors = x.columns(1, spec.donors.len()).into_owned();
    Ok(StudyData {
        treated: spec.treated.clone(),
        donors: spec.donors.clone(),
        dates: panel.dates().to_vec(),
        predictor_names: names,
        y_treated,
        y_donors,
        x_treated,
        x_donors,
        train,
        validation,
        pre_len: spec.pre_len,
        donor_keys: spec.donors.iter().map(UnitId::stable_hash).collect(),
    })
}

/// Importance weights per `spec.v_mode`, normalized to sum 1.
pub fn solve_v(spec: &StudySpec, panel: &Panel, predictors: &PredictorTable) -> Result<Vec<f64>> {
    let data = prepare_study(spec, panel, predictors)?;
    solve_v_prepared(spec, &data)
}

fn solve_v_prepared(spec: &StudySpec, data: &StudyData) -> Result<Vec<f64>> {
    let k = data.x_treated.len();
    match &spec.v_mode {
        VMode::Fixed(v) => {
            if v.len() != k {
                return Err(Error::DimensionMismatch(format!(
                    "fixed V has {} entries for {k} predictors",
                    v.len()
                )));
            }
            normalize_v(v)
        }
        VMode::InverseVariance => inverse_variance_v(&data.x_all(), &data.predictor_names),
        VMode::Optimized if k == 1 => Ok(vec![1.0]),
        VMode::Optimized => search_v(spec, data),
    }
}

fn search_v(spec: &StudySpec, data: &StudyData) -> Result<Vec<f64>> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    let k = data.x_treated.len();
    let inner = SolverOptions { restarts: spec.v_search.inner_restarts.max(1), ..spec.solver.clone() };
    // Nearby V give nearby W, so each inner solve starts from the W of the best
    // evaluation so far. The search is sequential, which keeps this deterministic.
    let mut warm: Option<(f64, Vec<f64>)> = None;
    let eval = |theta: &[f64]| -> f64 {
        let v = softmax(theta);
        let sol = match &warm {
            Some((_, w)) => solve_w_warm(&data.x_treated, &data.x_donors, &v, &spec.reg, &inner, w),
            None => data.solve(&v, &spec.reg, &inner),
        };
        match sol {
            Ok(sol) => {
                let m = data.validation_mspe(sol.w.as_slice());
                if warm.as_ref().map_or(true, |(best, _)| m < *best) {
                    warm = Some((m, sol.w.into_vec()));
                }
                m
            }
            Err(_) => f64::INFINITY,
        }
    };

    let mut starts = vec![vec![0.0; k]];
    if let Ok(iv) = inverse_variance_v(&data.x_all(), &data.predictor_names) {
        starts.push(iv.iter().map(|x| x.ln()).collect());
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.solver.seed ^ 0x5eed_0f_5e4c_u64);
    for _ in 0..spec.v_search.random_starts {
        starts.push((0..k).map(|_| StandardNormal.sample(&mut rng)).collect());
    }
    let opts = NelderMeadOptions {
        max_evals: spec.v_search.max_evals,
        f_tol: 0.0,
        x_tol: 1e-8,
        stall_window: Some(spec.v_search.stall_window),
        stall_tol: spec.v_search.stall_tol,
        initial_step: 1.0,
    };
    let best = multistart(eval, &starts, &opts)
        .filter(|r| r.f.is_finite())
        .ok_or_else(|| Error::NonConvergence("no importance weights gave a finite validation MSPE".into()))?;
    Ok(softmax(&best.x))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthResult {
    pub treated: UnitId,
    pub donors: Vec<UnitId>,
    pub dates: Vec<NaiveDate>,
    pub predictor_names: Vec<String>,
    pub w_star: WeightVector,
    pub v_star: Vec<f64>,
    /// Value of the weight objective at `w_star`.
    pub objective: f64,
    pub actual: Vec<f64>,
    pub synthetic: Vec<f64>,
    pub gap: Vec<f64>,
    pub pre_len: usize,
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub pre_mspe: f64,
    pub train_mspe: f64,
    pub validation_mspe: f64,
    pub converged: bool,
}

/// Runs the full procedure for one treated unit.
pub fn fit_synth(spec: &StudySpec, panel: &Panel, predictors: &PredictorTable) -> Result<SynthResult> {
    let data = prepare_study(spec, panel, predictors)?;
    fit_prepared(spec, &data)
}

pub fn fit_prepared(spec: &StudySpec, data: &StudyData) -> Result<SynthResult> {
    let v_star = solve_v_prepared(spec, data)?;
    let mut best = (v_star.clone(), data.solve(&v_star, &spec.reg, &spec.solver)?);
    if spec.v_mode == VMode::Optimized && v_star.len() > 1 {
        // The search ran with a cheaper inner solver; make sure the final choice
        // is no worse than the reference weightings under the full solver.
        let k = v_star.len();
        let mut candidates = vec![vec![1.0 / k as f64; k]];
        if let Ok(iv) = inverse_variance_v(&data.x_all(), &data.predictor_names) {
            candidates.push(iv);
        }
        let mut best_mspe = data.validation_mspe(best.1.w.as_slice());
        for v in candidates {
            let sol = data.solve(&v, &spec.reg, &spec.solver)?;
            let m = data.validation_mspe(sol.w.as_slice());
            if m < best_mspe {
                best_mspe = m;
                best = (v, sol);
            }
        }
    }
    let (v_star, mut solution) = best;
    if spec.sparsify {
        solution = sparsify_and_resolve(
            &solution.w,
            &data.x_treated,
            &data.x_donors,
            &v_star,
            &spec.reg,
            &spec.solver,
        )?;
    }
    let synthetic = data.synthetic(solution.w.as_slice());
    let gap: Vec<f64> = data.y_treated.iter().zip(&synthetic).map(|(a, s)| a - s).collect();
    Ok(SynthResult {
        treated: data.treated.clone(),
        donors: data.donors.clone(),
        dates: data.dates.clone(),
        predictor_names: data.predictor_names.clone(),
        objective: solution.objective,
        converged: solution.converged,
        w_star: solution.w,
        v_star,
        pre_mspe: mspe(&data.y_treated, &synthetic, 0..data.pre_len)?,
        train_mspe: mspe(&data.y_treated, &synthetic, data.train.clone())?,
        validation_mspe: mspe(&data.y_treated, &synthetic, data.validation.clone())?,
        actual: data.y_treated.clone(),
        synthetic,
        gap,
        pre_len: data.pre_len,
        train: data.train.clone(),
        validation: data.validation.clone(),
    })
}
