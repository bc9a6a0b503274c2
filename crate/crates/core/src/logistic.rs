//! Logistic growth curves for vaccination-rate series, their K/ν quadrant
//! classes, and the association of K and ν with vulnerability indices.
//!
//! The curve with ceiling `K`, velocity `nu` and initial rate `p0` is
//!
//! ```text
//! p(t) = K p0 exp(nu t) / (K + p0 (exp(nu t) - 1))
//! ```

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::optim::{multistart, NelderMeadOptions};
use crate::panel::UnitId;

/// Upper bound on the fitted ceiling, in percent.
pub const K_UPPER: f64 = 120.0;
/// Velocities below this are reported as unidentifiable dynamics.
pub const NU_FLAT: f64 = 1e-6;
pub const MIN_POINTS: usize = 10;

pub fn logistic_predict(k: f64, nu: f64, p0: f64, t: f64) -> f64 {
    let x = nu * t;
    if x > 0.0 {
        // Divide through by exp(x) so large arguments do not overflow.
        let e = (-x).exp();
        k * p0 / (k * e + p0 * (1.0 - e))
    } else {
        let e = x.exp();
        k * p0 * e / (k + p0 * (e - 1.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub k: f64,
    pub nu: f64,
    pub p0: f64,
    /// Residual sum of squares.
    pub sse: f64,
    /// False when the series carries no growth (ν ≈ 0), leaving K undetermined.
    pub identifiable: bool,
}

impl LogisticFit {
    pub fn predict(&self, t: f64) -> f64 {
        logistic_predict(self.k, self.nu, self.p0, t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticOptions {
    pub seed: u64,
    /// Random starts besides the data-driven initial guess.
    pub random_starts: usize,
    pub max_evals: usize,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        LogisticOptions { seed: 42, random_starts: 4, max_evals: 6000 }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

/// Maps unconstrained coordinates to (K, ν, p0) with K in (max, K_UPPER], ν > 0, 0 < p0 ≤ K.
struct Params {
    floor: f64,
}

impl Params {
    fn decode(&self, x: &[f64]) -> (f64, f64, f64) {
        let k = self.floor + (K_UPPER - self.floor) * sigmoid(x[0]);
        let nu = x[1].exp();
        let p0 = k * sigmoid(x[2]);
        (k, nu, p0)
    }

    fn encode(&self, k: f64, nu: f64, p0: f64) -> Vec<f64> {
        let k = k.clamp(self.floor + 1e-9, K_UPPER);
        vec![logit((k - self.floor) / (K_UPPER - self.floor)), nu.max(1e-12).ln(), logit(p0 / k)]
    }
}

fn sse(series: &[f64], k: f64, nu: f64, p0: f64) -> f64 {
    series.iter().enumerate().map(|(t, y)| (logistic_predict(k, nu, p0, t as f64) - y).powi(2)).sum()
}

/// Data-driven starting point: ceiling slightly above the maximum, velocity from
/// the slope of the logit-linearized series, initial rate from the first positive value.
fn initial_guess(series: &[f64], max: f64) -> (f64, f64, f64) {
    let k = (max * 1.05).min(K_UPPER);
    let p0 = series.iter().copied().find(|&y| y > 0.0).unwrap_or(max * 0.01).min(k * 0.99);
    let pts: Vec<(f64, f64)> = series
        .iter()
        .enumerate()
        .filter(|(_, &y)| y > 0.0 && y < k)
        .map(|(t, &y)| (t as f64, (y / (k - y)).ln()))
        .collect();
    let nu = if pts.len() >= 2 {
        let n = pts.len() as f64;
        let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
        if sxx > 0.0 {
            (sxy / sxx).max(1e-4)
        } else {
            1e-2
        }
    } else {
        1e-2
    };
    (k, nu, p0)
}

/// Least-squares fit of the logistic curve to a daily rate series (day 0 = first point).
pub fn fit_logistic(series: &[f64], opts: &LogisticOptions) -> Result<LogisticFit> {
    if series.len() < MIN_POINTS {
        return Err(Error::DegenerateSeries(format!(
            "{} points, at least {MIN_POINTS} are required",
            series.len()
        )));
    }
    if series.iter().any(|y| !y.is_finite() || *y < 0.0) {
        return Err(Error::DegenerateSeries("values must be finite and non-negative".into()));
    }
    let max = series.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = series.iter().cloned().fold(f64::INFINITY, f64::min);
    if max <= 0.0 {
        return Err(Error::DegenerateSeries("series is identically zero".into()));
    }
    if max >= K_UPPER {
        return Err(Error::DegenerateSeries(format!("maximum {max} is not below the ceiling bound {K_UPPER}")));
    }
    if max - min <= 1e-12 * max {
        // No growth: any ceiling above the level fits equally well.
        return Ok(LogisticFit { k: max, nu: 0.0, p0: max, sse: 0.0, identifiable: false });
    }

    let params = Params { floor: max };
    let (k0, nu0, p00) = initial_guess(series, max);
    let mut starts = vec![params.encode(k0, nu0, p00)];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.random_starts {
        let jitter = |rng: &mut ChaCha8Rng, s: f64| -> f64 {
            let z: f64 = StandardNormal.sample(rng);
            (z * s).exp()
        };
        let k = max + (K_UPPER - max) * sigmoid(logit((k0 - max) / (K_UPPER - max)) + {
            let z: f64 = StandardNormal.sample(&mut rng);
            2.0 * z
        });
        let nu = nu0 * jitter(&mut rng, 0.7);
        let p0 = (p00 * jitter(&mut rng, 0.7)).min(k * 0.999);
        starts.push(params.encode(k, nu, p0));
    }

    let scale = series.iter().map(|y| y * y).sum::<f64>().max(1e-300);
    let objective = |x: &[f64]| {
        let (k, nu, p0) = params.decode(x);
        sse(series, k, nu, p0) / scale
    };
    let nm = NelderMeadOptions {
        max_evals: opts.max_evals,
        f_tol: 1e-22,
        x_tol: 1e-12,
        stall_window: None,
        stall_tol: 0.0,
        initial_step: 0.5,
    };
    let best = multistart(objective, &starts, &nm)
        .filter(|r| r.f.is_finite())
        .ok_or_else(|| Error::NonConvergence("logistic fit produced no finite residual".into()))?;
    let (k, nu, p0) = params.decode(&best.x);
    Ok(LogisticFit { k, nu, p0, sse: sse(series, k, nu, p0), identifiable: nu >= NU_FLAT })
}

/// Fits every unit concurrently; each unit's randomness is keyed by its id.
pub fn fit_many(
    series: &BTreeMap<UnitId, Vec<f64>>,
    opts: &LogisticOptions,
    parallelism: usize,
) -> Result<BTreeMap<UnitId, Result<LogisticFit>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("cannot start worker pool: {e}")))?;
    let items: Vec<(&UnitId, &Vec<f64>)> = series.iter().collect();
    let fits: Vec<(UnitId, Result<LogisticFit>)> = pool.install(|| {
        items
            .par_iter()
            .map(|(unit, s)| {
                let o = LogisticOptions { seed: opts.seed ^ unit.stable_hash(), ..opts.clone() };
                ((*unit).clone(), fit_logistic(s, &o))
            })
            .collect()
    });
    Ok(fits.into_iter().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Quadrant {
    HiKHiV,
    HiKLoV,
    LoKHiV,
    LoKLoV,
}

impl Quadrant {
    pub fn as_str(self) -> &'static str {
        match self {
            Quadrant::HiKHiV => "HiK_HiV",
            Quadrant::HiKLoV => "HiK_LoV",
            Quadrant::LoKHiV => "LoK_HiV",
            Quadrant::LoKLoV => "LoK_LoV",
        }
    }
}

/// Splits units at the cross-unit means of K and ν; values equal to a mean count as high.
pub fn classify_quadrant(fits: &BTreeMap<UnitId, LogisticFit>) -> Result<BTreeMap<UnitId, Quadrant>> {
    if fits.len() < 2 {
        return Err(Error::TooFewUnits { needed: 2, got: fits.len() });
    }
    let n = fits.len() as f64;
    let mean_k = fits.values().map(|f| f.k).sum::<f64>() / n;
    let mean_nu = fits.values().map(|f| f.nu).sum::<f64>() / n;
    Ok(fits
        .iter()
        .map(|(u, f)| {
            let q = match (f.k >= mean_k, f.nu >= mean_nu) {
                (true, true) => Quadrant::HiKHiV,
                (true, false) => Quadrant::HiKLoV,
                (false, true) => Quadrant::LoKHiV,
                (false, false) => Quadrant::LoKLoV,
            };
            (u.clone(), q)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionLine {
    pub slope: f64,
    pub intercept: f64,
    /// Pearson correlation.
    pub corr: f64,
}

/// Ordinary least squares of `param` on `theme`, with the Pearson correlation.
pub fn theme_regression(theme: &[f64], param: &[f64]) -> Result<RegressionLine> {
    if theme.len() != param.len() {
        return Err(Error::DimensionMismatch(format!("{} theme values, {} parameters", theme.len(), param.len())));
    }
    let n = theme.len();
    if n < 3 {
        return Err(Error::TooFewUnits { needed: 3, got: n });
    }
    let nf = n as f64;
    let mx = theme.iter().sum::<f64>() / nf;
    let my = param.iter().sum::<f64>() / nf;
    let sxx: f64 = theme.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = param.iter().map(|y| (y - my).powi(2)).sum();
    let sxy: f64 = theme.iter().zip(param).map(|(x, y)| (x - mx) * (y - my)).sum();
    if !(sxx > 0.0) {
        return Err(Error::ZeroVariance("theme index".into()));
    }
    if !(syy > 0.0) {
        return Err(Error::ZeroVariance("parameter".into()));
    }
    let slope = sxy / sxx;
    let corr = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    Ok(RegressionLine { slope, intercept: my - slope * mx, corr })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinSummary {
    /// 1-based bin number, lowest index values first.
    pub bin: usize,
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

/// Bin sizes for `n` units over `bins` equal-count bins, remainder to the lowest bins.
pub fn bin_sizes(n: usize, bins: usize) -> Vec<usize> {
    (0..bins).map(|b| n / bins + usize::from(b < n % bins)).collect()
}

/// Ranks units by `index`, splits them into `bins` equal-count bins and
/// summarizes `param` in each.
pub fn decile_summary(param: &[f64], index: &[f64], bins: usize) -> Result<Vec<BinSummary>> {
    if param.len() != index.len() {
        return Err(Error::DimensionMismatch(format!("{} parameters, {} index values", param.len(), index.len())));
    }
    if bins == 0 {
        return Err(Error::InvalidParameter("bins must be >= 1".into()));
    }
    if param.len() < bins {
        return Err(Error::TooFewUnits { needed: bins, got: param.len() });
    }
    let mut order: Vec<usize> = (0..index.len()).collect();
    order.sort_by(|&a, &b| index[a].total_cmp(&index[b]));
    let mut start = 0;
    Ok(bin_sizes(order.len(), bins)
        .into_iter()
        .enumerate()
        .map(|(b, size)| {
            let members = &order[start..start + size];
            start += size;
            let vals: Vec<f64> = members.iter().map(|&i| param[i]).collect();
            let mean = vals.iter().sum::<f64>() / size as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / size as f64;
            BinSummary { bin: b + 1, count: size, mean, std: var.sqrt() }
        })
        .collect())
}
