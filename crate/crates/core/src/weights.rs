//! Inner problem of the synthetic control: donor weights minimizing the
//! importance-weighted predictor discrepancy plus an elastic-net penalty.
//!
//! The objective for weights `w` is
//!
//! ```text
//! f(w) = sqrt( sum_h v_h (x1_h - sum_j w_j x0_hj)^2 ) + l1 * |w|_2 + l2 * |w|_1
//! ```
//!
//! Note the naming: `l1` multiplies the Euclidean norm and `l2` the 1-norm.
//! On the simplex `|w|_1 == 1`, so `l2` only shifts the objective by a constant.
//!
//! Minimization is projected gradient descent with Armijo backtracking and
//! Barzilai–Borwein trial steps, restarted from seeded Dirichlet(1, …, 1) draws.
//! When the penalty is inert the best point is polished by solving the
//! equality-constrained least-squares problem on its support.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{Error, Result};

/// Donor weights. On the unit simplex unless produced in penalized mode.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub const SUM_TOL: f64 = 1e-8;
    pub const NEG_TOL: f64 = -1e-10;

    /// Validates a point on the simplex and clips tiny negatives to zero.
    pub fn simplex(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::InvalidParameter("empty weight vector".into()));
        }
        if let Some(bad) = raw.iter().find(|w| !(**w >= Self::NEG_TOL)) {
            return Err(Error::InvalidParameter(format!("negative weight {bad}")));
        }
        let sum: f64 = raw.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOL {
            return Err(Error::InvalidParameter(format!("weights sum to {sum}, not 1")));
        }
        Ok(WeightVector(raw.into_iter().map(|w| w.max(0.0)).collect()))
    }

    fn nonnegative(raw: Vec<f64>) -> Self {
        WeightVector(raw.into_iter().map(|w| w.max(0.0)).collect())
    }

    pub fn uniform(n: usize) -> Self {
        WeightVector(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Elastic-net coefficients: `l1` scales the 2-norm, `l2` the 1-norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regularization {
    pub l1: f64,
    pub l2: f64,
}

impl Default for Regularization {
    fn default() -> Self {
        Regularization { l1: 0.6, l2: 0.1 }
    }
}

impl Regularization {
    pub const NONE: Regularization = Regularization { l1: 0.0, l2: 0.0 };

    pub fn validate(&self) -> Result<()> {
        for (name, c) in [("l1", self.l1), ("l2", self.l2)] {
            if !(c.is_finite() && c >= 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be finite and >= 0, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConstraintMode {
    /// `w >= 0`, `sum(w) == 1`.
    #[default]
    Simplex,
    /// `w >= 0` with the sum left free; the penalty terms do the shrinking.
    Penalized,
}

impl std::str::FromStr for ConstraintMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simplex" => Ok(ConstraintMode::Simplex),
            "penalized" => Ok(ConstraintMode::Penalized),
            _ => Err(Error::InvalidParameter(format!("unknown constraint mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub max_iters: usize,
    /// Relative objective decrease below which a descent run stops.
    pub tol: f64,
    pub restarts: usize,
    pub constraint_mode: ConstraintMode,
    pub seed: u64,
    /// Keep the sequence of accepted objective values of the winning run.
    pub record_trace: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iters: 2000,
            tol: 1e-9,
            restarts: 8,
            constraint_mode: ConstraintMode::Simplex,
            seed: 42,
            record_trace: false,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter("tol must be > 0".into()));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidParameter("restarts must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSolution {
    pub w: WeightVector,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Accepted objective values of the winning run (only with `record_trace`).
    pub trace: Vec<f64>,
}

/// Inputs of one weight problem: treated predictors `x1` (k), donor predictors
/// `x0` (k × J) and importance weights `v` (k).
#[derive(Debug, Clone, Copy)]
pub struct WeightProblem<'a> {
    pub x1: &'a [f64],
    pub x0: &'a DMatrix<f64>,
    pub v: &'a [f64],
}

impl<'a> WeightProblem<'a> {
    pub fn new(x1: &'a [f64], x0: &'a DMatrix<f64>, v: &'a [f64]) -> Result<Self> {
        let (k, j) = x0.shape();
        if j == 0 {
            return Err(Error::DimensionMismatch("no donors".into()));
        }
        if x1.len() != k || v.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "x1 has {} rows, v has {}, x0 is {k}x{j}",
                x1.len(),
                v.len()
            )));
        }
        if let Some(bad) = v.iter().find(|h| !(**h >= 0.0 && h.is_finite())) {
            return Err(Error::InvalidParameter(format!("importance weight {bad} is not >= 0")));
        }
        Ok(WeightProblem { x1, x0, v })
    }

    pub fn n_donors(&self) -> usize {
        self.x0.ncols()
    }

    fn residual(&self, w: &[f64]) -> DVector<f64> {
        let wv = DVector::from_column_slice(w);
        DVector::from_column_slice(self.x1) - self.x0 * wv
    }

    fn fit_term(&self, residual: &DVector<f64>) -> f64 {
        residual.iter().zip(self.v).map(|(r, v)| v * r * r).sum::<f64>().sqrt()
    }

    pub fn objective(&self, w: &[f64], reg: &Regularization) -> f64 {
        let fit = self.fit_term(&self.residual(w));
        let norm2 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let norm1 = w.iter().map(|x| x.abs()).sum::<f64>();
        fit + reg.l1 * norm2 + reg.l2 * norm1
    }

    /// Objective and gradient of the smoothed objective at a non-negative point.
    /// Both norms become `sqrt(|x|^2 + eps^2)`; `eps == 0` gives the exact objective
    /// with the zero subgradient at the kinks.
    fn smoothed(&self, w: &[f64], reg: &Regularization, eps: f64) -> (f64, Vec<f64>) {
        let r = self.residual(w);
        let fit = self.fit_term(&r).hypot(eps);
        let mut grad = vec![0.0; w.len()];
        if fit > 0.0 {
            let weighted = DVector::from_iterator(r.len(), r.iter().zip(self.v).map(|(r, v)| v * r));
            let g = self.x0.tr_mul(&weighted);
            for (gj, x) in grad.iter_mut().zip(g.iter()) {
                *gj = -x / fit;
            }
        }
        let norm2 = w.iter().map(|x| x * x).sum::<f64>().sqrt().hypot(eps);
        if reg.l1 > 0.0 && norm2 > 0.0 {
            for (gj, x) in grad.iter_mut().zip(w) {
                *gj += reg.l1 * x / norm2;
            }
        }
        if reg.l2 > 0.0 {
            for gj in grad.iter_mut() {
                *gj += reg.l2;
            }
        }
        let norm1 = w.iter().map(|x| x.abs()).sum::<f64>();
        (fit + reg.l1 * norm2 + reg.l2 * norm1, grad)
    }

    /// Restriction to a subset of donor columns.
    fn columns(&self, keep: &[usize]) -> DMatrix<f64> {
        self.x0.select_columns(keep)
    }
}

/// Euclidean projection onto the unit simplex (sorting method).
pub fn project_simplex(x: &[f64]) -> Vec<f64> {
    let mut u: Vec<f64> = x.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cumsum += ui;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    let mut w: Vec<f64> = x.iter().map(|xi| (xi - theta).max(0.0)).collect();
    let s: f64 = w.iter().sum();
    if s > 0.0 {
        w.iter_mut().for_each(|wi| *wi /= s);
    }
    w
}

fn project(x: &[f64], mode: ConstraintMode) -> Vec<f64> {
    match mode {
        ConstraintMode::Simplex => project_simplex(x),
        ConstraintMode::Penalized => x.iter().map(|v| v.max(0.0)).collect(),
    }
}

/// Objective value; see the module docs for the formula.
pub fn objective(
    w: &WeightVector,
    x1: &[f64],
    x0: &DMatrix<f64>,
    v: &[f64],
    reg: &Regularization,
) -> Result<f64> {
    let p = WeightProblem::new(x1, x0, v)?;
    if w.len() != p.n_donors() {
        return Err(Error::DimensionMismatch(format!("{} weights for {} donors", w.len(), p.n_donors())));
    }
    Ok(p.objective(w.as_slice(), reg))
}

struct Descent {
    w: Vec<f64>,
    f: f64,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
}

const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;
const QUIET_STEPS: usize = 10;

/// Relative smoothing levels, finishing on the exact objective.
const SMOOTHING: [f64; 6] = [1e-2, 1e-4, 1e-6, 1e-8, 1e-10, 0.0];
/// First smoothing level used by warm starts.
const WARM_STAGE: usize = 2;

/// Projected gradient descent from `start`. The fit term is a norm, so it has a
/// kink wherever the fit is exact; each stage descends a smoothed objective and
/// hands its point to the next, sharper stage. Steps are accepted only if the
/// exact objective does not increase.
fn descend(p: &WeightProblem<'_>, reg: &Regularization, start: Vec<f64>, opts: &SolverOptions) -> Descent {
    descend_from_stage(p, reg, start, opts, 0)
}

/// Descent that skips the first `first_stage` smoothing levels.
fn descend_from_stage(
    p: &WeightProblem<'_>,
    reg: &Regularization,
    start: Vec<f64>,
    opts: &SolverOptions,
    first_stage: usize,
) -> Descent {
    let mode = opts.constraint_mode;
    let mut w = project(&start, mode);
    let mut f = p.objective(&w, reg);
    let mut trace = if opts.record_trace { vec![f] } else { Vec::new() };
    let scale = f.max(f64::MIN_POSITIVE);
    let mut iterations = 0;
    let mut converged = false;

    for (stage, rel) in SMOOTHING.iter().enumerate().skip(first_stage) {
        // Smoothing only matters near the kink; once it perturbs the fit term by
        // a relative 1e-8 or less, go straight to the exact objective.
        let exact = *rel == 0.0 || p.fit_term(&p.residual(&w)) >= 1e4 * rel * scale;
        let eps = if exact { 0.0 } else { rel * scale };
        // Later stages may use whatever budget earlier ones left.
        let budget = if exact {
            opts.max_iters
        } else {
            iterations + (opts.max_iters - iterations) / (SMOOTHING.len() - stage)
        };
        let (mut fs, mut g) = p.smoothed(&w, reg, eps);
        let gnorm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut step = if gnorm > 0.0 { 1.0 / gnorm } else { 1.0 };
        let mut quiet = 0;
        converged = false;
        while iterations < budget {
            iterations += 1;
            let mut alpha = step;
            let mut accepted = None;
            for _ in 0..MAX_BACKTRACKS {
                let trial: Vec<f64> = w.iter().zip(&g).map(|(x, gx)| x - alpha * gx).collect();
                let cand = project(&trial, mode);
                if cand == w {
                    break;
                }
                let dir_dot: f64 = cand.iter().zip(&w).zip(&g).map(|((c, x), gx)| gx * (c - x)).sum();
                let (fsc, gc) = p.smoothed(&cand, reg, eps);
                if fsc <= fs + ARMIJO_C * dir_dot && fsc <= fs {
                    let fc = p.objective(&cand, reg);
                    if fc <= f {
                        accepted = Some((cand, fsc, gc, fc));
                        break;
                    }
                }
                alpha *= 0.5;
            }
            let Some((cand, fsc, gc, fc)) = accepted else {
                converged = true;
                break;
            };
            // Barzilai-Borwein trial step for the next iteration.
            let s: Vec<f64> = cand.iter().zip(&w).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = gc.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
            let ss: f64 = s.iter().map(|a| a * a).sum();
            step = if sy > 0.0 { (ss / sy).clamp(1e-12, 1e12) } else { (alpha * 2.0).min(1e12) };

            let decrease = fs - fsc;
            w = cand;
            fs = fsc;
            g = gc;
            f = fc;
            if opts.record_trace {
                trace.push(f);
            }
            // A single small step can come from a short BB trial, so require a run of them.
            quiet = if decrease <= opts.tol * fs.abs() { quiet + 1 } else { 0 };
            if f == 0.0 || quiet >= QUIET_STEPS {
                converged = true;
                break;
            }
        }
        if f == 0.0 || exact {
            break;
        }
    }
    Descent { w, f, iterations, converged, trace }
}

/// Exact minimizer of the quadratic fit term on the support of `w`, subject to
/// `sum(w) == 1`. Only meaningful when the penalty is inert.
fn polish_on_support(p: &WeightProblem<'_>, w: &[f64]) -> Option<Vec<f64>> {
    let support: Vec<usize> = (0..w.len()).filter(|&j| w[j] > 0.0).collect();
    let s = support.len();
    if s < 2 {
        return None;
    }
    let xs = p.columns(&support);
    let vdiag = DVector::from_column_slice(p.v);
    let weighted = DMatrix::from_fn(xs.nrows(), s, |i, j| xs[(i, j)] * vdiag[i]);
    let gram = xs.tr_mul(&weighted);
    let x1 = DVector::from_column_slice(p.x1);
    let rhs_top = weighted.tr_mul(&x1);
    let mut kkt = DMatrix::zeros(s + 1, s + 1);
    kkt.view_mut((0, 0), (s, s)).copy_from(&gram);
    for i in 0..s {
        kkt[(i, s)] = 1.0;
        kkt[(s, i)] = 1.0;
    }
    let mut rhs = DVector::zeros(s + 1);
    rhs.rows_mut(0, s).copy_from(&rhs_top);
    rhs[s] = 1.0;
    let sol = kkt.lu().solve(&rhs)?;
    if sol.iter().any(|x| !x.is_finite()) || sol.rows(0, s).iter().any(|&x| x < 0.0) {
        return None;
    }
    let mut out = vec![0.0; w.len()];
    for (k, &j) in support.iter().enumerate() {
        out[j] = sol[k];
    }
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= total);
    Some(out)
}

/// Least-norm point on (a face of) the support of `w` that fits the treated
/// predictors exactly with `sum(w) == 1`. Among exact fits it minimizes the
/// 2-norm penalty, which the smoothed descent only approaches slowly. Negative
/// coordinates are dropped one at a time, active-set style.
fn polish_exact_fit(p: &WeightProblem<'_>, w: &[f64]) -> Option<Vec<f64>> {
    let scale = 1.0 + p.x1.iter().zip(p.v).map(|(x, v)| v * x * x).sum::<f64>().sqrt();
    if p.fit_term(&p.residual(w)) > 1e-4 * scale {
        return None;
    }
    let mut support: Vec<usize> = (0..w.len()).filter(|&j| w[j] > 0.0).collect();
    while support.len() >= 2 {
        let xs = p.columns(&support);
        let (k, s) = xs.shape();
        let mut a = DMatrix::from_element(k + 1, s, 1.0);
        a.rows_mut(0, k).copy_from(&xs);
        let mut b = DVector::from_element(k + 1, 1.0);
        b.rows_mut(0, k).copy_from(&DVector::from_column_slice(p.x1));
        let sol = a.clone().pseudo_inverse(1e-12).ok()? * &b;
        if (&a * &sol - &b).norm() > 1e-9 * (1.0 + b.norm()) || sol.iter().any(|x| !x.is_finite()) {
            return None;
        }
        let (worst, min) = sol.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, &x)| if x < acc.1 { (i, x) } else { acc });
        if min >= 0.0 {
            let mut out = vec![0.0; w.len()];
            for (i, &j) in support.iter().enumerate() {
                out[j] = sol[i];
            }
            return Some(out);
        }
        support.remove(worst);
    }
    None
}

fn finish(
    p: &WeightProblem<'_>,
    reg: &Regularization,
    opts: &SolverOptions,
    mut run: Descent,
) -> Result<WeightSolution> {
    if !run.f.is_finite() {
        return Err(Error::NonConvergence("objective is not finite".into()));
    }
    let inert_penalty = reg.l1 == 0.0 && opts.constraint_mode == ConstraintMode::Simplex;
    if inert_penalty {
        if let Some(polished) = polish_on_support(p, &run.w) {
            let fp = p.objective(&polished, reg);
            if fp <= run.f {
                run.w = polished;
                run.f = fp;
                if opts.record_trace {
                    run.trace.push(fp);
                }
            }
        }
    }
    if opts.constraint_mode == ConstraintMode::Simplex && reg.l1 > 0.0 {
        if let Some(polished) = polish_exact_fit(p, &run.w) {
            let fp = p.objective(&polished, reg);
            if fp <= run.f {
                run.w = polished;
                run.f = fp;
                if opts.record_trace {
                    run.trace.push(fp);
                }
            }
        }
    }
    let w = match opts.constraint_mode {
        ConstraintMode::Simplex => {
            let total: f64 = run.w.iter().map(|x| x.max(0.0)).sum();
            WeightVector::simplex(run.w.iter().map(|x| x.max(0.0) / total).collect())?
        }
        ConstraintMode::Penalized => WeightVector::nonnegative(run.w),
    };
    let objective = p.objective(w.as_slice(), reg);
    Ok(WeightSolution { w, objective, iterations: run.iterations, converged: run.converged, trace: run.trace })
}

/// Dirichlet(1, …, 1) start where each coordinate is driven by its donor key,
/// so permuting donors permutes the start.
fn dirichlet_start(seed: u64, restart: usize, keys: &[u64]) -> Vec<f64> {
    let draws: Vec<f64> = keys
        .iter()
        .map(|&key| {
            let mix = seed
                ^ key.rotate_left(17)
                ^ (restart as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let mut rng = ChaCha8Rng::seed_from_u64(mix);
            let e: f64 = Exp1.sample(&mut rng);
            e
        })
        .collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|d| d / total).collect()
}

/// Minimizes the weight objective. Donor columns are keyed by index.
pub fn solve_w(
    x1: &[f64],
    x0: &DMatrix<f64>,
    v: &[f64],
    reg: &Regularization,
    opts: &SolverOptions,
) -> Result<WeightSolution> {
    let keys: Vec<u64> = (0..x0.ncols() as u64).collect();
    solve_w_keyed(x1, x0, v, reg, opts, &keys)
}

/// Like [`solve_w`], with per-donor keys feeding the random restarts.
pub fn solve_w_keyed(
    x1: &[f64],
    x0: &DMatrix<f64>,
    v: &[f64],
    reg: &Regularization,
    opts: &SolverOptions,
    donor_keys: &[u64],
) -> Result<WeightSolution> {
    reg.validate()?;
    opts.validate()?;
    let p = WeightProblem::new(x1, x0, v)?;
    if donor_keys.len() != p.n_donors() {
        return Err(Error::DimensionMismatch("one key per donor is required".into()));
    }
    if p.n_donors() == 1 && opts.constraint_mode == ConstraintMode::Simplex {
        let w = WeightVector::simplex(vec![1.0])?;
        let objective = p.objective(w.as_slice(), reg);
        let trace = if opts.record_trace { vec![objective] } else { Vec::new() };
        return Ok(WeightSolution { w, objective, iterations: 0, converged: true, trace });
    }
    let mut best: Option<Descent> = None;
    for r in 0..opts.restarts {
        let run = descend(&p, reg, dirichlet_start(opts.seed, r, donor_keys), opts);
        if !run.f.is_finite() {
            continue;
        }
        if best.as_ref().map_or(true, |b| run.f < b.f) {
            best = Some(run);
        }
    }
    let best = best.ok_or_else(|| Error::NonConvergence("no restart reached a finite objective".into()))?;
    finish(&p, reg, opts, best)
}

/// Single descent from a caller-supplied point, for re-solving a sequence of
/// nearby problems. The start is projected onto the feasible set first and,
/// being close to the answer already, skips the coarsest smoothing levels.
pub fn solve_w_warm(
    x1: &[f64],
    x0: &DMatrix<f64>,
    v: &[f64],
    reg: &Regularization,
    opts: &SolverOptions,
    start: &[f64],
) -> Result<WeightSolution> {
    reg.validate()?;
    opts.validate()?;
    let p = WeightProblem::new(x1, x0, v)?;
    if start.len() != p.n_donors() {
        return Err(Error::DimensionMismatch(format!("start has {} weights for {} donors", start.len(), p.n_donors())));
    }
    let run = descend_from_stage(&p, reg, start.to_vec(), opts, WARM_STAGE);
    if !run.f.is_finite() {
        return Err(Error::NonConvergence("objective is not finite".into()));
    }
    finish(&p, reg, opts, run)
}

/// Zeroes weights below half of the 5th largest weight and renormalizes the
/// survivors to the original mass. Returns the thresholded vector and the threshold.
/// Fewer than five donors pass through unchanged with a zero threshold.
pub fn sparsify_threshold(w: &[f64]) -> (Vec<f64>, f64) {
    if w.len() < 5 {
        return (w.to_vec(), 0.0);
    }
    let mut ranked: Vec<f64> = w.to_vec();
    // Stable descending order; ties keep their relative positions.
    ranked.sort_by(|a, b| b.total_cmp(a));
    let threshold = 0.5 * ranked[4];
    let mass: f64 = w.iter().sum();
    let mut out: Vec<f64> = w.iter().map(|&x| if x < threshold { 0.0 } else { x }).collect();
    let kept: f64 = out.iter().sum();
    if kept > 0.0 {
        out.iter_mut().for_each(|x| *x *= mass / kept);
    }
    (out, threshold)
}

/// Thresholds `w` (see [`sparsify_threshold`]) and re-optimizes over the
/// surviving donors starting from the renormalized point.
pub fn sparsify_and_resolve(
    w: &WeightVector,
    x1: &[f64],
    x0: &DMatrix<f64>,
    v: &[f64],
    reg: &Regularization,
    opts: &SolverOptions,
) -> Result<WeightSolution> {
    reg.validate()?;
    opts.validate()?;
    let p = WeightProblem::new(x1, x0, v)?;
    if w.len() != p.n_donors() {
        return Err(Error::DimensionMismatch(format!("{} weights for {} donors", w.len(), p.n_donors())));
    }
    let passthrough = || WeightSolution {
        w: w.clone(),
        objective: p.objective(w.as_slice(), reg),
        iterations: 0,
        converged: true,
        trace: Vec::new(),
    };
    if w.len() < 5 {
        return Ok(passthrough());
    }
    let (thresholded, _) = sparsify_threshold(w.as_slice());
    let survivors: Vec<usize> = (0..thresholded.len()).filter(|&j| thresholded[j] > 0.0).collect();
    if survivors.is_empty() || survivors.len() == w.len() {
        return Ok(passthrough());
    }
    let sub_x0 = p.columns(&survivors);
    let sub = WeightProblem::new(x1, &sub_x0, v)?;
    let start: Vec<f64> = survivors.iter().map(|&j| thresholded[j]).collect();
    let run = descend(&sub, reg, start, opts);
    let sol = finish(&sub, reg, opts, run)?;
    let mut full = vec![0.0; w.len()];
    for (k, &j) in survivors.iter().enumerate() {
        full[j] = sol.w.as_slice()[k];
    }
    let w = match opts.constraint_mode {
        ConstraintMode::Simplex => WeightVector::simplex(full)?,
        ConstraintMode::Penalized => WeightVector::nonnegative(full),
    };
    let objective = p.objective(w.as_slice(), reg);
    Ok(WeightSolution { w, objective, iterations: sol.iterations, converged: sol.converged, trace: sol.trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat(rows: &[&[f64]]) -> DMatrix<f64> {
        let k = rows.len();
        let j = rows[0].len();
        DMatrix::from_fn(k, j, |r, c| rows[r][c])
    }

    #[test]
    fn objective_examples() {
        let x0 = mat(&[&[1.0, -1.0]]);
        let w = WeightVector::simplex(vec![0.5, 0.5]).unwrap();
        let none = objective(&w, &[0.0], &x0, &[1.0], &Regularization::NONE).unwrap();
        assert_eq!(none, 0.0);
        let pen = objective(&w, &[0.0], &x0, &[1.0], &Regularization { l1: 1.0, l2: 1.0 }).unwrap();
        assert!((pen - (1.0 / 2f64.sqrt() + 1.0)).abs() < 1e-12);
        assert!((pen - 1.7071).abs() < 1e-4);
    }

    #[test]
    fn objective_dimension_checks() {
        let x0 = mat(&[&[1.0, -1.0]]);
        let w = WeightVector::simplex(vec![1.0]).unwrap();
        assert!(matches!(
            objective(&w, &[0.0], &x0, &[1.0], &Regularization::NONE),
            Err(Error::DimensionMismatch(_))
        ));
        let w2 = WeightVector::uniform(2);
        assert!(matches!(
            objective(&w2, &[0.0, 1.0], &x0, &[1.0], &Regularization::NONE),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn single_donor_is_trivial() {
        let x0 = mat(&[&[3.0], &[4.0]]);
        let s = solve_w(&[100.0, -7.0], &x0, &[0.5, 0.5], &Regularization::default(), &SolverOptions::default())
            .unwrap();
        assert_eq!(s.w.as_slice(), &[1.0]);
    }

    #[test]
    fn exact_vertex_is_found() {
        let x0 = mat(&[&[1.0, 4.0, 2.0], &[0.0, 3.0, 5.0], &[2.0, -1.0, 1.0]]);
        let x1 = [4.0, 3.0, -1.0];
        let s = solve_w(&x1, &x0, &[1.0, 1.0, 1.0], &Regularization::NONE, &SolverOptions::default()).unwrap();
        let w = s.w.as_slice();
        assert!((w[0]).abs() < 1e-6 && (w[1] - 1.0).abs() < 1e-6 && w[2].abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn projection_is_feasible_and_idempotent() {
        let p = project_simplex(&[0.3, -2.0, 5.0, 0.1]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&x| x >= 0.0));
        let q = project_simplex(&p);
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn threshold_step() {
        let w = [0.30, 0.25, 0.15, 0.10, 0.06, 0.05, 0.04, 0.03, 0.01, 0.01];
        let (out, thr) = sparsify_threshold(&w);
        assert!((thr - 0.03).abs() < 1e-15);
        assert_eq!(out[8], 0.0);
        assert_eq!(out[9], 0.0);
        for j in 0..8 {
            assert!((out[j] - w[j] / 0.98).abs() < 1e-12);
        }
    }

    #[test]
    fn sparsify_passthrough_cases() {
        let x0 = DMatrix::from_fn(2, 4, |i, j| (i * 4 + j) as f64);
        let w = WeightVector::uniform(4);
        let s = sparsify_and_resolve(&w, &[1.0, 2.0], &x0, &[1.0, 1.0], &Regularization::NONE, &SolverOptions::default())
            .unwrap();
        assert_eq!(s.w, w);

        let x0 = DMatrix::from_fn(2, 6, |i, j| (i * 6 + j) as f64);
        let one_hot = WeightVector::simplex(vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let s = sparsify_and_resolve(&one_hot, &[2.0, 8.0], &x0, &[1.0, 1.0], &Regularization::NONE, &SolverOptions::default())
            .unwrap();
        assert_eq!(s.w, one_hot);
    }

    #[test]
    fn sparsify_drops_small_weights_then_reoptimizes() {
        let x0 = DMatrix::from_fn(3, 10, |i, j| ((i + 1) * (j + 3)) as f64 % 7.0 + j as f64 * 0.1);
        let w = WeightVector::simplex(vec![0.30, 0.25, 0.15, 0.10, 0.06, 0.05, 0.04, 0.03, 0.01, 0.01]).unwrap();
        let x1: Vec<f64> = (0..3)
            .map(|i| (0..10).map(|j| x0[(i, j)] * w.as_slice()[j]).sum())
            .collect();
        let s = sparsify_and_resolve(&w, &x1, &x0, &[1.0; 3], &Regularization::NONE, &SolverOptions::default())
            .unwrap();
        assert_eq!(s.w.as_slice()[8], 0.0);
        assert_eq!(s.w.as_slice()[9], 0.0);
        assert!((s.w.sum() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn l2_term_is_inert_on_simplex() {
        let x0 = DMatrix::from_fn(3, 5, |i, j| ((i * 7 + j * 3) % 5) as f64 - 1.5);
        let x1 = [0.3, -0.2, 0.9];
        let v = [0.2, 0.5, 0.3];
        let opts = SolverOptions::default();
        let a = solve_w(&x1, &x0, &v, &Regularization { l1: 0.3, l2: 0.0 }, &opts).unwrap();
        let b = solve_w(&x1, &x0, &v, &Regularization { l1: 0.3, l2: 5.0 }, &opts).unwrap();
        for (x, y) in a.w.as_slice().iter().zip(b.w.as_slice()) {
            assert!((x - y).abs() < 1e-6, "{:?} vs {:?}", a.w, b.w);
        }
    }

    #[test]
    fn penalized_mode_shrinks_mass() {
        let x0 = mat(&[&[1.0, 2.0], &[2.0, 1.0]]);
        let opts = SolverOptions { constraint_mode: ConstraintMode::Penalized, ..Default::default() };
        let s = solve_w(&[1.5, 1.5], &x0, &[1.0, 1.0], &Regularization { l1: 0.0, l2: 5.0 }, &opts).unwrap();
        assert!(s.w.as_slice().iter().all(|&x| x >= 0.0));
        assert!(s.w.sum() < 1.0);
    }

    #[test]
    fn trace_is_monotone() {
        let x0 = DMatrix::from_fn(4, 6, |i, j| ((i * 5 + j * 11) % 9) as f64);
        let opts = SolverOptions { record_trace: true, ..Default::default() };
        let s = solve_w(&[3.0, 1.0, 4.0, 1.5], &x0, &[1.0; 4], &Regularization::default(), &opts).unwrap();
        assert!(s.trace.len() >= 2);
        assert!(s.trace.windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn rejects_bad_options() {
        let x0 = mat(&[&[1.0, 2.0]]);
        let bad = SolverOptions { tol: 0.0, ..Default::default() };
        assert!(solve_w(&[1.0], &x0, &[1.0], &Regularization::NONE, &bad).is_err());
        let neg = Regularization { l1: -1.0, l2: 0.0 };
        assert!(solve_w(&[1.0], &x0, &[1.0], &neg, &SolverOptions::default()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn permuting_donors_permutes_weights(
            data in prop::collection::vec(-5.0f64..5.0, 12),
            x1 in prop::collection::vec(-5.0f64..5.0, 3),
        ) {
            let x0 = DMatrix::from_column_slice(3, 4, &data);
            let keys = [11u64, 22, 33, 44];
            let opts = SolverOptions::default();
            let a = solve_w_keyed(&x1, &x0, &[1.0; 3], &Regularization::NONE, &opts, &keys).unwrap();
            let perm = [2usize, 0, 3, 1];
            let px0 = x0.select_columns(&perm);
            let pkeys: Vec<u64> = perm.iter().map(|&j| keys[j]).collect();
            let b = solve_w_keyed(&x1, &px0, &[1.0; 3], &Regularization::NONE, &opts, &pkeys).unwrap();
            prop_assert!((a.objective - b.objective).abs() < 1e-9);
            for (k, &j) in perm.iter().enumerate() {
                prop_assert!((b.w.as_slice()[k] - a.w.as_slice()[j]).abs() < 1e-6);
            }
        }
    }
}
