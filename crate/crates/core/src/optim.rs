//! Derivative-free minimization (Nelder–Mead) used by the importance-weight
//! search and the logistic curve fits.

#[derive(Debug, Clone)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    /// Stop when the spread of objective values across the simplex falls below this.
    pub f_tol: f64,
    /// Stop when every vertex lies within this distance of the best one.
    pub x_tol: f64,
    /// Stop when the best value improved by less than `stall_tol` over this many evaluations.
    pub stall_window: Option<usize>,
    pub stall_tol: f64,
    /// Initial simplex edge length along each axis.
    pub initial_step: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        NelderMeadOptions {
            max_evals: 2000,
            f_tol: 1e-12,
            x_tol: 1e-10,
            stall_window: None,
            stall_tol: 0.0,
            initial_step: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
}

struct Counter<F> {
    f: F,
    evals: usize,
    best: f64,
    history: Vec<f64>,
}

impl<F: FnMut(&[f64]) -> f64> Counter<F> {
    fn eval(&mut self, x: &[f64]) -> f64 {
        let v = (self.f)(x);
        let v = if v.is_nan() { f64::INFINITY } else { v };
        self.evals += 1;
        if v < self.best {
            self.best = v;
        }
        self.history.push(self.best);
        v
    }

    fn stalled(&self, window: Option<usize>, tol: f64) -> bool {
        match window {
            Some(w) if self.history.len() > w => {
                let then = self.history[self.history.len() - 1 - w];
                then.is_finite() && then - self.best < tol
            }
            _ => false,
        }
    }
}

/// Minimizes `f` from `x0` with the standard reflection/expansion/contraction/shrink
/// coefficients (1, 2, 1/2, 1/2).
pub fn nelder_mead<F>(f: F, x0: &[f64], opts: &NelderMeadOptions) -> NelderMeadResult
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut c = Counter { f, evals: 0, best: f64::INFINITY, history: Vec::new() };
    if n == 0 {
        let f0 = c.eval(x0);
        return NelderMeadResult { x: Vec::new(), f: f0, evals: 1, converged: true };
    }

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += opts.initial_step;
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| c.eval(v)).collect();
    let mut converged = false;

    while c.evals < opts.max_evals {
        // Sort vertices by value; ties keep insertion order.
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let spread = values[n] - values[0];
        let diameter = simplex[1..]
            .iter()
            .map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if (spread.is_finite() && spread <= opts.f_tol) || diameter <= opts.x_tol {
            converged = true;
            break;
        }
        if c.stalled(opts.stall_window, opts.stall_tol) {
            converged = true;
            break;
        }

        let centroid: Vec<f64> =
            (0..n).map(|d| simplex[..n].iter().map(|v| v[d]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> {
            centroid.iter().zip(&simplex[n]).map(|(cv, w)| cv + t * (cv - w)).collect()
        };

        let reflected = along(1.0);
        let fr = c.eval(&reflected);
        if fr < values[0] {
            let expanded = along(2.0);
            let fe = c.eval(&expanded);
            if fe < fr {
                simplex[n] = expanded;
                values[n] = fe;
            } else {
                simplex[n] = reflected;
                values[n] = fr;
            }
            continue;
        }
        if fr < values[n - 1] {
            simplex[n] = reflected;
            values[n] = fr;
            continue;
        }
        let (contracted, fc) = if fr < values[n] {
            let p = along(0.5);
            let fp = c.eval(&p);
            (p, fp)
        } else {
            let p = along(-0.5);
            let fp = c.eval(&p);
            (p, fp)
        };
        if fc < values[n].min(fr) {
            simplex[n] = contracted;
            values[n] = fc;
            continue;
        }
        // Shrink towards the best vertex.
        let best = simplex[0].clone();
        for i in 1..=n {
            simplex[i] = simplex[i].iter().zip(&best).map(|(x, b)| b + 0.5 * (x - b)).collect();
            values[i] = c.eval(&simplex[i]);
        }
    }

    let (bi, _) = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("simplex is non-empty");
    NelderMeadResult { x: simplex[bi].clone(), f: values[bi], evals: c.evals, converged }
}

/// Runs Nelder–Mead from every start and keeps the best result
/// (earliest start wins ties). Each run is restarted once from its own optimum.
pub fn multistart<F>(mut f: F, starts: &[Vec<f64>], opts: &NelderMeadOptions) -> Option<NelderMeadResult>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut best: Option<NelderMeadResult> = None;
    for s in starts {
        let first = nelder_mead(&mut f, s, opts);
        let polished = nelder_mead(&mut f, &first.x, opts);
        let run = if polished.f <= first.f {
            NelderMeadResult { evals: first.evals + polished.evals, ..polished }
        } else {
            first
        };
        if best.as_ref().map_or(true, |b| run.f < b.f) {
            best = Some(run);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_rosenbrock() {
        let rosen = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let opts = NelderMeadOptions { max_evals: 5000, f_tol: 1e-16, x_tol: 1e-12, ..Default::default() };
        let r = nelder_mead(rosen, &[-1.2, 1.0], &opts);
        assert!((r.x[0] - 1.0).abs() < 1e-4 && (r.x[1] - 1.0).abs() < 1e-4, "{r:?}");
    }

    #[test]
    fn quadratic_bowl_in_five_dims() {
        let f = |x: &[f64]| x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * (v - 0.3).powi(2)).sum();
        let opts = NelderMeadOptions { max_evals: 20_000, f_tol: 1e-18, ..Default::default() };
        let r = multistart(f, &[vec![0.0; 5]], &opts).unwrap();
        assert!(r.x.iter().all(|v| (v - 0.3).abs() < 1e-5), "{r:?}");
    }

    #[test]
    fn stall_rule_stops_early() {
        let flat = |_: &[f64]| 1.0;
        let opts = NelderMeadOptions {
            stall_window: Some(50),
            stall_tol: 1e-10,
            f_tol: -1.0,
            x_tol: -1.0,
            ..Default::default()
        };
        let r = nelder_mead(flat, &[0.0, 0.0], &opts);
        assert!(r.converged);
        assert!(r.evals <= 60);
    }

    #[test]
    fn nan_is_treated_as_worst() {
        let f = |x: &[f64]| if x[0] < 0.0 { f64::NAN } else { (x[0] - 1.0).powi(2) };
        let r = nelder_mead(f, &[0.5], &NelderMeadOptions::default());
        assert!((r.x[0] - 1.0).abs() < 1e-4);
    }
}
