#![allow(dead_code)]

use chrono::NaiveDate;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use synthctl::panel::{Panel, PredictorTable, UnitId};
use synthctl::weights::Regularization;

pub fn start_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2021, 1, 1).unwrap()
}

pub fn uid(s: &str) -> UnitId {
    UnitId::new(s).unwrap()
}

pub fn ids(n: usize) -> Vec<UnitId> {
    (0..n).map(|i| uid(&format!("U{i:03}"))).collect()
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Objective written out directly from its definition, independent of the library.
pub fn reference_objective(w: &[f64], x1: &[f64], x0: &DMatrix<f64>, v: &[f64], reg: &Regularization) -> f64 {
    let fit: f64 = (0..x1.len())
        .map(|h| {
            let s: f64 = (0..w.len()).map(|j| w[j] * x0[(h, j)]).sum();
            v[h] * (x1[h] - s).powi(2)
        })
        .sum::<f64>()
        .sqrt();
    let n2 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    let n1: f64 = w.iter().map(|x| x.abs()).sum();
    fit + reg.l1 * n2 + reg.l2 * n1
}

/// Exhaustive search over the 3-simplex on a grid of the given step.
pub fn grid_oracle_3(x1: &[f64], x0: &DMatrix<f64>, v: &[f64], reg: &Regularization, step: f64) -> (f64, [f64; 3]) {
    assert_eq!(x0.ncols(), 3);
    let n = (1.0 / step).round() as usize;
    let mut best = (f64::INFINITY, [0.0; 3]);
    for i in 0..=n {
        for j in 0..=(n - i) {
            let w = [i as f64 / n as f64, j as f64 / n as f64, (n - i - j) as f64 / n as f64];
            let f = reference_objective(&w, x1, x0, v, reg);
            if f < best.0 {
                best = (f, w);
            }
        }
    }
    best
}

/// Units share one latent process: y_it = a_i + b_i f_t + c_i g_t + noise,
/// with predictors that are noisy linear functions of (a_i, b_i, c_i).
pub struct FactorPanel {
    pub panel: Panel,
    pub predictors: PredictorTable,
}

pub fn factor_panel(seed: u64, n_units: usize, n_days: usize, n_pred: usize, noise: f64) -> FactorPanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f: Vec<f64> = (0..n_days).map(|t| t as f64 / n_days as f64 * 10.0).collect();
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let g: Vec<f64> = (0..n_days).map(|t| (t as f64 / 9.0 + phase).sin()).collect();
    let loadings: Vec<[f64; 3]> = (0..n_pred).map(|_| [normal(&mut rng), normal(&mut rng), normal(&mut rng)]).collect();
    let mut rows = Vec::new();
    let mut pred_rows = Vec::new();
    for _ in 0..n_units {
        let a = 20.0 + 5.0 * normal(&mut rng);
        let b = 1.0 + 0.3 * normal(&mut rng);
        let c = normal(&mut rng);
        rows.push((0..n_days).map(|t| a + b * f[t] + c * g[t] + noise * normal(&mut rng)).collect::<Vec<f64>>());
        pred_rows.push(
            loadings
                .iter()
                .map(|l| l[0] * (a - 20.0) / 5.0 + l[1] * (b - 1.0) / 0.3 + l[2] * c + 0.3 * normal(&mut rng))
                .collect::<Vec<f64>>(),
        );
    }
    let units = ids(n_units);
    let names = (0..n_pred).map(|h| format!("x{h}")).collect();
    FactorPanel {
        panel: Panel::from_dense(units.clone(), start_date(), rows).unwrap(),
        predictors: PredictorTable::new(names, units, pred_rows).unwrap(),
    }
}

/// Kolmogorov-Smirnov distance between the empirical distribution of `p` and
/// the uniform distribution on the lattice {0, 1/n, ..., (n-1)/n}.
pub fn ks_discrete_uniform(p: &[f64], n: usize) -> f64 {
    let m = p.len() as f64;
    (0..n)
        .map(|i| {
            let x = i as f64 / n as f64;
            let emp = p.iter().filter(|&&v| v <= x + 1e-12).count() as f64 / m;
            (emp - (i + 1) as f64 / n as f64).abs()
        })
        .fold(0.0, f64::max)
}

/// Kolmogorov-Smirnov distance to the continuous uniform on [0, 1].
pub fn ks_continuous_uniform(p: &[f64]) -> f64 {
    let mut s = p.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| ((i + 1) as f64 / m - x).abs().max((x - i as f64 / m).abs()))
        .fold(0.0, f64::max)
}
