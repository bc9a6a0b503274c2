//! Synthetic control estimation for panel data.
//!
//! The crate fits a synthetic counterpart to a treated unit from a weighted
//! pool of donors, measures significance with in-space placebos, and fits
//! logistic growth curves to cumulative rate series. Inputs are long-format
//! CSV panels keyed by unit id.
//!
//! ```
//! use synthctl::{fit_synth, Panel, PredictorTable, StudySpec, UnitId};
//! use chrono::NaiveDate;
//!
//! let units: Vec<UnitId> = ["A", "B", "C"].iter().map(|s| UnitId::new(*s).unwrap()).collect();
//! let b: Vec<f64> = (0..40).map(|t| t as f64).collect();
//! let c: Vec<f64> = (0..40).map(|t| 10.0 + 0.5 * t as f64).collect();
//! let a: Vec<f64> = b.iter().zip(&c).map(|(x, y)| 0.25 * x + 0.75 * y).collect();
//! let start = NaiveDate::from_ymd_opt(2021, 3, 1).unwrap();
//! let panel = Panel::from_dense(units.clone(), start, vec![a, b, c]).unwrap();
//!
//! let mut spec = StudySpec::new(units[0].clone(), units[1..].to_vec(), 30);
//! spec.reg = synthctl::Regularization::NONE;
//! let fit = fit_synth(&spec, &panel, &PredictorTable::empty(units)).unwrap();
//! assert!((fit.w_star.as_slice()[0] - 0.25).abs() < 1e-4);
//! ```

pub mod donors;
pub mod engine;
pub mod error;
pub mod inference;
pub mod logistic;
pub mod optim;
pub mod panel;
pub mod report;
pub mod weights;

pub use engine::{fit_synth, StudySpec, SynthResult, TrainPlacement, VMode};
pub use error::{Error, Result};
pub use inference::{p_value, placebo_run, training_sweep, PlaceboEnsemble, PlaceboOptions};
pub use logistic::{fit_logistic, logistic_predict, LogisticFit, LogisticOptions};
pub use panel::{Panel, PredictorTable, UnitId};
pub use weights::{solve_w, ConstraintMode, Regularization, SolverOptions, WeightVector};

// The guide's code listings run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/panels.md")]
    mod panels {}
    #[doc = include_str!("../../../book/src/weights.md")]
    mod weights {}
    #[doc = include_str!("../../../book/src/synthetic_control.md")]
    mod synthetic_control {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/logistic.md")]
    mod logistic {}
    #[doc = include_str!("../../../book/src/donor_pools.md")]
    mod donor_pools {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
