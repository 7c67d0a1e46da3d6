//! Desk-scale robustness lab: a small autodiff CNN, natural perturbation
//! operators, l-infinity attacks, accuracy-drop calibration, robust training
//! regimes and the seen/unseen/clean evaluation matrix.

pub mod data;
pub mod error;
pub mod perturb;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub mod attack;
pub mod calibrate;
pub mod eval;
pub mod metrics;
pub mod train;
