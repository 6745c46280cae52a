//! Small-area estimation of domain means under the Fay–Herriot area-level
//! model and the Battese–Harter–Fuller nested-error model, unified through
//! calibrated survey weights.

pub mod calibration;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod direct;
pub mod error;
pub mod linalg;
pub mod mse;
pub mod optim;
pub mod predictors;
pub mod rng;
pub mod simulate;
pub mod varcomp;

pub use error::{Result, SaeError};
