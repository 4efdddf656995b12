//! Attention-based multiple instance learning with within-bag random
//! sampling, two-stage fine-tuning, and AUC/bootstrap evaluation.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod instrument;
pub mod interpret;
pub mod model;
pub mod rng;
pub mod sampling;
pub mod training;

pub use error::{MilError, Result};
