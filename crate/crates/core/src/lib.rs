pub mod baselines;
pub mod cone;
pub mod controllability;
pub mod error;
pub mod harness;
pub mod learner;
pub mod model;
pub mod nme;
pub mod numerics;

pub use error::{Error, Result};
