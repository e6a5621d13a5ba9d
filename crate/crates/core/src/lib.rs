//! Behavior-sequence transformer for click-through-rate prediction, with the
//! order-blind WDL and averaged-history WDL(+Seq) baselines, a reverse-mode
//! tape, Adagrad training, offline evaluation and a synthetic data generator
//! that plants an order-dependent click signal.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod features;
pub mod rng;
pub mod model;
pub mod trainer;
pub mod eval;
pub mod experiment;
