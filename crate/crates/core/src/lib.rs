//! Sensor/image fusion classifier with an adaptive Barlow Twins
//! complementarity loss, trained from scratch on small datasets.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
