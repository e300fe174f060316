pub mod distributions;
pub mod error;
pub mod estimators;
pub mod graph;
pub mod harness;
pub mod optim;
pub mod rl;
pub mod stats;
pub mod surrogate;
pub mod vae;

pub use error::{Error, Result};
pub use graph::{Gradients, Tape, Var};
