pub mod attack;
pub mod checkpoint;
pub mod data;
pub mod diffprior;
pub mod dualenc;
pub mod error;
pub mod harness;
pub mod nn;
pub mod purifier;
pub mod riskbench;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod zeroshot;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
