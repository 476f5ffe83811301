pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod imageio;
pub mod layers;
pub mod manifest;
pub mod models;
pub mod runtime;
pub mod selftest;
pub mod tensor;
pub mod training;
pub mod viz;

pub use error::{PanError, Result};
pub use tensor::{Tape, Tensor, Var};
