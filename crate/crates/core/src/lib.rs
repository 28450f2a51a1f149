pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradsuite;
pub mod layers;
pub mod model;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Mode, Tape, Tensor, Var};
