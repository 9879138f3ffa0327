pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod objective;
pub mod params;
pub mod peft;
pub mod pipeline;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
