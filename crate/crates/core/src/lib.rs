pub mod attack;
pub mod bench;
pub mod error;
pub mod inference;
pub mod model;
pub mod parallel;
pub mod tensor;
pub mod train;
pub mod wire;

pub use error::{Error, Result};
