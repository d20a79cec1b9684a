pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod losses;
pub mod numerics;
pub mod prompts;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
