pub mod codec;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod fusion;
pub mod gbm;
pub mod frontend;
pub mod lda;
pub mod nn;
pub mod scaler;

pub use error::{Error, ErrorKind, Result};
