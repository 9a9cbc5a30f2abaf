pub mod anytime;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod msdnet;
pub mod psychofit;
#[cfg(any(test, feature = "oracles"))]
pub mod oracle;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
