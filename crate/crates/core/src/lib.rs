pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod lstm;
pub mod sparsify;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
