pub mod attention;
pub mod backtest;
pub mod cli;
pub mod data;
pub mod encoding;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod report;
pub mod selftest;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
