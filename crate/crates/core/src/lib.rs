pub mod cli;
pub mod data;
pub mod discrepancy;
pub mod distributions;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod ot;
pub mod reference;
pub mod selftest;
pub mod trainer;

pub use error::{Error, Result};
