//! Fair representation learning for isolating a continuous confounder (age)
//! from a binary clinical label, plus the multi-group equalized-odds score
//! used to measure how well it worked.

pub mod data;
pub mod error;
pub mod fairness;
pub mod harness;
pub mod models;
pub mod nn;

pub use error::{Error, Result};
