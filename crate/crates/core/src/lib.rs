//! Semiparametric GMM estimation when outcomes are missing in a primary
//! sample and recoverable from an auxiliary sample under conditional
//! independence of the outcome and the missingness indicator given proxies.

pub mod bounds;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod estimators;
pub mod expr;
pub mod linalg;
pub mod moments;
pub mod optimize;
pub mod propensity;
pub mod report;
pub mod sieve;
pub mod simulate;

pub use error::{Error, ErrorClass, Result};
