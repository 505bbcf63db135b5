//! Effective number of independent tests and the familywise error rate it
//! actually delivers.

pub mod cli;
pub mod corrmat;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod fwer;
pub mod io;
pub mod meff;
pub mod mvn;
pub mod quad;
pub mod score;

pub use error::{Error, Result};
