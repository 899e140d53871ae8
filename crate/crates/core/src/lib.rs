//! Weakly supervised probabilistic procedure planning.

pub mod cli;
pub mod config;
pub mod diffcore;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod planner;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
