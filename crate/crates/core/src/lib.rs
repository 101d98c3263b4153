pub mod baselines;
pub mod conv;
pub mod data;
pub mod dyffusion;
mod error;
pub mod losses;
pub mod metrics;
pub mod networks;

pub use error::{Error, Result};
