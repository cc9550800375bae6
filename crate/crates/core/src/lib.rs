//! Longitudinal paired-volume conversion prediction.

pub mod baselines;
pub mod cohort;
pub mod config;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod interpret;
pub mod preprocess;
pub mod rng;
pub mod stats;
pub mod synth;
pub mod trainer;
pub mod volume;

pub use cohort::{manifest_load, Cohort, PairRecord};
pub use error::{Result, TafError};
pub use rng::SeededRng;
pub use volume::{IntensityTag, Volume};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
