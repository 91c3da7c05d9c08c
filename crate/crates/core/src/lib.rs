//! Energy-guided reverse VP-SDE sampling for unpaired toy image deraining.

pub mod checkpoint;
pub mod energy;
pub mod error;
pub mod features;
pub mod nn;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod sample;
pub mod sampler;
pub mod score;
pub mod sde;
pub mod toyworld;

pub use error::{Error, Result};
pub use sample::{Sample, Shape};
pub use sde::DiffusionSchedule;
