pub mod error;
pub mod factor_scores;
pub mod gaussian_kernel;
#[cfg(feature = "io")]
pub mod model_io;
pub mod moment_estimation;
mod parallel;
pub mod selfcheck;
pub mod simulation_lab;
pub mod spectral_subspace;

pub use error::{Error, Result};
