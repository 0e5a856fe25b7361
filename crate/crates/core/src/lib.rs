//! Synthetic mixture-shift preference worlds, calibration classifiers, ranking
//! losses, and KL-robust aggregation.

pub mod calib;
pub mod checks;
pub mod dro;
pub mod error;
pub mod evalhub;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod numeric;
pub mod policy;
pub mod seed;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
