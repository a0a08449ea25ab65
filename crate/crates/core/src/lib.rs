//! Probabilistic precipitation nowcasting toolkit.
//!
//! The crate covers the data side of an exceedance-probability nowcaster:
//!
//! - [`raster`]: georeferenced grids, resampling and the reshaping geometry
//!   used to fuse multi-resolution sources.
//! - [`intensity`]: reflectivity/rain-rate conversion and intensity classes.
//! - [`probcast`]: ordinal-consistent reconstruction, training losses,
//!   lead-time weights, threshold calibration and intensity extraction.
//! - [`verify`]: categorical, neighborhood, probabilistic and error scores.
//! - [`baseline`]: persistence and semi-Lagrangian extrapolation.
//! - [`synthdata`]: synthetic radar scenes, split cycles and patch sampling.

pub mod baseline;
pub mod error;
pub mod intensity;
pub mod io;
pub mod probcast;
pub mod raster;
pub mod synthdata;
pub mod verify;

pub use error::{Error, Result};

/// Marker for pixels without ground truth.
pub const MISSING: f64 = -1.0;

#[inline]
pub fn is_missing(v: f64) -> bool {
    v == MISSING
}
