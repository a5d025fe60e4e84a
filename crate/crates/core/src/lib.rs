//! Simulation of microwave-free 13C hyperpolarization in diamond driven by
//! NV-P1 level anti-crossings during magnetic field sweeps.

pub mod constants;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod lzmodel;
pub mod motif;
pub mod presets;
pub mod spectra;
pub mod spinsys;

pub use error::{Error, Result};

/// Complex scalar used for all operators.
pub type C64 = nalgebra::Complex<f64>;
