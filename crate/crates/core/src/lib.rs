//! Copy-move forgery detection and source/target distinguishment toolkit:
//! synthetic forgery generation, photometric/compression attacks, a
//! dual-decoder segmentation network with explicit forward/backward passes,
//! training, and pixel-level evaluation.

pub mod attack;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod network;
pub mod objective;
pub mod ops;
pub mod params;
pub mod training;

pub use error::{Error, Result};
