//! Synthesis of PET-like volumes from CT.
//!
//! The pipeline aligns PET onto the CT grid, windows both modalities, trains
//! a fully convolutional network with an SUV-weighted loss, refines its output
//! with a conditional GAN, evaluates reconstructions separately over high and
//! low SUV regions, and uses thresholded synthetic PET to prune false-positive
//! lesion candidates.

pub mod dataprep;
pub mod error;
pub mod eval;
pub mod lesion;
pub mod nn;
pub mod phantom;
mod scalar;
pub mod train;
pub mod volume;

pub use error::{Error, ErrorClass, Result};
pub use scalar::Scalar;
pub use volume::{Grid, Modality, Volume3D, Window};

pub type VolumeF32 = Volume3D<f32>;
pub type VolumeF64 = Volume3D<f64>;
pub type ParamsF32 = nn::Params<f32>;
