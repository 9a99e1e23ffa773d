//! Grade-prompted gland segmentation.
//!
//! A binary grade classifier yields Grad-CAM++ heat maps; a small adapter
//! fuses each heat map with its image into a dense prompt for a SAM-style
//! segmenter with one shared image encoder and two prompt-encoder/decoder
//! branches (glands and contours). Post-processing subtracts contours from
//! glands, cleans the result and labels instances, which are scored with the
//! GlaS object-level metrics.
//!
//! Models are generic over the scalar type; [`Classifier32`] and friends are
//! the `f32` instantiations used for training, `f64` ones serve gradient checks.

pub mod adapter;
pub mod cam;
pub mod classifier;
pub mod config;
pub mod dataset;
pub mod error;
pub mod figures;
pub mod io;
pub mod metrics;
pub mod morphology;
pub mod pipeline;
pub mod postprocess;
pub mod raster;
pub mod segmenter;
pub mod synthetic;
pub mod training;
pub mod weights;
pub mod vit;

pub use error::{Error, Result};
pub use raster::{BinaryMask, InstanceMask, Raster, RgbImage};

pub type Classifier32 = classifier::Classifier<f32>;
pub type Classifier64 = classifier::Classifier<f64>;
pub type Segmenter32 = segmenter::Segmenter<f32>;
pub type Segmenter64 = segmenter::Segmenter<f64>;
