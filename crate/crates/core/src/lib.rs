//! Diffusion-based counter-forensics laboratory.
//!
//! Purifies images by diffusing them to an intermediate step and sampling the
//! reverse chain back (optionally pulled toward the input by a similarity
//! gradient), generates synthetic forgeries with controllable camera traces,
//! runs simple trace detectors and scores how much of the trace survives.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used by the command-line tool.

pub mod dct;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod forensics;
pub mod forgerylab;
pub mod guidance;
pub mod image;
pub mod io;
pub mod metrics;
pub mod scalar;
pub mod schedule;
pub mod seed;
pub mod tiler;

pub use denoiser::{ConvNet, Denoiser, LayerDesc, TrainConfig};
pub use diffusion::{
    forward_sample, guided_reverse_step, median_purify, purify, purify_tiled, reverse_step,
    PurifyConfig,
};
pub use error::{Error, Result};
pub use forensics::{Detector, HeatMap};
pub use guidance::{GuidanceMetric, SsimParams};
pub use image::{ImageTensor, Shape};
pub use metrics::{ConfusionW, Mask, Scores};
pub use scalar::Scalar;
pub use schedule::NoiseSchedule;
pub use tiler::TileLayout;

/// Working precision of the pipeline.
pub type Real = f32;
pub type Image = ImageTensor<Real>;
pub type Image64 = ImageTensor<f64>;
pub type Heat = HeatMap<Real>;
pub type Net = ConvNet<Real>;
pub type Model = Denoiser<Real>;
