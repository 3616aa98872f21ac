//! Multi-view plane-sweep dense depth estimation with pluggable per-pixel
//! descriptors, and a small trainer for deeply supervised matching features.
//!
//! The numerical core is generic over [`Real`] (`f32` or `f64`); the type
//! aliases at the bottom of this file name the usual instantiations.

pub mod config;
pub mod costvolume;
pub mod dataio;
pub mod error;
pub mod features;
pub mod geometry;
pub mod image;
pub mod learning;
pub mod metrics;
pub mod regularizer;
mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

pub use costvolume::{CostVolume, CostVolumeOptions, MatchNorm};
pub use features::{FeatureMap, FeaturePyramid};
pub use geometry::{CameraIntrinsics, InverseDepthGrid, Pose};
pub use image::{DepthMap, RgbImage};

pub type FeatureMapF32 = features::FeatureMap<f32>;
pub type FeatureMapF64 = features::FeatureMap<f64>;
pub type CostVolumeF32 = costvolume::CostVolume<f32>;
pub type CostVolumeF64 = costvolume::CostVolume<f64>;
pub type PoseF64 = geometry::Pose<f64>;
pub type IntrinsicsF64 = geometry::CameraIntrinsics<f64>;
pub type GridF64 = geometry::InverseDepthGrid<f64>;
pub type DepthMapF64 = image::DepthMap<f64>;
pub type ExtractorF32 = learning::ExtractorParams<f32>;
pub type ExtractorF64 = learning::ExtractorParams<f64>;
