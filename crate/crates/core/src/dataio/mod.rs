//! RGB-D sequences on disk (TUM layout), keyframe windows, training pairs
//! and ray-cast synthetic scenes with exact ground truth.

mod synth;
mod tum;
mod window;

pub use synth::{render_frame, synth_scene, Scene, SceneKind, Surface, SynthParams, Texture};
pub use tum::{load_tum_sequence, save_tum_sequence, LoadReport, DEFAULT_DEPTH_SCALE, ASSOCIATION_TOLERANCE};
pub use window::{make_training_pairs, make_window, KeyframeWindow, TrainingPair};

use crate::geometry::{CameraIntrinsics, Pose};
use crate::image::{DepthMap, RgbImage};

/// One RGB-D frame with its camera-to-world pose.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceFrame {
    pub timestamp: f64,
    pub rgb: RgbImage,
    /// Metric depth; invalid where the sensor reported 0.
    pub depth: DepthMap<f64>,
    pub world_from_camera: Pose<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub intrinsics: CameraIntrinsics<f64>,
    pub frames: Vec<SequenceFrame>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Per-channel mean color over all frames.
    pub fn mean_color(&self) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for f in &self.frames {
            let m = f.rgb.channel_mean();
            for c in 0..3 {
                acc[c] += m[c];
            }
        }
        acc.map(|a| a / self.frames.len().max(1) as f64)
    }
}
