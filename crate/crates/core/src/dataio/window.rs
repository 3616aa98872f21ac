use super::{Sequence, SequenceFrame};
use crate::geometry::Pose;
use crate::image::{DepthMap, RgbImage};
use crate::{Error, Result};

/// A reference frame and the live frames around it, each with the
/// transform `T_nr` from reference camera to live camera coordinates.
#[derive(Clone, Debug)]
pub struct KeyframeWindow<'a> {
    pub reference: &'a SequenceFrame,
    pub reference_index: usize,
    pub live: Vec<(usize, &'a SequenceFrame, Pose<f64>)>,
}

/// Frames `ref ± k·stride` for `k = 1..=half_width`, truncated at the
/// sequence ends.
pub fn make_window(seq: &Sequence, ref_index: usize, half_width: usize, stride: usize) -> Result<KeyframeWindow<'_>> {
    if ref_index >= seq.len() {
        return Err(Error::Domain(format!("reference index {ref_index} outside sequence of {}", seq.len())));
    }
    if stride == 0 {
        return Err(Error::Domain("window stride must be >= 1".into()));
    }
    let reference = &seq.frames[ref_index];
    let mut live = Vec::new();
    for k in (1..=half_width).rev() {
        if let Some(i) = ref_index.checked_sub(k * stride) {
            live.push(i);
        }
    }
    for k in 1..=half_width {
        let i = ref_index + k * stride;
        if i < seq.len() {
            live.push(i);
        }
    }
    if live.is_empty() {
        return Err(Error::Data(format!("window around frame {ref_index} has no live frames")));
    }
    let live = live
        .into_iter()
        .map(|i| {
            let f = &seq.frames[i];
            (i, f, Pose::relative(&f.world_from_camera, &reference.world_from_camera))
        })
        .collect();
    Ok(KeyframeWindow { reference, reference_index: ref_index, live })
}

/// Reference and live image with relative pose and reference inverse-depth
/// ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub reference: RgbImage,
    pub live: RgbImage,
    /// Reference camera to live camera.
    pub relative_pose: Pose<f64>,
    /// `1/depth`; invalid where depth is missing or beyond `rho_max`.
    pub gt_inverse_depth: DepthMap<f64>,
}

/// Pairs `(i, i + gap)` with ground-truth inverse depth of frame `i`.
pub fn make_training_pairs(seq: &Sequence, gap: usize, rho_max: f64) -> Vec<TrainingPair> {
    if gap == 0 || seq.len() <= gap {
        return Vec::new();
    }
    (0..seq.len() - gap)
        .map(|i| {
            let (r, l) = (&seq.frames[i], &seq.frames[i + gap]);
            let mut gt = r.depth.reciprocal();
            for (v, ok) in gt.values.iter_mut().zip(gt.valid.iter_mut()) {
                if *v > rho_max {
                    *ok = false;
                    *v = 0.0;
                }
            }
            TrainingPair {
                reference: r.rgb.clone(),
                live: l.rgb.clone(),
                relative_pose: Pose::relative(&l.world_from_camera, &r.world_from_camera),
                gt_inverse_depth: gt,
            }
        })
        .collect()
}
