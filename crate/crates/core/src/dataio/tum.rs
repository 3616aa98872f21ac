use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;

use super::{Sequence, SequenceFrame};
use crate::config::KeyValues;
use crate::geometry::{CameraIntrinsics, Pose, Vec3};
use crate::image::{DepthMap, RgbImage};
use crate::{Error, Result};

/// 16-bit depth PNG units per meter.
pub const DEFAULT_DEPTH_SCALE: f64 = 5000.0;

/// Maximum timestamp gap, in seconds, for associating rgb, depth and pose.
pub const ASSOCIATION_TOLERANCE: f64 = 0.02;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub rgb_files: usize,
    pub dropped_without_depth: usize,
    pub dropped_without_pose: usize,
}

fn stamped_pngs(dir: &Path) -> Result<Vec<(f64, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let t: f64 = stem
            .parse()
            .map_err(|_| Error::format(&path, "file name is not a timestamp"))?;
        out.push((t, path));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

fn nearest<V>(sorted: &[(f64, V)], t: f64) -> Option<&(f64, V)> {
    let i = sorted.partition_point(|(s, _)| *s < t);
    let candidates = [i.checked_sub(1), (i < sorted.len()).then_some(i)];
    candidates
        .into_iter()
        .flatten()
        .map(|j| &sorted[j])
        .filter(|(s, _)| (s - t).abs() <= ASSOCIATION_TOLERANCE)
        .min_by(|a, b| (a.0 - t).abs().total_cmp(&(b.0 - t).abs()))
}

/// Parses a TUM trajectory: `timestamp tx ty tz qx qy qz qw` per line,
/// camera-to-world.
pub fn parse_trajectory(text: &str, path: &Path) -> Result<Vec<(f64, Pose<f64>)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(path, format!("line {}: non-numeric field", n + 1)))?;
        if v.len() != 8 {
            return Err(Error::format(path, format!("line {}: expected 8 fields, got {}", n + 1, v.len())));
        }
        let pose = Pose::from_quaternion([v[4], v[5], v[6], v[7]], Vec3::new(v[1], v[2], v[3]))
            .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        out.push((v[0], pose));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

pub fn format_trajectory(poses: &[(f64, Pose<f64>)]) -> String {
    let mut s = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for (t, p) in poses {
        let q = p.quaternion();
        let tr = p.translation;
        s.push_str(&format!(
            "{t:.6} {} {} {} {} {} {} {}\n",
            tr.x, tr.y, tr.z, q[0], q[1], q[2], q[3]
        ));
    }
    s
}

/// Loads `rgb/<t>.png`, `depth/<t>.png`, `groundtruth.txt` and `camera.txt`
/// from `dir`. Depth and pose are associated to each rgb timestamp by
/// nearest neighbour within [`ASSOCIATION_TOLERANCE`]; frames missing either
/// are dropped and counted. An optional `dataset.cfg` may set `depth_scale`.
pub fn load_tum_sequence(dir: &Path) -> Result<(Sequence, LoadReport)> {
    let cfg_path = dir.join("dataset.cfg");
    let depth_scale = if cfg_path.exists() {
        KeyValues::load(&cfg_path)?.get_or("depth_scale", DEFAULT_DEPTH_SCALE)?
    } else {
        DEFAULT_DEPTH_SCALE
    };
    let intrinsics = CameraIntrinsics::load(&dir.join("camera.txt"))?;
    let traj_path = dir.join("groundtruth.txt");
    let traj_text = fs::read_to_string(&traj_path).map_err(|e| Error::io(&traj_path, e))?;
    let trajectory = parse_trajectory(&traj_text, &traj_path)?;
    let rgb = stamped_pngs(&dir.join("rgb"))?;
    let depth = stamped_pngs(&dir.join("depth"))?;

    let mut report = LoadReport { rgb_files: rgb.len(), ..Default::default() };
    let mut jobs = Vec::new();
    for (t, rgb_path) in &rgb {
        let Some((_, depth_path)) = nearest(&depth, *t) else {
            report.dropped_without_depth += 1;
            continue;
        };
        let Some((_, pose)) = nearest(&trajectory, *t) else {
            report.dropped_without_pose += 1;
            continue;
        };
        jobs.push((*t, rgb_path.clone(), depth_path.clone(), *pose));
    }
    let dropped = report.dropped_without_depth + report.dropped_without_pose;
    if dropped > 0 {
        warn!("{}: dropped {dropped} of {} frames without depth or pose", dir.display(), rgb.len());
    }

    let frames = jobs
        .into_par_iter()
        .map(|(timestamp, rgb_path, depth_path, pose)| {
            let rgb = RgbImage::load(&rgb_path)?;
            let depth = DepthMap::load_png16(&depth_path, depth_scale)?;
            if (rgb.width, rgb.height) != (intrinsics.width, intrinsics.height)
                || (depth.width, depth.height) != (intrinsics.width, intrinsics.height)
            {
                return Err(Error::Data(format!(
                    "frame {timestamp:.6}: image size does not match camera.txt"
                )));
            }
            Ok(SequenceFrame { timestamp, rgb, depth, world_from_camera: pose })
        })
        .collect::<Result<Vec<_>>>()?;
    if frames.is_empty() {
        return Err(Error::Data(format!("{}: no associated frames", dir.display())));
    }
    Ok((Sequence { intrinsics, frames }, report))
}

/// Writes a sequence in the layout read by [`load_tum_sequence`].
pub fn save_tum_sequence(seq: &Sequence, dir: &Path, depth_scale: f64) -> Result<()> {
    for sub in ["rgb", "depth"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let write = |p: PathBuf, s: String| fs::write(&p, s).map_err(|e| Error::io(&p, e));
    write(dir.join("camera.txt"), seq.intrinsics.to_text())?;
    let mut cfg = KeyValues::new();
    cfg.set("depth_scale", depth_scale);
    cfg.save(&dir.join("dataset.cfg"))?;
    let poses: Vec<_> = seq.frames.iter().map(|f| (f.timestamp, f.world_from_camera)).collect();
    write(dir.join("groundtruth.txt"), format_trajectory(&poses))?;
    seq.frames.par_iter().try_for_each(|f| {
        let name = format!("{:.6}.png", f.timestamp);
        f.rgb.save_png(&dir.join("rgb").join(&name))?;
        f.depth.save_png16(&dir.join("depth").join(&name), depth_scale)
    })
}
