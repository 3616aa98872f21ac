use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use densematch::dataio::{Sequence, SequenceFrame};
use densematch::features::rgb_features;
use densematch::learning::ExtractorParams;
use densematch::{Error, FeatureMap, Result};

/// Per-channel mean subtracted from colors before RGB matching.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MeanSpec {
    /// Mean color of the loaded sequence.
    Auto,
    Fixed([f64; 3]),
}

impl FromStr for MeanSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(MeanSpec::Auto);
        }
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Domain(format!("mean must be 'auto' or R,G,B, got {s:?}")))?;
        match parts[..] {
            [r, g, b] => Ok(MeanSpec::Fixed([r, g, b])),
            _ => Err(Error::Domain(format!("mean must have three components, got {s:?}"))),
        }
    }
}

impl fmt::Display for MeanSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MeanSpec::Auto => f.write_str("auto"),
            MeanSpec::Fixed([r, g, b]) => write!(f, "{r},{g},{b}"),
        }
    }
}

/// `rgb`, `file:<dir>` (one `<timestamp>.fmap` per frame) or
/// `trained:<params>`.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureSource {
    Rgb,
    Files(PathBuf),
    Trained(PathBuf),
}

impl FromStr for FeatureSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "rgb" {
            Ok(FeatureSource::Rgb)
        } else if let Some(dir) = s.strip_prefix("file:") {
            Ok(FeatureSource::Files(dir.into()))
        } else if let Some(p) = s.strip_prefix("trained:") {
            Ok(FeatureSource::Trained(p.into()))
        } else {
            Err(Error::Domain(format!("unknown feature source {s:?} (rgb, file:<dir>, trained:<params>)")))
        }
    }
}

impl fmt::Display for FeatureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureSource::Rgb => f.write_str("rgb"),
            FeatureSource::Files(d) => write!(f, "file:{}", d.display()),
            FeatureSource::Trained(p) => write!(f, "trained:{}", p.display()),
        }
    }
}

pub(crate) enum Provider {
    Rgb([f64; 3]),
    Files(PathBuf),
    Trained(Box<ExtractorParams<f64>>),
}

pub(crate) fn stamp(t: f64) -> String {
    format!("{t:.6}")
}

impl Provider {
    pub fn new(source: &FeatureSource, mean: MeanSpec, seq: &Sequence) -> Result<Self> {
        Ok(match source {
            FeatureSource::Rgb => Provider::Rgb(match mean {
                MeanSpec::Auto => seq.mean_color(),
                MeanSpec::Fixed(m) => m,
            }),
            FeatureSource::Files(dir) => {
                if !dir.is_dir() {
                    return Err(Error::Data(format!("feature directory {} does not exist", dir.display())));
                }
                Provider::Files(dir.clone())
            }
            FeatureSource::Trained(p) => Provider::Trained(Box::new(ExtractorParams::load(p)?)),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Provider::Rgb(_) => "rgb",
            Provider::Files(_) => "file",
            Provider::Trained(_) => "trained",
        }
    }

    /// Features of a frame and their downscale factor relative to the image.
    pub fn features(&self, frame: &SequenceFrame) -> Result<(FeatureMap<f64>, u32)> {
        let (w, h) = (frame.rgb.width, frame.rgb.height);
        match self {
            Provider::Rgb(mean) => Ok((rgb_features(&frame.rgb, *mean), 1)),
            Provider::Trained(params) => {
                let out = params.extract(&frame.rgb)?;
                let factor = 1u32 << params.config.first_scale();
                Ok((out.output().clone(), factor))
            }
            Provider::Files(dir) => {
                let path = dir.join(format!("{}.fmap", stamp(frame.timestamp)));
                let fm = FeatureMap::load(&path)?;
                let factor = (0..7)
                    .map(|s| 1u32 << s)
                    .find(|&f| w.div_ceil(f as usize) == fm.width() && h.div_ceil(f as usize) == fm.height())
                    .ok_or_else(|| {
                        Error::Dimension(format!(
                            "{}: {}x{} features do not divide the {w}x{h} image by a power of two",
                            path.display(),
                            fm.width(),
                            fm.height()
                        ))
                    })?;
                Ok((fm, factor))
            }
        }
    }
}

/// Loads per-frame features for a set of frames and checks they agree on
/// resolution.
pub(crate) fn features_for(provider: &Provider, frames: &[&SequenceFrame]) -> Result<(Vec<FeatureMap<f64>>, u32)> {
    let mut maps = Vec::with_capacity(frames.len());
    let mut factor = None;
    for f in frames {
        let (fm, s) = provider.features(f)?;
        if factor.is_some_and(|p| p != s) {
            return Err(Error::Dimension(format!("frame {} has features at a different scale", stamp(f.timestamp))));
        }
        factor = Some(s);
        maps.push(fm);
    }
    Ok((maps, factor.unwrap_or(1)))
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}
