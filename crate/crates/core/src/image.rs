//! Plain image containers and PNG/PPM ingestion.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::{Error, Real, Result};

/// 8-bit RGB image, row-major, channel-fastest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::Dimension(format!(
                "rgb image {width}x{height} needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Reads any PNG or PPM the `image` crate understands, converted to RGB8.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image { path: path.into(), source })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(w as usize, h as usize, img.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: ImageBuffer<Rgb<u8>, _> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .expect("buffer size checked at construction");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image { path: path.into(), source })
    }

    /// Per-channel mean over all pixels.
    pub fn channel_mean(&self) -> [f64; 3] {
        let mut acc = [0f64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += px[c] as f64;
            }
        }
        let n = (self.width * self.height) as f64;
        acc.map(|a| a / n)
    }
}

/// Dense per-pixel scalar map with an explicit validity mask. Used for
/// metric depth (meters) and inverse depth (1/m).
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap<T> {
    pub width: usize,
    pub height: usize,
    pub values: Vec<T>,
    pub valid: Vec<bool>,
}

impl<T: Real> DepthMap<T> {
    pub fn new(width: usize, height: usize, values: Vec<T>, valid: Vec<bool>) -> Result<Self> {
        let n = width * height;
        if n == 0 || values.len() != n || valid.len() != n {
            return Err(Error::Dimension(format!(
                "depth map {width}x{height} with {} values and {} mask entries",
                values.len(),
                valid.len()
            )));
        }
        Ok(Self { width, height, values, valid })
    }

    /// Marks zero, negative or non-finite values invalid.
    pub fn from_values(width: usize, height: usize, values: Vec<T>) -> Result<Self> {
        let valid = values.iter().map(|&v| v > T::zero() && v.is_finite()).collect();
        Self::new(width, height, values, valid)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<T> {
        let i = y * self.width + x;
        self.valid[i].then(|| self.values[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Inverse of every valid value; values at or below zero become invalid.
    pub fn reciprocal(&self) -> Self {
        let mut out = self.clone();
        for (v, ok) in out.values.iter_mut().zip(out.valid.iter_mut()) {
            if *ok && *v > T::zero() {
                *v = T::one() / *v;
            } else {
                *ok = false;
                *v = T::zero();
            }
        }
        out
    }

    /// Nearest-neighbour downsampling by a power-of-two factor; the output
    /// pixel `x` takes input pixel `floor((x + 0.5)·factor)`, clamped.
    pub fn downsample_nearest(&self, factor: usize) -> Self {
        if factor == 1 {
            return self.clone();
        }
        let w = self.width.div_ceil(factor);
        let h = self.height.div_ceil(factor);
        let pick = |x: usize, n: usize| ((x * factor) + factor / 2).min(n - 1);
        let mut values = Vec::with_capacity(w * h);
        let mut valid = Vec::with_capacity(w * h);
        for y in 0..h {
            let sy = pick(y, self.height);
            for x in 0..w {
                let i = sy * self.width + pick(x, self.width);
                values.push(self.values[i]);
                valid.push(self.valid[i]);
            }
        }
        Self { width: w, height: h, values, valid }
    }

    /// Reads a 16-bit PNG storing `value · scale`; zero marks invalid pixels.
    pub fn load_png16(path: &Path, scale: f64) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image { path: path.into(), source })?;
        let img = match img {
            image::DynamicImage::ImageLuma16(b) => b,
            other => {
                return Err(Error::format(
                    path,
                    format!("expected 16-bit single channel PNG, got {:?}", other.color()),
                ))
            }
        };
        let (w, h) = img.dimensions();
        let raw = img.into_raw();
        let values = raw.iter().map(|&v| T::of(v as f64 / scale)).collect();
        let valid = raw.iter().map(|&v| v != 0).collect();
        Self::new(w as usize, h as usize, values, valid)
    }

    /// Writes `round(value · scale)` as a 16-bit PNG; invalid pixels become 0
    /// and values beyond the 16-bit range saturate.
    pub fn save_png16(&self, path: &Path, scale: f64) -> Result<()> {
        let raw: Vec<u16> = self
            .values
            .iter()
            .zip(&self.valid)
            .map(|(&v, &ok)| {
                if ok && v.is_finite() {
                    (v.f64() * scale).round().clamp(0.0, u16::MAX as f64) as u16
                } else {
                    0
                }
            })
            .collect();
        let buf: ImageBuffer<Luma<u16>, _> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, raw).expect("size checked");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image { path: path.into(), source })
    }

    pub fn cast<U: Real>(&self) -> DepthMap<U> {
        DepthMap {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|v| U::of(v.f64())).collect(),
            valid: self.valid.clone(),
        }
    }
}
