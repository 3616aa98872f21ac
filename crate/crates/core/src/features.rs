//! Dense per-pixel descriptor maps, bilinear sampling and the binary
//! feature-map container.

use std::io::Write;
use std::path::Path;

use crate::image::RgbImage;
use crate::{Error, Real, Result};

/// `height × width × channels` descriptors, row-major, channel-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::Dimension(format!("empty feature map {width}x{height}x{channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Dimension(format!(
                "feature map {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite feature value at index {i}")));
        }
        Ok(Self { width, height, channels, data })
    }

    /// No finiteness check; for internal buffers whose shape is known.
    pub(crate) fn from_raw(width: usize, height: usize, channels: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), width * height * channels);
        Self { width, height, channels, data }
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        assert!(width > 0 && height > 0 && channels > 0, "empty feature map");
        Self { width, height, channels, data: vec![T::zero(); width * height * channels] }
    }

    /// Builds a map by evaluating `f(x, y, c)` at every entry.
    pub fn from_fn(width: usize, height: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut m = Self::zeros(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    m.data[(y * width + x) * channels + c] = f(x, y, c);
                }
            }
        }
        m
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn texel(&self, x: usize, y: usize) -> &[T] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn texel_mut(&mut self, x: usize, y: usize) -> &mut [T] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    /// Bilinear sample at `(u, v)`; errors outside `[0, w-1] × [0, h-1]`.
    pub fn sample_bilinear(&self, u: T, v: T) -> Result<Vec<T>> {
        let support = self.support(u, v)?;
        let mut out = vec![T::zero(); self.channels];
        support.blend(self, &mut out);
        Ok(out)
    }

    /// Bilinear sample together with the four support texels and their
    /// weights, which are also the derivatives of the output with respect
    /// to those texels.
    pub fn sample_bilinear_grad(&self, u: T, v: T) -> Result<(Vec<T>, BilinearSupport<T>)> {
        let support = self.support(u, v)?;
        let mut out = vec![T::zero(); self.channels];
        support.blend(self, &mut out);
        Ok((out, support))
    }

    pub fn support(&self, u: T, v: T) -> Result<BilinearSupport<T>> {
        BilinearSupport::new(u, v, self.width, self.height).ok_or_else(|| {
            Error::Domain(format!(
                "sample ({u}, {v}) outside the {}x{} footprint",
                self.width, self.height
            ))
        })
    }

    /// Writes the little-endian `FMAP` container: magic, u32 width, height,
    /// channels, then f32 values row-major, channel-fastest.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + self.data.len() * 4);
        buf.extend_from_slice(FEATURE_MAGIC);
        for d in [self.width, self.height, self.channels] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            buf.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
            return Err(Error::format(path, "missing FMAP header"));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (w, h, c) = (dim(0), dim(1), dim(2));
        let expected = w
            .checked_mul(h)
            .and_then(|n| n.checked_mul(c))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format(path, "header dimensions overflow"))?;
        let payload = &bytes[16..];
        if payload.len() != expected {
            return Err(Error::format(
                path,
                format!("{w}x{h}x{c} header needs {expected} payload bytes, found {}", payload.len()),
            ));
        }
        let data: Vec<T> = payload
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        Self::new(w, h, c, data).map_err(|e| Error::format(path, e.to_string()))
    }
}

pub const FEATURE_MAGIC: &[u8; 4] = b"FMAP";

/// The four texels (possibly repeated at the far border) and weights of a
/// bilinear sample. Weights are nonnegative and sum to one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BilinearSupport<T> {
    /// Flat pixel indices `y * width + x`.
    pub texels: [usize; 4],
    pub weights: [T; 4],
}

impl<T: Real> BilinearSupport<T> {
    #[inline]
    pub fn new(u: T, v: T, width: usize, height: usize) -> Option<Self> {
        let wmax = T::of_usize(width - 1);
        let hmax = T::of_usize(height - 1);
        if !(u >= T::zero() && v >= T::zero() && u <= wmax && v <= hmax) {
            return None;
        }
        let x0 = u.floor();
        let y0 = v.floor();
        let ax = u - x0;
        let ay = v - y0;
        let x0 = x0.to_usize()?;
        let y0 = y0.to_usize()?;
        // At the closed far border the upper neighbour collapses onto x0/y0
        // with zero weight.
        let x1 = (x0 + 1).min(width - 1);
        let y1 = (y0 + 1).min(height - 1);
        let one = T::one();
        Some(Self {
            texels: [y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1],
            weights: [(one - ax) * (one - ay), ax * (one - ay), (one - ax) * ay, ax * ay],
        })
    }

    #[inline]
    pub fn blend(&self, fm: &FeatureMap<T>, out: &mut [T]) {
        let c = fm.channels;
        out.iter_mut().for_each(|o| *o = T::zero());
        for (&t, &w) in self.texels.iter().zip(&self.weights) {
            if w == T::zero() {
                continue;
            }
            let texel = &fm.data[t * c..(t + 1) * c];
            for (o, &f) in out.iter_mut().zip(texel) {
                *o += w * f;
            }
        }
    }

    /// Accumulates `grad_out` (d loss / d sample) into a texel-gradient buffer
    /// with the layout of the sampled map.
    #[inline]
    pub fn scatter(&self, grad_out: &[T], grad_map: &mut [T]) {
        let c = grad_out.len();
        for (&t, &w) in self.texels.iter().zip(&self.weights) {
            if w == T::zero() {
                continue;
            }
            for (g, &d) in grad_map[t * c..(t + 1) * c].iter_mut().zip(grad_out) {
                *g += w * d;
            }
        }
    }
}

/// Mean-subtracted color features (`C = 3`), not rescaled.
pub fn rgb_features<T: Real>(image: &RgbImage, mean: [T; 3]) -> FeatureMap<T> {
    let data = image
        .data
        .chunks_exact(3)
        .flat_map(|px| [0, 1, 2].map(|c| T::of(px[c] as f64) - mean[c]))
        .collect();
    FeatureMap { width: image.width, height: image.height, channels: 3, data }
}

/// Average of each 2×2 block, replicating the last row/column for odd
/// sizes. Equals bilinear sampling at the pixel-center-aligned coarse grid.
pub fn downsample2<T: Real>(fm: &FeatureMap<T>) -> FeatureMap<T> {
    let (w, h, c) = (fm.width, fm.height, fm.channels);
    let (wo, ho) = (w.div_ceil(2), h.div_ceil(2));
    let quarter = T::of(0.25);
    FeatureMap::from_fn(wo, ho, c, |x, y, ch| {
        let x0 = 2 * x;
        let y0 = 2 * y;
        let x1 = (x0 + 1).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        quarter
            * (fm.texel(x0, y0)[ch] + fm.texel(x1, y0)[ch] + fm.texel(x0, y1)[ch] + fm.texel(x1, y1)[ch])
    })
}

/// Multi-scale feature maps; level `s` has `ceil(dims / 2^(first_scale + s))`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    levels: Vec<FeatureMap<T>>,
    first_scale: u32,
}

impl<T: Real> FeaturePyramid<T> {
    pub fn new(levels: Vec<FeatureMap<T>>, first_scale: u32) -> Result<Self> {
        let first = levels.first().ok_or_else(|| Error::Dimension("empty pyramid".into()))?;
        for (s, pair) in levels.windows(2).enumerate() {
            let (fine, coarse) = (&pair[0], &pair[1]);
            if coarse.channels != first.channels
                || coarse.width != fine.width.div_ceil(2)
                || coarse.height != fine.height.div_ceil(2)
            {
                return Err(Error::Dimension(format!(
                    "pyramid level {} is {}x{}x{}, expected half of {}x{}x{}",
                    s + 1,
                    coarse.width,
                    coarse.height,
                    coarse.channels,
                    fine.width,
                    fine.height,
                    first.channels
                )));
            }
        }
        Ok(Self { levels, first_scale })
    }

    pub fn levels(&self) -> &[FeatureMap<T>] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Downscale factor of level `s` relative to the input image.
    pub fn factor(&self, s: usize) -> u32 {
        1 << (self.first_scale + s as u32)
    }
}
