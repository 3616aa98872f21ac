use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{concat, leading_channels, pad_even, pad_even_backward, relu, relu_backward, Conv2d, Deconv2d};
use crate::features::{downsample2, rgb_features, FeatureMap, FeaturePyramid};
use crate::image::RgbImage;
use crate::{Error, Real, Result};

pub const INPUT_CHANNELS: usize = 3;
pub const CONV_KERNEL: usize = 3;
pub const DECONV_KERNEL: usize = 5;
pub const PARAMS_MAGIC: &[u8; 4] = b"DMXP";
const PARAMS_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExtractorConfig {
    pub blocks: usize,
    pub channels: usize,
    /// Stride of the first block, 1 or 2. Later blocks always halve.
    pub first_stride: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self { blocks: 3, channels: 8, first_stride: 1 }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.channels == 0 {
            return Err(Error::Domain("extractor needs at least one block and one channel".into()));
        }
        if self.first_stride != 1 && self.first_stride != 2 {
            return Err(Error::Domain(format!("first block stride must be 1 or 2, got {}", self.first_stride)));
        }
        Ok(())
    }

    /// Scale exponent of block 0 relative to the image.
    pub fn first_scale(&self) -> u32 {
        (self.first_stride == 2) as u32
    }

    pub fn tap_count(&self) -> usize {
        self.blocks + 1
    }

    pub fn tap_names(&self) -> Vec<String> {
        (0..self.blocks).map(|b| format!("s{b}")).chain(["agg".to_string()]).collect()
    }
}

/// Per-block outputs plus the optional top-down aggregate at block 0's
/// resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleFeatures<T> {
    pub pyramid: FeaturePyramid<T>,
    pub aggregated: Option<FeatureMap<T>>,
}

impl<T: Real> MultiScaleFeatures<T> {
    pub fn single(fm: FeatureMap<T>) -> Self {
        Self { pyramid: FeaturePyramid::new(vec![fm], 0).expect("one level"), aggregated: None }
    }

    /// `(feature map, downscale factor)` per tap: pyramid levels then the
    /// aggregate.
    pub fn taps(&self) -> Vec<(&FeatureMap<T>, u32)> {
        let mut taps: Vec<_> = self.pyramid.levels().iter().enumerate().map(|(s, f)| (f, self.pyramid.factor(s))).collect();
        if let Some(a) = &self.aggregated {
            taps.push((a, self.pyramid.factor(0)));
        }
        taps
    }

    /// The map used for inference: the aggregate if present, else the
    /// finest level.
    pub fn output(&self) -> &FeatureMap<T> {
        self.aggregated.as_ref().unwrap_or(&self.pyramid.levels()[0])
    }
}

/// Loss gradient for each tap, in the order of [`MultiScaleFeatures::taps`].
/// `None` means zero.
#[derive(Clone, Debug, Default)]
pub struct TapGradients<T> {
    pub taps: Vec<Option<FeatureMap<T>>>,
}

struct BlockCache<T> {
    input_size: (usize, usize),
    x: FeatureMap<T>,
    z1: FeatureMap<T>,
    a1: FeatureMap<T>,
    z2: FeatureMap<T>,
    a2: FeatureMap<T>,
}

/// Activations kept for the backward pass.
pub struct ForwardCache<T> {
    blocks: Vec<BlockCache<T>>,
    aggregates: Vec<FeatureMap<T>>,
}

impl<T: Real> ForwardCache<T> {
    /// Which ReLU inputs were positive, over all blocks. The network is
    /// smooth in its parameters wherever this pattern does not change.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.blocks
            .iter()
            .flat_map(|b| b.z1.data().iter().chain(b.z2.data()))
            .map(|&z| z > T::zero())
            .collect()
    }
}

/// Weights of the multi-scale extractor. Block `b` is three 3×3
/// convolutions (ReLU after the first two); its input is the previous
/// block's output concatenated with the image at that resolution. The
/// aggregate runs top-down, `A_b = F_b + deconv(A_{b+1})`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorParams<T> {
    pub config: ExtractorConfig,
    pub convs: Vec<Conv2d<T>>,
    pub deconvs: Vec<Deconv2d<T>>,
    /// Per-channel color mean subtracted from input images.
    pub input_mean: [f64; 3],
}

impl<T: Real> ExtractorParams<T> {
    fn build(
        config: ExtractorConfig,
        input_mean: [f64; 3],
        mut conv: impl FnMut(usize, usize, usize) -> Conv2d<T>,
        mut deconv: impl FnMut(usize) -> Deconv2d<T>,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let mut convs = Vec::with_capacity(3 * config.blocks);
        for b in 0..config.blocks {
            let cin = if b == 0 { INPUT_CHANNELS } else { c + INPUT_CHANNELS };
            let stride = if b == 0 { config.first_stride } else { 2 };
            convs.push(conv(cin, c, stride));
            convs.push(conv(c, c, 1));
            convs.push(conv(c, c, 1));
        }
        let deconvs = (1..config.blocks).map(|_| deconv(c)).collect();
        Ok(Self { config, convs, deconvs, input_mean })
    }

    pub fn zeros(config: ExtractorConfig, input_mean: [f64; 3]) -> Result<Self> {
        Self::build(
            config,
            input_mean,
            |i, o, s| Conv2d::zeros(i, o, CONV_KERNEL, s),
            |c| Deconv2d::zeros(c, c, DECONV_KERNEL, 2),
        )
    }

    /// Xavier-uniform initialization from a seeded generator.
    pub fn xavier(config: ExtractorConfig, input_mean: [f64; 3], seed: u64) -> Result<Self> {
        let rng = std::cell::RefCell::new(ChaCha8Rng::seed_from_u64(seed));
        Self::build(
            config,
            input_mean,
            |i, o, s| Conv2d::xavier(i, o, CONV_KERNEL, s, &mut rng.borrow_mut()),
            |c| Deconv2d::xavier(c, c, DECONV_KERNEL, 2, &mut rng.borrow_mut()),
        )
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config, self.input_mean).expect("validated config")
    }

    fn slices(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = Vec::new();
        for c in &self.convs {
            v.push(&c.weight);
            v.push(&c.bias);
        }
        for d in &self.deconvs {
            v.push(&d.weight);
            v.push(&d.bias);
        }
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut v: Vec<&mut [T]> = Vec::new();
        for c in &mut self.convs {
            v.push(&mut c.weight);
            v.push(&mut c.bias);
        }
        for d in &mut self.deconvs {
            v.push(&mut d.weight);
            v.push(&mut d.bias);
        }
        v
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// All parameters in a fixed order.
    pub fn flatten(&self) -> Vec<T> {
        self.slices().concat()
    }

    pub fn set_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Dimension(format!("{} values for {} parameters", values.len(), self.num_params())));
        }
        let mut rest = values;
        for s in self.slices_mut() {
            let (head, tail) = rest.split_at(s.len());
            s.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    /// Mean-subtracted color features of an image, the network input.
    pub fn input_features(&self, image: &RgbImage) -> FeatureMap<T> {
        rgb_features(image, self.input_mean.map(T::of))
    }

    pub fn extract(&self, image: &RgbImage) -> Result<MultiScaleFeatures<T>> {
        Ok(self.forward(&self.input_features(image))?.0)
    }

    pub fn forward(&self, input: &FeatureMap<T>) -> Result<(MultiScaleFeatures<T>, ForwardCache<T>)> {
        if input.channels() != INPUT_CHANNELS {
            return Err(Error::Dimension(format!("extractor input has {} channels, expected 3", input.channels())));
        }
        let fs = self.config.first_scale();
        let coarsest = 1usize << (fs as usize + self.config.blocks - 1);
        if input.width().div_ceil(coarsest) < 2 || input.height().div_ceil(coarsest) < 2 {
            return Err(Error::Dimension(format!(
                "{}x{} input is too small for {} blocks",
                input.width(),
                input.height(),
                self.config.blocks
            )));
        }
        let mut images = vec![input.clone()];
        let mut blocks = Vec::with_capacity(self.config.blocks);
        let mut outputs: Vec<FeatureMap<T>> = Vec::with_capacity(self.config.blocks);
        for b in 0..self.config.blocks {
            let block_input = if b == 0 {
                input.clone()
            } else {
                let level = fs as usize + b - 1;
                while images.len() <= level {
                    let next = downsample2(images.last().expect("nonempty"));
                    images.push(next);
                }
                concat(&outputs[b - 1], &images[level])
            };
            let convs = &self.convs[3 * b..3 * b + 3];
            let x = if convs[0].stride == 2 { pad_even(&block_input) } else { block_input.clone() };
            let z1 = convs[0].forward(&x);
            let a1 = relu(&z1);
            let z2 = convs[1].forward(&a1);
            let a2 = relu(&z2);
            outputs.push(convs[2].forward(&a2));
            blocks.push(BlockCache { input_size: (block_input.width(), block_input.height()), x, z1, a1, z2, a2 });
        }

        let last = self.config.blocks - 1;
        let mut aggregates = vec![outputs[last].clone()];
        for b in (0..last).rev() {
            let fine = &outputs[b];
            let up = self.deconvs[b].forward(aggregates.last().expect("nonempty"), fine.width(), fine.height());
            let mut a = fine.clone();
            for (v, &u) in a.data_mut().iter_mut().zip(up.data()) {
                *v += u;
            }
            aggregates.push(a);
        }
        aggregates.reverse();
        let features = MultiScaleFeatures {
            pyramid: FeaturePyramid::new(outputs, fs)?,
            aggregated: Some(aggregates[0].clone()),
        };
        if features.taps().iter().any(|(f, _)| f.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical("extractor produced non-finite features".into()));
        }
        Ok((features, ForwardCache { blocks, aggregates }))
    }

    /// Parameter gradient of a loss whose gradient with respect to each tap
    /// is given.
    pub fn backward(&self, cache: &ForwardCache<T>, grads: &TapGradients<T>) -> Result<Self> {
        let nb = self.config.blocks;
        if grads.taps.len() != nb + 1 {
            return Err(Error::Dimension(format!("{} tap gradients for {} taps", grads.taps.len(), nb + 1)));
        }
        let mut grad = self.zeros_like();
        let shape = |b: usize| {
            let f = &cache.aggregates[b];
            (f.width(), f.height(), f.channels())
        };
        let zeros = |b: usize| {
            let (w, h, c) = shape(b);
            FeatureMap::zeros(w, h, c)
        };
        let mut d_out: Vec<FeatureMap<T>> = (0..nb).map(|b| grads.taps[b].clone().unwrap_or_else(|| zeros(b))).collect();
        for (b, g) in d_out.iter().enumerate() {
            let (w, h, c) = shape(b);
            if (g.width(), g.height(), g.channels()) != (w, h, c) {
                return Err(Error::Dimension(format!("tap {b} gradient has the wrong shape")));
            }
        }

        // Top-down aggregation: A_b feeds F_b's gradient and A_{b+1} via the
        // deconvolution.
        let mut d_agg = grads.taps[nb].clone().unwrap_or_else(|| zeros(0));
        for b in 0..nb - 1 {
            add_into(&mut d_out[b], &d_agg);
            let (d_next, g) = self.deconvs[b].backward(&cache.aggregates[b + 1], &d_agg);
            grad.deconvs[b] = g;
            d_agg = d_next;
        }
        add_into(&mut d_out[nb - 1], &d_agg);

        for b in (0..nb).rev() {
            let bc = &cache.blocks[b];
            let convs = &self.convs[3 * b..3 * b + 3];
            let (mut d_a2, g3) = convs[2].backward(&bc.a2, &d_out[b]);
            relu_backward(&bc.z2, &mut d_a2);
            let (mut d_a1, g2) = convs[1].backward(&bc.a1, &d_a2);
            relu_backward(&bc.z1, &mut d_a1);
            let (d_x, g1) = convs[0].backward(&bc.x, &d_a1);
            grad.convs[3 * b] = g1;
            grad.convs[3 * b + 1] = g2;
            grad.convs[3 * b + 2] = g3;
            if b > 0 {
                let d_input = pad_even_backward(&d_x, bc.input_size.0, bc.input_size.1);
                let d_prev = leading_channels(&d_input, self.config.channels);
                add_into(&mut d_out[b - 1], &d_prev);
            }
        }
        Ok(grad)
    }

    /// Little-endian container: magic, version, blocks, channels, first
    /// stride, input mean (f64), parameter count (u64), f32 parameters.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(52 + 4 * self.num_params());
        out.extend_from_slice(PARAMS_MAGIC);
        for v in [PARAMS_VERSION, self.config.blocks as u32, self.config.channels as u32, self.config.first_stride as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for m in self.input_mean {
            out.extend_from_slice(&m.to_le_bytes());
        }
        out.extend_from_slice(&(self.num_params() as u64).to_le_bytes());
        for v in self.flatten() {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::format(path, msg);
        if bytes.len() < 52 || &bytes[..4] != PARAMS_MAGIC {
            return Err(bad("not an extractor parameter file"));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        if u32_at(4) != PARAMS_VERSION {
            return Err(bad(&format!("unsupported version {}", u32_at(4))));
        }
        let config =
            ExtractorConfig { blocks: u32_at(8) as usize, channels: u32_at(12) as usize, first_stride: u32_at(16) as usize };
        let mean = [0, 1, 2].map(|k| f64::from_le_bytes(bytes[20 + 8 * k..28 + 8 * k].try_into().expect("8 bytes")));
        let count = u64::from_le_bytes(bytes[44..52].try_into().expect("8 bytes"));
        let mut params = Self::zeros(config, mean).map_err(|e| bad(&e.to_string()))?;
        if count != params.num_params() as u64 {
            return Err(bad(&format!("{count} parameters for a network with {}", params.num_params())));
        }
        let payload = &bytes[52..];
        if payload.len() != 4 * params.num_params() {
            return Err(bad(&format!("payload is {} bytes, expected {}", payload.len(), 4 * params.num_params())));
        }
        let values: Vec<T> = payload
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite parameter"));
        }
        params.set_flat(&values)?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn cast<U: Real>(&self) -> ExtractorParams<U> {
        let mut out = ExtractorParams::<U>::zeros(self.config, self.input_mean).expect("validated config");
        let flat: Vec<U> = self.flatten().iter().map(|v| U::of(v.f64())).collect();
        out.set_flat(&flat).expect("same shape");
        out
    }
}

fn add_into<T: Real>(acc: &mut FeatureMap<T>, x: &FeatureMap<T>) {
    for (a, &b) in acc.data_mut().iter_mut().zip(x.data()) {
        *a += b;
    }
}
