use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::features::FeatureMap;
use crate::Real;

/// Square-kernel convolution with zero padding `kernel / 2`.
/// Weights are laid out `[out][ky][kx][in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Transposed convolution, `kernel / 2` padding, output cropped to the
/// requested size. Weights are laid out `[out][ky][kx][in]`: input pixel
/// `i` reaches output `stride * i + k - kernel / 2` through tap `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Deconv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

fn xavier<T: Real>(n: usize, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect()
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y += alpha * x;
    }
}

impl<T: Real> Conv2d<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight: vec![T::zero(); out_channels * kernel * kernel * in_channels],
            bias: vec![T::zero(); out_channels],
        }
    }

    /// Xavier-uniform weights, zero bias.
    pub fn xavier(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let kk = kernel * kernel;
        let mut layer = Self::zeros(in_channels, out_channels, kernel, stride);
        layer.weight = xavier(layer.weight.len(), kk * in_channels, kk * out_channels, rng);
        layer
    }

    pub fn output_size(&self, width: usize, height: usize) -> (usize, usize) {
        let p = self.kernel / 2;
        let f = |n: usize| (n + 2 * p - self.kernel) / self.stride + 1;
        (f(width), f(height))
    }

    #[inline]
    fn tap(&self, o: usize, ky: usize, kx: usize) -> usize {
        ((o * self.kernel + ky) * self.kernel + kx) * self.in_channels
    }

    /// Input coordinate of output `o` under tap `k`, if inside the input.
    #[inline]
    fn source(&self, o: usize, k: usize, n: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(self.kernel / 2).filter(|&i| i < n)
    }

    pub fn forward(&self, input: &FeatureMap<T>) -> FeatureMap<T> {
        assert_eq!(input.channels(), self.in_channels, "conv input channels");
        let (w, h) = (input.width(), input.height());
        let (wo, ho) = self.output_size(w, h);
        let ci = self.in_channels;
        let mut out = FeatureMap::zeros(wo, ho, self.out_channels);
        let data = input.data();
        for oy in 0..ho {
            for ox in 0..wo {
                let px = out.texel_mut(ox, oy);
                px.copy_from_slice(&self.bias);
                for ky in 0..self.kernel {
                    let Some(iy) = self.source(oy, ky, h) else { continue };
                    for kx in 0..self.kernel {
                        let Some(ix) = self.source(ox, kx, w) else { continue };
                        let x = &data[(iy * w + ix) * ci..][..ci];
                        for (o, v) in px.iter_mut().enumerate() {
                            *v += dot(&self.weight[self.tap(o, ky, kx)..][..ci], x);
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns `(d loss / d input, parameter gradient)`.
    pub fn backward(&self, input: &FeatureMap<T>, grad_out: &FeatureMap<T>) -> (FeatureMap<T>, Self) {
        let (w, h) = (input.width(), input.height());
        let (wo, ho) = self.output_size(w, h);
        assert_eq!((grad_out.width(), grad_out.height(), grad_out.channels()), (wo, ho, self.out_channels));
        let ci = self.in_channels;
        let mut grad = Self::zeros(ci, self.out_channels, self.kernel, self.stride);
        let mut grad_in = FeatureMap::zeros(w, h, ci);
        let data = input.data();
        for oy in 0..ho {
            for ox in 0..wo {
                let g = grad_out.texel(ox, oy);
                for (b, &go) in grad.bias.iter_mut().zip(g) {
                    *b += go;
                }
                for ky in 0..self.kernel {
                    let Some(iy) = self.source(oy, ky, h) else { continue };
                    for kx in 0..self.kernel {
                        let Some(ix) = self.source(ox, kx, w) else { continue };
                        let base = (iy * w + ix) * ci;
                        let x = &data[base..][..ci];
                        for (o, &go) in g.iter().enumerate() {
                            if go == T::zero() {
                                continue;
                            }
                            let t = self.tap(o, ky, kx);
                            axpy(go, x, &mut grad.weight[t..t + ci]);
                            axpy(go, &self.weight[t..t + ci], &mut grad_in.data_mut()[base..base + ci]);
                        }
                    }
                }
            }
        }
        (grad_in, grad)
    }
}

impl<T: Real> Deconv2d<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight: vec![T::zero(); out_channels * kernel * kernel * in_channels],
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn xavier(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let kk = kernel * kernel;
        let mut layer = Self::zeros(in_channels, out_channels, kernel, stride);
        layer.weight = xavier(layer.weight.len(), kk * in_channels, kk * out_channels, rng);
        layer
    }

    #[inline]
    fn tap(&self, o: usize, ky: usize, kx: usize) -> usize {
        ((o * self.kernel + ky) * self.kernel + kx) * self.in_channels
    }

    #[inline]
    fn target(&self, i: usize, k: usize, n: usize) -> Option<usize> {
        (i * self.stride + k).checked_sub(self.kernel / 2).filter(|&o| o < n)
    }

    pub fn forward(&self, input: &FeatureMap<T>, out_width: usize, out_height: usize) -> FeatureMap<T> {
        assert_eq!(input.channels(), self.in_channels, "deconv input channels");
        let ci = self.in_channels;
        let mut out = FeatureMap::from_fn(out_width, out_height, self.out_channels, |_, _, o| self.bias[o]);
        for iy in 0..input.height() {
            for ix in 0..input.width() {
                let x = input.texel(ix, iy);
                for ky in 0..self.kernel {
                    let Some(oy) = self.target(iy, ky, out_height) else { continue };
                    for kx in 0..self.kernel {
                        let Some(ox) = self.target(ix, kx, out_width) else { continue };
                        let px = out.texel_mut(ox, oy);
                        for (o, v) in px.iter_mut().enumerate() {
                            *v += dot(&self.weight[self.tap(o, ky, kx)..][..ci], x);
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(&self, input: &FeatureMap<T>, grad_out: &FeatureMap<T>) -> (FeatureMap<T>, Self) {
        let ci = self.in_channels;
        let (wo, ho) = (grad_out.width(), grad_out.height());
        let mut grad = Self::zeros(ci, self.out_channels, self.kernel, self.stride);
        for g in grad_out.data().chunks_exact(self.out_channels) {
            for (b, &go) in grad.bias.iter_mut().zip(g) {
                *b += go;
            }
        }
        let mut grad_in = FeatureMap::zeros(input.width(), input.height(), ci);
        for iy in 0..input.height() {
            for ix in 0..input.width() {
                let x = input.texel(ix, iy);
                for ky in 0..self.kernel {
                    let Some(oy) = self.target(iy, ky, ho) else { continue };
                    for kx in 0..self.kernel {
                        let Some(ox) = self.target(ix, kx, wo) else { continue };
                        let g = grad_out.texel(ox, oy);
                        for (o, &go) in g.iter().enumerate() {
                            if go == T::zero() {
                                continue;
                            }
                            let t = self.tap(o, ky, kx);
                            axpy(go, x, &mut grad.weight[t..t + ci]);
                            axpy(go, &self.weight[t..t + ci], grad_in.texel_mut(ix, iy));
                        }
                    }
                }
            }
        }
        (grad_in, grad)
    }
}

pub(crate) fn relu<T: Real>(fm: &FeatureMap<T>) -> FeatureMap<T> {
    fm.map(|v| v.max(T::zero()))
}

/// Gradient through a ReLU given its pre-activation.
pub(crate) fn relu_backward<T: Real>(pre: &FeatureMap<T>, grad: &mut FeatureMap<T>) {
    for (g, &z) in grad.data_mut().iter_mut().zip(pre.data()) {
        if z <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Replicates the last column/row so both dimensions are even.
pub(crate) fn pad_even<T: Real>(fm: &FeatureMap<T>) -> FeatureMap<T> {
    let (w, h) = (fm.width(), fm.height());
    if w % 2 == 0 && h % 2 == 0 {
        return fm.clone();
    }
    FeatureMap::from_fn(w + w % 2, h + h % 2, fm.channels(), |x, y, c| fm.texel(x.min(w - 1), y.min(h - 1))[c])
}

/// Adjoint of [`pad_even`].
pub(crate) fn pad_even_backward<T: Real>(grad: &FeatureMap<T>, width: usize, height: usize) -> FeatureMap<T> {
    if grad.width() == width && grad.height() == height {
        return grad.clone();
    }
    let c = grad.channels();
    let mut out = FeatureMap::zeros(width, height, c);
    for y in 0..grad.height() {
        for x in 0..grad.width() {
            let src = grad.texel(x, y);
            let dst = out.texel_mut(x.min(width - 1), y.min(height - 1));
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    out
}

/// Channel-wise concatenation of two maps of equal size.
pub(crate) fn concat<T: Real>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> FeatureMap<T> {
    assert_eq!((a.width(), a.height()), (b.width(), b.height()));
    let (ca, cb) = (a.channels(), b.channels());
    let mut data = Vec::with_capacity(a.data().len() + b.data().len());
    for (pa, pb) in a.data().chunks_exact(ca).zip(b.data().chunks_exact(cb)) {
        data.extend_from_slice(pa);
        data.extend_from_slice(pb);
    }
    FeatureMap::from_raw(a.width(), a.height(), ca + cb, data)
}

/// First `channels` channels of a map.
pub(crate) fn leading_channels<T: Real>(fm: &FeatureMap<T>, channels: usize) -> FeatureMap<T> {
    FeatureMap::from_fn(fm.width(), fm.height(), channels, |x, y, c| fm.texel(x, y)[c])
}
