//! Pinhole cameras, rigid poses and sampling along epipolar lines over a
//! discretized inverse-depth range.

mod camera;
mod linalg;
mod pose;

pub use camera::{
    backproject, project, project_homogeneous, CameraIntrinsics, HomogeneousPoint, Projection, Z_EPS,
};
pub use linalg::{Mat3, Vec3};
pub use pose::Pose;

use crate::{Error, Real, Result};

/// Uniform discretization of inverse depth into `k_bins` labels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InverseDepthGrid<T> {
    k_bins: usize,
    rho_min: T,
    rho_max: T,
}

impl<T: Real> InverseDepthGrid<T> {
    pub fn new(k_bins: usize, rho_min: T, rho_max: T) -> Result<Self> {
        if k_bins < 2 {
            return Err(Error::Domain(format!("need at least 2 bins, got {k_bins}")));
        }
        if !(rho_min >= T::zero() && rho_min < rho_max) || !rho_max.is_finite() {
            return Err(Error::Domain(format!("invalid inverse depth range [{rho_min}, {rho_max}]")));
        }
        Ok(Self { k_bins, rho_min, rho_max })
    }

    #[inline]
    pub fn k_bins(&self) -> usize {
        self.k_bins
    }

    #[inline]
    pub fn rho_min(&self) -> T {
        self.rho_min
    }

    #[inline]
    pub fn rho_max(&self) -> T {
        self.rho_max
    }

    #[inline]
    pub fn bin_width(&self) -> T {
        (self.rho_max - self.rho_min) / T::of_usize(self.k_bins - 1)
    }

    /// Center of bin `l`. The end points are returned exactly.
    #[inline]
    pub fn rho(&self, l: usize) -> T {
        debug_assert!(l < self.k_bins);
        if l + 1 == self.k_bins {
            self.rho_max
        } else {
            self.rho_min + T::of_usize(l) * self.bin_width()
        }
    }

    pub fn centers(&self) -> Vec<T> {
        (0..self.k_bins).map(|l| self.rho(l)).collect()
    }

    /// Nearest bin to `rho`; the flag is set when `rho` lay outside the grid
    /// range and was clamped.
    pub fn nearest_bin(&self, rho: T) -> (usize, bool) {
        if rho <= self.rho_min {
            return (0, rho < self.rho_min);
        }
        if rho >= self.rho_max {
            return (self.k_bins - 1, rho > self.rho_max);
        }
        let pos = ((rho - self.rho_min) / self.bin_width()).round();
        let l = pos.to_usize().unwrap_or(0).min(self.k_bins - 1);
        (l, false)
    }

    /// Continuous bin coordinate of `rho` (0 at `rho_min`, `k-1` at `rho_max`).
    #[inline]
    pub fn bin_coordinate(&self, rho: T) -> T {
        (rho - self.rho_min) / self.bin_width()
    }

    pub fn cast<U: Real>(&self) -> InverseDepthGrid<U> {
        InverseDepthGrid { k_bins: self.k_bins, rho_min: U::of(self.rho_min.f64()), rho_max: U::of(self.rho_max.f64()) }
    }
}

impl Default for InverseDepthGrid<f64> {
    fn default() -> Self {
        Self { k_bins: 256, rho_min: 0.0, rho_max: 4.0 }
    }
}

impl Default for InverseDepthGrid<f32> {
    fn default() -> Self {
        Self { k_bins: 256, rho_min: 0.0, rho_max: 4.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpipolarSample<T> {
    pub u: T,
    pub v: T,
    pub in_bounds: bool,
}

/// The epipolar line of one reference pixel in a live camera, parameterized
/// by inverse depth: the transformed point is `R·ray + ρ·t` up to scale.
#[derive(Clone, Copy, Debug)]
pub struct EpipolarLine<T> {
    rotated_ray: Vec3<T>,
    translation: Vec3<T>,
}

impl<T: Real> EpipolarLine<T> {
    pub fn new(u: T, v: T, relative: &Pose<T>, intr_ref: &CameraIntrinsics<T>) -> Self {
        let ray = Vec3::new((u - intr_ref.cx) / intr_ref.fx, (v - intr_ref.cy) / intr_ref.fy, T::one());
        Self { rotated_ray: relative.rotation.mul_vec(&ray), translation: relative.translation }
    }

    #[inline]
    pub fn sample(&self, rho: T, intr_live: &CameraIntrinsics<T>) -> EpipolarSample<T> {
        let p = HomogeneousPoint { xyz: self.rotated_ray + self.translation.scale(rho), w: rho };
        let proj = project_homogeneous(&p, intr_live);
        EpipolarSample { u: proj.u, v: proj.v, in_bounds: proj.valid }
    }
}

/// One sample per grid bin: the projection into the live camera of the
/// reference pixel back-projected at each bin's inverse depth. Out-of-bounds
/// samples are flagged, never clamped.
pub fn epipolar_samples<T: Real>(
    u: T,
    v: T,
    grid: &InverseDepthGrid<T>,
    relative: &Pose<T>,
    intr_ref: &CameraIntrinsics<T>,
    intr_live: &CameraIntrinsics<T>,
) -> Result<Vec<EpipolarSample<T>>> {
    if !intr_ref.contains(u, v) {
        return Err(Error::Domain(format!("pixel ({u}, {v}) outside the reference image")));
    }
    let line = EpipolarLine::new(u, v, relative, intr_ref);
    Ok((0..grid.k_bins()).map(|l| line.sample(grid.rho(l), intr_live)).collect())
}
