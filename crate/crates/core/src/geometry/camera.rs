use std::path::Path;

use crate::{Error, Real, Result};

/// Pinhole intrinsics. Integer pixel `(i, j)` sits at continuous coordinate
/// `(i, j)`; the bilinear footprint covers `[0, width-1] x [0, height-1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics<T> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Real> CameraIntrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: usize, height: usize) -> Result<Self> {
        if !(fx > T::zero() && fy > T::zero()) || !fx.is_finite() || !fy.is_finite() {
            return Err(Error::Domain(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        if !cx.is_finite() || !cy.is_finite() {
            return Err(Error::Domain("principal point must be finite".into()));
        }
        if width < 2 || height < 2 {
            return Err(Error::Domain(format!("image must be at least 2x2, got {width}x{height}")));
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    /// Whether `(u, v)` lies inside the closed bilinear footprint.
    #[inline]
    pub fn contains(&self, u: T, v: T) -> bool {
        u >= T::zero()
            && v >= T::zero()
            && u <= T::of_usize(self.width - 1)
            && v <= T::of_usize(self.height - 1)
    }

    /// Intrinsics for an image downscaled by a power-of-two `factor`.
    /// Odd sizes round up, matching the replicate-padding rule of the
    /// feature extractor.
    pub fn scaled(&self, factor: u32) -> Result<Self> {
        if factor < 1 || !factor.is_power_of_two() {
            return Err(Error::Domain(format!("scale factor must be a power of two >= 1, got {factor}")));
        }
        let f = T::of(factor as f64);
        let half = T::of(0.5);
        let f_us = factor as usize;
        Self::new(
            self.fx / f,
            self.fy / f,
            (self.cx + half) / f - half,
            (self.cy + half) / f - half,
            self.width.div_ceil(f_us),
            self.height.div_ceil(f_us),
        )
    }

    pub fn cast<U: Real>(&self) -> CameraIntrinsics<U> {
        CameraIntrinsics {
            fx: U::of(self.fx.f64()),
            fy: U::of(self.fy.f64()),
            cx: U::of(self.cx.f64()),
            cy: U::of(self.cy.f64()),
            width: self.width,
            height: self.height,
        }
    }

    /// Parses `fx fy cx cy width height` (whitespace separated, `#` comments allowed).
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let tokens: Vec<&str> = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace)
            .collect();
        if tokens.len() != 6 {
            return Err(Error::format(path, format!("expected 6 values, found {}", tokens.len())));
        }
        let real = |s: &str| {
            s.parse::<f64>()
                .map(T::of)
                .map_err(|_| Error::format(path, format!("bad number {s:?}")))
        };
        let int = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::format(path, format!("bad image size {s:?}")))
        };
        Self::new(
            real(tokens[0])?,
            real(tokens[1])?,
            real(tokens[2])?,
            real(tokens[3])?,
            int(tokens[4])?,
            int(tokens[5])?,
        )
        .map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        format!(
            "{} {} {} {} {} {}\n",
            self.fx.f64(),
            self.fy.f64(),
            self.cx.f64(),
            self.cy.f64(),
            self.width,
            self.height
        )
    }
}

/// Homogeneous scene point `(xyz, w)`; the Euclidean point is `xyz / w`.
/// `w = 0` encodes a point at infinity along direction `xyz`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HomogeneousPoint<T> {
    pub xyz: super::Vec3<T>,
    pub w: T,
}

impl<T: Real> HomogeneousPoint<T> {
    pub fn is_at_infinity(&self) -> bool {
        self.w == T::zero()
    }

    pub fn to_euclidean(&self) -> Option<super::Vec3<T>> {
        if self.is_at_infinity() {
            None
        } else {
            Some(self.xyz.scale(T::one() / self.w))
        }
    }
}

/// Near-plane cutoff for projection, in meters.
pub const Z_EPS: f64 = 1e-6;

/// Back-projects pixel `(u, v)` at inverse depth `rho` into the camera frame.
pub fn backproject<T: Real>(u: T, v: T, rho: T, intr: &CameraIntrinsics<T>) -> Result<HomogeneousPoint<T>> {
    if rho < T::zero() || !rho.is_finite() {
        return Err(Error::Domain(format!("inverse depth must be >= 0, got {rho}")));
    }
    if !intr.contains(u, v) {
        return Err(Error::Domain(format!("pixel ({u}, {v}) outside the image")));
    }
    let ray = super::Vec3::new((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, T::one());
    Ok(HomogeneousPoint { xyz: ray, w: rho })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection<T> {
    pub u: T,
    pub v: T,
    pub valid: bool,
}

/// Projects a homogeneous point. Invalid when behind or too close to the
/// camera, or outside the bilinear footprint.
#[inline]
pub fn project_homogeneous<T: Real>(p: &HomogeneousPoint<T>, intr: &CameraIntrinsics<T>) -> Projection<T> {
    let z = p.xyz.z;
    // z / w > Z_EPS for finite points; directions only need to face forward.
    let in_front = if p.w > T::zero() {
        z > T::of(Z_EPS) * p.w
    } else {
        z > T::of(Z_EPS)
    };
    if !in_front {
        return Projection { u: T::nan(), v: T::nan(), valid: false };
    }
    let u = intr.fx * p.xyz.x / z + intr.cx;
    let v = intr.fy * p.xyz.y / z + intr.cy;
    Projection { u, v, valid: intr.contains(u, v) }
}

#[inline]
pub fn project<T: Real>(p: &super::Vec3<T>, intr: &CameraIntrinsics<T>) -> Projection<T> {
    project_homogeneous(&HomogeneousPoint { xyz: *p, w: T::one() }, intr)
}
