use super::{HomogeneousPoint, Mat3, Vec3};
use crate::{Error, Real, Result};

/// Rigid transform `x' = R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose<T> {
    pub rotation: Mat3<T>,
    pub translation: Vec3<T>,
}

impl<T: Real> Pose<T> {
    pub fn new(rotation: Mat3<T>, translation: Vec3<T>) -> Result<Self> {
        let tol = T::structural_tol();
        let ortho = rotation.orthonormality_error();
        let det = rotation.det();
        if !(ortho <= tol) || !((det - T::one()).abs() <= tol) {
            return Err(Error::Domain(format!(
                "rotation not in SO(3): |RᵀR − I| = {ortho}, det = {det}"
            )));
        }
        if !(translation.x.is_finite() && translation.y.is_finite() && translation.z.is_finite()) {
            return Err(Error::Domain("translation must be finite".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    pub fn from_translation(t: Vec3<T>) -> Self {
        Self { rotation: Mat3::identity(), translation: t }
    }

    pub fn transform_point(&self, p: &Vec3<T>) -> Vec3<T> {
        self.rotation.mul_vec(p) + self.translation
    }

    pub fn transform_homogeneous(&self, p: &HomogeneousPoint<T>) -> HomogeneousPoint<T> {
        HomogeneousPoint {
            xyz: self.rotation.mul_vec(&p.xyz) + self.translation.scale(p.w),
            w: p.w,
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation.mul_mat(&other.rotation),
            translation: self.rotation.mul_vec(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -rt.mul_vec(&self.translation) }
    }

    /// Relative transform from the reference camera into camera `n`, given
    /// both camera-to-world poses: `T_nr = T_wn⁻¹ · T_wr`.
    pub fn relative(world_from_n: &Self, world_from_r: &Self) -> Self {
        world_from_n.inverse().compose(world_from_r)
    }

    /// Builds a pose from a unit quaternion `(qx, qy, qz, qw)`; the
    /// quaternion is normalized first.
    pub fn from_quaternion(q: [T; 4], translation: Vec3<T>) -> Result<Self> {
        let [x, y, z, w] = q;
        let n = (x * x + y * y + z * z + w * w).sqrt();
        if !(n > T::zero()) || !n.is_finite() {
            return Err(Error::Domain("degenerate quaternion".into()));
        }
        let (x, y, z, w) = (x / n, y / n, z / n, w / n);
        let two = T::of(2.0);
        let o = T::one();
        let r = Mat3::from_rows([
            [o - two * (y * y + z * z), two * (x * y - z * w), two * (x * z + y * w)],
            [two * (x * y + z * w), o - two * (x * x + z * z), two * (y * z - x * w)],
            [two * (x * z - y * w), two * (y * z + x * w), o - two * (x * x + y * y)],
        ]);
        Self::new(r, translation)
    }

    /// Unit quaternion `(qx, qy, qz, qw)` with `qw >= 0`.
    pub fn quaternion(&self) -> [T; 4] {
        let m = &self.rotation.m;
        let one = T::one();
        let quarter = T::of(0.25);
        let trace = m[0][0] + m[1][1] + m[2][2];
        let (x, y, z, w);
        if trace > T::zero() {
            let s = (trace + one).sqrt() * T::of(2.0);
            w = quarter * s;
            x = (m[2][1] - m[1][2]) / s;
            y = (m[0][2] - m[2][0]) / s;
            z = (m[1][0] - m[0][1]) / s;
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (one + m[0][0] - m[1][1] - m[2][2]).sqrt() * T::of(2.0);
            w = (m[2][1] - m[1][2]) / s;
            x = quarter * s;
            y = (m[0][1] + m[1][0]) / s;
            z = (m[0][2] + m[2][0]) / s;
        } else if m[1][1] > m[2][2] {
            let s = (one + m[1][1] - m[0][0] - m[2][2]).sqrt() * T::of(2.0);
            w = (m[0][2] - m[2][0]) / s;
            x = (m[0][1] + m[1][0]) / s;
            y = quarter * s;
            z = (m[1][2] + m[2][1]) / s;
        } else {
            let s = (one + m[2][2] - m[0][0] - m[1][1]).sqrt() * T::of(2.0);
            w = (m[1][0] - m[0][1]) / s;
            x = (m[0][2] + m[2][0]) / s;
            y = (m[1][2] + m[2][1]) / s;
            z = quarter * s;
        }
        if w < T::zero() {
            [-x, -y, -z, -w]
        } else {
            [x, y, z, w]
        }
    }

    pub fn cast<U: Real>(&self) -> Pose<U> {
        Pose { rotation: self.rotation.cast(), translation: self.translation.cast() }
    }
}
