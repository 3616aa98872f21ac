use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Sequence, SequenceFrame};
use crate::geometry::{CameraIntrinsics, Pose, Vec3};
use crate::image::{DepthMap, RgbImage};
use crate::{Error, Result};

/// Sum of random sinusoids over surface coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Waves {
    /// `(kx, ky, phase, amplitude)` per component, per channel.
    components: [Vec<(f64, f64, f64, f64)>; 3],
}

impl Waves {
    fn random(rng: &mut ChaCha8Rng, count: usize, min_wavelength: f64, max_wavelength: f64, amplitude: f64, gray: bool) -> Self {
        let channel = |rng: &mut ChaCha8Rng| {
            (0..count)
                .map(|_| {
                    let angle = rng.random_range(0.0..TAU);
                    let wl = min_wavelength * (max_wavelength / min_wavelength).powf(rng.random_range(0.0..1.0));
                    let k = TAU / wl;
                    (k * angle.cos(), k * angle.sin(), rng.random_range(0.0..TAU), amplitude / (count as f64).sqrt())
                })
                .collect::<Vec<_>>()
        };
        let r = channel(rng);
        if gray {
            Self { components: [r.clone(), r.clone(), r] }
        } else {
            let g = channel(rng);
            let b = channel(rng);
            Self { components: [r, g, b] }
        }
    }

    fn eval(&self, a: f64, b: f64, c: usize) -> f64 {
        self.components[c].iter().map(|&(kx, ky, ph, amp)| amp * (kx * a + ky * b + ph).sin()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Texture {
    /// Band-limited random color texture around mid gray.
    Smooth(Waves),
    /// Gray sinusoidal stripes along the first surface axis with period
    /// `period` (meters), plus an optional faint non-periodic pattern.
    Stripes { period: f64, amplitude: f64, context: Option<Waves> },
}

impl Texture {
    pub fn color(&self, a: f64, b: f64) -> [f64; 3] {
        match self {
            Texture::Smooth(w) => [0, 1, 2].map(|c| 128.0 + w.eval(a, b, c)),
            Texture::Stripes { period, amplitude, context } => {
                let base = 128.0 + amplitude * (TAU * a / period).sin();
                [0, 1, 2].map(|c| base + context.as_ref().map_or(0.0, |w| w.eval(a, b, c)))
            }
        }
    }
}

/// A textured planar patch: `origin + a·axis_u + b·axis_v`, optionally
/// bounded to `|a| ≤ half_extent.0`, `|b| ≤ half_extent.1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Surface {
    pub origin: Vec3<f64>,
    pub axis_u: Vec3<f64>,
    pub axis_v: Vec3<f64>,
    pub half_extent: Option<(f64, f64)>,
    pub texture: Texture,
}

impl Surface {
    /// Ray parameter and surface coordinates of the first hit along
    /// `origin + s·dir`, if any.
    pub fn intersect(&self, origin: &Vec3<f64>, dir: &Vec3<f64>) -> Option<(f64, f64, f64)> {
        let n = self.axis_u.cross(&self.axis_v);
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let s = n.dot(&(self.origin - *origin)) / denom;
        if s <= 0.0 {
            return None;
        }
        let rel = *origin + dir.scale(s) - self.origin;
        let (a, b) = (rel.dot(&self.axis_u), rel.dot(&self.axis_v));
        if let Some((ea, eb)) = self.half_extent {
            if a.abs() > ea || b.abs() > eb {
                return None;
            }
        }
        Some((s, a, b))
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Scene {
    pub surfaces: Vec<Surface>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneKind {
    TexturedPlane,
    RepeatedTexture,
    SteppedBoxes,
}

impl std::fmt::Display for SceneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SceneKind::TexturedPlane => "textured-plane",
            SceneKind::RepeatedTexture => "repeated-texture",
            SceneKind::SteppedBoxes => "stepped-boxes",
        })
    }
}

impl std::str::FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "textured-plane" | "plane" => Ok(SceneKind::TexturedPlane),
            "repeated-texture" | "stripes" => Ok(SceneKind::RepeatedTexture),
            "stepped-boxes" | "boxes" => Ok(SceneKind::SteppedBoxes),
            other => Err(Error::Domain(format!("unknown scene kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub kind: SceneKind,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub frames: usize,
    /// Camera-center displacement between consecutive frames (world frame).
    pub step: Vec3<f64>,
    /// Rotation about the world y axis between consecutive frames, radians.
    pub yaw_step: f64,
    /// Depth of the (background) plane along the optical axis, meters.
    pub plane_depth: f64,
    /// Plane tilt about the vertical axis, radians; 0 is fronto-parallel.
    pub slant: f64,
    /// Stripe period as seen at the plane depth, in pixels.
    pub stripe_period_px: f64,
    pub stripe_amplitude: f64,
    /// Amplitude of the faint non-periodic pattern on striped surfaces.
    pub context_amplitude: f64,
    /// Per-frame additive Gaussian sensor noise (intensity units).
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthParams {
    pub fn new(kind: SceneKind) -> Self {
        Self {
            kind,
            width: 48,
            height: 40,
            focal: 40.0,
            frames: 10,
            step: Vec3::new(0.02, 0.0, 0.0),
            yaw_step: 0.0,
            plane_depth: 2.0,
            slant: 0.0,
            stripe_period_px: 6.0,
            stripe_amplitude: 60.0,
            context_amplitude: 0.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics<f64>> {
        CameraIntrinsics::new(
            self.focal,
            self.focal,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
            self.width,
            self.height,
        )
    }

    /// Camera-to-world pose of frame `i`.
    pub fn pose(&self, i: usize) -> Pose<f64> {
        let rot = crate::geometry::Mat3::rotation(Vec3::new(0.0, 1.0, 0.0), self.yaw_step * i as f64);
        Pose { rotation: rot, translation: self.step.scale(i as f64) }
    }

    /// World-space size of one pixel on the plane.
    fn pixel_footprint(&self) -> f64 {
        self.plane_depth / self.focal
    }

    pub fn scene(&self) -> Result<Scene> {
        if !(self.plane_depth > 0.0) || !(self.focal > 0.0) || self.width < 2 || self.height < 2 {
            return Err(Error::Domain("degenerate synthetic geometry".into()));
        }
        if self.slant.abs() >= std::f64::consts::FRAC_PI_2 - 1e-3 {
            return Err(Error::Domain("plane slant must be below 90 degrees".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let px = self.pixel_footprint();
        let plane = |texture: Texture, depth: f64| Surface {
            origin: Vec3::new(0.0, 0.0, depth),
            axis_u: Vec3::new(self.slant.cos(), 0.0, self.slant.sin()),
            axis_v: Vec3::new(0.0, 1.0, 0.0),
            half_extent: None,
            texture,
        };
        let scene = match self.kind {
            SceneKind::TexturedPlane => {
                let tex = Texture::Smooth(Waves::random(&mut rng, 24, 3.0 * px, 24.0 * px, 70.0, false));
                Scene { surfaces: vec![plane(tex, self.plane_depth)] }
            }
            SceneKind::RepeatedTexture => {
                if !(self.stripe_period_px > 0.0) {
                    return Err(Error::Domain("stripe period must be positive".into()));
                }
                let context = (self.context_amplitude > 0.0).then(|| {
                    let w = self.width.max(self.height) as f64 * px;
                    Waves::random(&mut rng, 6, 0.5 * w, 2.0 * w, self.context_amplitude, true)
                });
                let tex = Texture::Stripes {
                    period: self.stripe_period_px * px,
                    amplitude: self.stripe_amplitude,
                    context,
                };
                Scene { surfaces: vec![plane(tex, self.plane_depth)] }
            }
            SceneKind::SteppedBoxes => {
                let bg = Texture::Smooth(Waves::random(&mut rng, 24, 3.0 * px, 24.0 * px, 70.0, false));
                let mut surfaces = vec![plane(bg, self.plane_depth)];
                let half_w = self.width as f64 / 2.0;
                let half_h = self.height as f64 / 2.0;
                for step in 1..=3 {
                    let depth = self.plane_depth * (1.0 - 0.18 * step as f64);
                    let scale = depth / self.focal;
                    let cx = rng.random_range(-0.5..0.5) * half_w * scale;
                    let cy = rng.random_range(-0.5..0.5) * half_h * scale;
                    let ex = rng.random_range(0.2..0.4) * half_w * scale;
                    let ey = rng.random_range(0.2..0.4) * half_h * scale;
                    let tex = Texture::Smooth(Waves::random(&mut rng, 16, 3.0 * scale, 16.0 * scale, 70.0, false));
                    surfaces.push(Surface {
                        origin: Vec3::new(cx, cy, depth),
                        axis_u: Vec3::new(1.0, 0.0, 0.0),
                        axis_v: Vec3::new(0.0, 1.0, 0.0),
                        half_extent: Some((ex, ey)),
                        texture: tex,
                    });
                }
                Scene { surfaces }
            }
        };
        Ok(scene)
    }
}

/// Ray-casts one frame. Depth is the camera-frame z of the nearest hit;
/// pixels that hit nothing get depth 0 (invalid) and black color.
pub fn render_frame(
    scene: &Scene,
    intr: &CameraIntrinsics<f64>,
    world_from_camera: &Pose<f64>,
    noise_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> (RgbImage, DepthMap<f64>) {
    let (w, h) = (intr.width, intr.height);
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).expect("sigma is finite");
    let mut rgb = Vec::with_capacity(w * h * 3);
    let mut depth = Vec::with_capacity(w * h);
    let center = world_from_camera.translation;
    for y in 0..h {
        for x in 0..w {
            let ray = Vec3::new((x as f64 - intr.cx) / intr.fx, (y as f64 - intr.cy) / intr.fy, 1.0);
            let dir = world_from_camera.rotation.mul_vec(&ray);
            let hit = scene
                .surfaces
                .iter()
                .filter_map(|s| s.intersect(&center, &dir).map(|(t, a, b)| (t, s, a, b)))
                .min_by(|p, q| p.0.total_cmp(&q.0));
            match hit {
                Some((t, surface, a, b)) => {
                    depth.push(t);
                    for c in surface.texture.color(a, b) {
                        let n = if noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                        rgb.push((c + n).round().clamp(0.0, 255.0) as u8);
                    }
                }
                None => {
                    depth.push(0.0);
                    rgb.extend([0, 0, 0]);
                }
            }
        }
    }
    (
        RgbImage::new(w, h, rgb).expect("sized"),
        DepthMap::from_values(w, h, depth).expect("sized"),
    )
}

/// Renders a synthetic RGB-D sequence with exact depth and poses.
pub fn synth_scene(params: &SynthParams) -> Result<Sequence> {
    if params.frames == 0 {
        return Err(Error::Domain("synthetic sequence needs at least one frame".into()));
    }
    let intrinsics = params.intrinsics()?;
    let scene = params.scene()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x9e37_79b9_7f4a_7c15);
    let frames = (0..params.frames)
        .map(|i| {
            let pose = params.pose(i);
            let (rgb, depth) = render_frame(&scene, &intrinsics, &pose, params.noise_sigma, &mut rng);
            SequenceFrame { timestamp: i as f64 / 30.0, rgb, depth, world_from_camera: pose }
        })
        .collect();
    Ok(Sequence { intrinsics, frames })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fronto_parallel_plane_depth_is_exact() {
        let mut p = SynthParams::new(SceneKind::TexturedPlane);
        p.frames = 2;
        let seq = synth_scene(&p).unwrap();
        for f in &seq.frames {
            assert!(f.depth.values.iter().all(|&d| d == 2.0));
            assert_eq!(f.depth.valid_count(), p.width * p.height);
        }
    }

    #[test]
    fn slanted_plane_matches_analytic_intersection() {
        let mut p = SynthParams::new(SceneKind::TexturedPlane);
        p.slant = 0.4;
        p.frames = 3;
        p.yaw_step = 0.02;
        p.step = Vec3::new(0.05, 0.01, -0.02);
        let seq = synth_scene(&p).unwrap();
        let k = seq.intrinsics;
        // Plane through (0,0,d) with normal (−sin, 0, cos) in world coordinates.
        let n = Vec3::new(-p.slant.sin(), 0.0, p.slant.cos());
        for f in &seq.frames {
            let pose = f.world_from_camera;
            for y in 0..p.height {
                for x in 0..p.width {
                    let ray = pose.rotation.mul_vec(&Vec3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0));
                    let z = n.dot(&(Vec3::new(0.0, 0.0, p.plane_depth) - pose.translation)) / n.dot(&ray);
                    assert!((f.depth.values[y * p.width + x] - z).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let mut p = SynthParams::new(SceneKind::SteppedBoxes);
        p.noise_sigma = 3.0;
        p.seed = 42;
        assert_eq!(synth_scene(&p).unwrap(), synth_scene(&p).unwrap());
        p.seed = 43;
        let other = synth_scene(&p).unwrap();
        p.seed = 42;
        assert_ne!(synth_scene(&p).unwrap().frames[0].rgb, other.frames[0].rgb);
    }

    #[test]
    fn stepped_boxes_have_multiple_depths() {
        let p = SynthParams::new(SceneKind::SteppedBoxes);
        let seq = synth_scene(&p).unwrap();
        let mut depths: Vec<f64> = seq.frames[0].depth.values.clone();
        depths.sort_by(f64::total_cmp);
        depths.dedup();
        assert!(depths.len() >= 3, "{depths:?}");
    }

    #[test]
    fn degenerate_geometry_is_rejected() {
        let mut p = SynthParams::new(SceneKind::TexturedPlane);
        p.plane_depth = 0.0;
        assert!(synth_scene(&p).is_err());
        let mut p = SynthParams::new(SceneKind::RepeatedTexture);
        p.slant = 1.6;
        assert!(synth_scene(&p).is_err());
    }
}
