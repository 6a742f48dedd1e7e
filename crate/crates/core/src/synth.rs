//! Synthetic planar scenes with exact depth and poses, textured by a band-limited field
//! defined on world coordinates.

use nalgebra::{Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::features::FeaturePyramid;
use crate::geometry::{exp_coords, se3_exp, CameraIntrinsics, Pixel, SE3Pose, Twist};
use crate::raster::Raster;

/// Plane `n·X = h` in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: [f64; 3],
    pub offset: f64,
}

impl Plane {
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let n = Vector3::from(self.normal);
        let den = n.dot(dir);
        if den.abs() < 1e-12 {
            return None;
        }
        let lambda = (self.offset - n.dot(origin)) / den;
        (lambda > 0.0).then_some(lambda)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SceneKind {
    FrontoParallel { depth: f64 },
    Slanted { plane: Plane },
    /// A near plane covering world `x ≥ split_x` in front of a far plane.
    TwoPlaneStep { near: f64, far: f64, split_x: f64 },
}

impl SceneKind {
    /// Slanted plane (tilted about the camera x axis) whose depth under the identity pose
    /// spans `[near, far]` from the bottom to the top image row.
    pub fn slanted_for_range(k: &CameraIntrinsics, height: usize, near: f64, far: f64) -> Result<Self> {
        if !(near > 0.0 && far > near) {
            return Err(Error::invalid(format!("depth range [{near}, {far}] is invalid")));
        }
        let top = k.unproject(&Pixel::center_of(0, 0)).y;
        let bottom = k.unproject(&Pixel::center_of(0, height - 1)).y;
        // n·r = ny·r_y + nz with h = 1: depth 1/(n·r).
        let ny = (1.0 / near - 1.0 / far) / (bottom - top);
        let nz = 1.0 / far - ny * top;
        Ok(SceneKind::Slanted {
            plane: Plane {
                normal: [0.0, ny, nz],
                offset: 1.0,
            },
        })
    }

    fn depth_along(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        match self {
            SceneKind::FrontoParallel { depth } => Plane {
                normal: [0.0, 0.0, 1.0],
                offset: *depth,
            }
            .intersect(origin, dir),
            SceneKind::Slanted { plane } => plane.intersect(origin, dir),
            SceneKind::TwoPlaneStep { near, far, split_x } => {
                let near_plane = Plane {
                    normal: [0.0, 0.0, 1.0],
                    offset: *near,
                };
                if let Some(l) = near_plane.intersect(origin, dir) {
                    if (origin + dir * l).x >= *split_x {
                        return Some(l);
                    }
                }
                Plane {
                    normal: [0.0, 0.0, 1.0],
                    offset: *far,
                }
                .intersect(origin, dir)
            }
        }
    }
}

/// How world points are mapped to texture coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureMapping {
    /// Solid texture over `(X, Y, Z)`; wavelengths in world units.
    Solid,
    /// Painted by central projection from the world origin, `(X/Z, Y/Z)`; wavelengths in
    /// normalized image units of a camera at the origin.
    Projective,
}

/// Sum of sinusoids over world points, rescaled into `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureSpec {
    pub seed: u64,
    pub mapping: TextureMapping,
    pub channels: usize,
    pub components: usize,
    /// World-unit wavelength range of the components.
    pub min_wavelength: f64,
    pub max_wavelength: f64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        TextureSpec {
            seed: 0,
            mapping: TextureMapping::Projective,
            channels: 1,
            components: 8,
            min_wavelength: 0.25,
            max_wavelength: 0.5,
        }
    }
}

impl TextureSpec {
    /// Sixteen smooth channels, near-affine over the image so bilinear sampling is almost exact.
    pub fn default_features(seed: u64) -> Self {
        TextureSpec {
            seed,
            mapping: TextureMapping::Projective,
            channels: 16,
            components: 8,
            min_wavelength: 16.0,
            max_wavelength: 32.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Texture {
    mapping: TextureMapping,
    /// Per channel: (wave vector, phase, amplitude).
    waves: Vec<Vec<(Vector3<f64>, f64, f64)>>,
}

impl Texture {
    fn new(spec: &TextureSpec) -> Result<Self> {
        if spec.channels == 0 || spec.components == 0 {
            return Err(Error::invalid("texture needs at least one channel and component"));
        }
        if !(spec.min_wavelength > 0.0 && spec.max_wavelength >= spec.min_wavelength) {
            return Err(Error::invalid("texture wavelength range is invalid"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let waves = (0..spec.channels)
            .map(|_| {
                (0..spec.components)
                    .map(|_| {
                        let dir = loop {
                            let mut v: Vector3<f64> = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
                            if spec.mapping == TextureMapping::Projective {
                                v.z = 0.0;
                            }
                            if v.norm() > 1e-6 {
                                break v.normalize();
                            }
                        };
                        let lambda = rng.random_range(spec.min_wavelength..=spec.max_wavelength);
                        let phase = rng.random_range(0.0..std::f64::consts::TAU);
                        let amp = rng.random_range(0.5..1.0);
                        (dir * (std::f64::consts::TAU / lambda), phase, amp)
                    })
                    .collect()
            })
            .collect();
        Ok(Texture {
            mapping: spec.mapping,
            waves,
        })
    }

    fn eval(&self, ch: usize, x: &Vector3<f64>) -> f64 {
        let x = match self.mapping {
            TextureMapping::Solid => *x,
            TextureMapping::Projective => Vector3::new(x.x / x.z, x.y / x.z, 0.0),
        };
        let w = &self.waves[ch];
        let total: f64 = w.iter().map(|(_, _, a)| a).sum();
        let s: f64 = w.iter().map(|(k, p, a)| a * (k.dot(&x) + p).sin()).sum();
        0.5 + 0.5 * s / total
    }
}

/// Scene geometry, texture, camera and per-frame camera-to-world poses (as twists).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub scene: SceneKind,
    /// Texture of the rendered images.
    pub texture: TextureSpec,
    /// Texture of the view-consistent feature pyramid from [`render_feature_pyramid`].
    pub features: TextureSpec,
    pub intrinsics: CameraIntrinsics,
    pub width: usize,
    pub height: usize,
    pub trajectory: Vec<Twist>,
}

/// Lateral baseline between consecutive frames of the default trajectory.
pub const DEFAULT_BASELINE: f64 = 0.6;

impl SceneSpec {
    /// 64×64 slanted plane over depths `[5, 20]` seen from `frames` cameras on a lateral line.
    pub fn default_scene(frames: usize, seed: u64) -> Self {
        let k = CameraIntrinsics::new(64.0, 64.0, 32.0, 32.0).expect("valid intrinsics");
        SceneSpec {
            scene: SceneKind::slanted_for_range(&k, 64, 5.0, 20.0).expect("valid range"),
            texture: TextureSpec {
                seed,
                ..TextureSpec::default()
            },
            features: TextureSpec::default_features(seed.wrapping_add(1)),
            intrinsics: k,
            width: 64,
            height: 64,
            trajectory: lateral_trajectory(frames, DEFAULT_BASELINE, 0.0, 0.0, seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("scene image size must be positive"));
        }
        Texture::new(&self.texture)?;
        Texture::new(&self.features)?;
        match &self.scene {
            SceneKind::FrontoParallel { depth } if !(*depth > 0.0) => {
                Err(Error::invalid("fronto-parallel depth must be positive"))
            }
            SceneKind::TwoPlaneStep { near, far, .. } if !(*near > 0.0 && far > near) => {
                Err(Error::invalid("step scene needs 0 < near < far"))
            }
            _ => Ok(()),
        }
    }

    pub fn camera_poses(&self) -> Vec<SE3Pose> {
        self.trajectory.iter().map(se3_exp).collect()
    }
}

/// Camera-to-world poses stepping `baseline` along x with seeded jitter bounded by
/// `‖ω‖ ≤ max_omega`, `‖v‖ ≤ max_v`.
pub fn lateral_trajectory(frames: usize, baseline: f64, max_omega: f64, max_v: f64, seed: u64) -> Vec<Twist> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a3c_91d5);
    let center = (frames as f64 - 1.0) / 2.0;
    (0..frames)
        .map(|i| {
            let w = ball(&mut rng, max_omega);
            let v = ball(&mut rng, max_v) + Vector3::new((i as f64 - center) * baseline, 0.0, 0.0);
            Twist::new(w, v).expect("bounded twist")
        })
        .collect()
}

fn ball(rng: &mut ChaCha8Rng, radius: f64) -> Vector3<f64> {
    if radius == 0.0 {
        return Vector3::zeros();
    }
    loop {
        let v = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        if v.norm() <= 1.0 {
            return v * radius;
        }
    }
}

/// Image and exact depth seen from camera-to-world pose `pose`.
pub fn render_view(spec: &SceneSpec, pose: &SE3Pose) -> Result<(Raster, DepthMap)> {
    spec.validate()?;
    render_scaled(spec, &Texture::new(&spec.texture)?, pose, 0)
}

/// Pyramid whose level `l` is the texture point-sampled at the pixel centres of the
/// `1/2^l` camera, so every level is consistent across views up to interpolation error.
pub fn render_feature_pyramid(spec: &SceneSpec, pose: &SE3Pose) -> Result<FeaturePyramid> {
    spec.validate()?;
    let tex = Texture::new(&spec.features)?;
    let level = |l: usize| render_scaled(spec, &tex, pose, l).map(|(img, _)| img);
    FeaturePyramid::new([level(1)?, level(2)?, level(3)?])
}

fn render_scaled(spec: &SceneSpec, tex: &Texture, pose: &SE3Pose, level: usize) -> Result<(Raster, DepthMap)> {
    let f = 1usize << level;
    if spec.width % f != 0 || spec.height % f != 0 {
        return Err(Error::shape(format!(
            "{}×{} image is not divisible by {f}",
            spec.height, spec.width
        )));
    }
    let (w, h, c) = (spec.width / f, spec.height / f, tex.waves.len());
    let k = spec.intrinsics.scaled(1.0 / f as f64);
    let origin = *pose.translation();
    let hits: Vec<Option<(f64, Vector3<f64>)>> = (0..w * h)
        .into_par_iter()
        .map(|q| {
            let ray = k.unproject(&Pixel::center_of(q % w, q / w));
            let dir = pose.rotation() * ray;
            let lambda = spec.scene.depth_along(&origin, &dir)?;
            Some((lambda, origin + dir * lambda))
        })
        .collect();
    let mut depth = Vec::with_capacity(w * h);
    let mut points = Vec::with_capacity(w * h);
    for hit in hits {
        let Some((d, x)) = hit else {
            return Err(Error::invalid("scene plane is behind or parallel to the camera"));
        };
        depth.push(d);
        points.push(x);
    }
    let image = Raster::from_fn(c, h, w, |ch, y, x| tex.eval(ch, &points[y * w + x]));
    Ok((image, DepthMap::new(h, w, depth)?))
}

/// Rendered frames of a tracklet with the central frame as target.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub frames: Vec<Raster>,
    pub depths: Vec<DepthMap>,
    /// Camera-to-world pose of every frame.
    pub poses: Vec<SE3Pose>,
    pub target: usize,
    pub sources: Vec<usize>,
    pub intrinsics: CameraIntrinsics,
}

impl Sequence {
    /// `T_{t→s} = P_s⁻¹·P_t` for each source.
    pub fn relative_poses(&self) -> Vec<SE3Pose> {
        let pt = &self.poses[self.target];
        self.sources.iter().map(|&s| self.poses[s].inverse().compose(pt)).collect()
    }

    pub fn target_frame(&self) -> &Raster {
        &self.frames[self.target]
    }

    pub fn source_frames(&self) -> Vec<Raster> {
        self.sources.iter().map(|&s| self.frames[s].clone()).collect()
    }
}

/// Renders every trajectory pose; sequence length must be 3 or 5.
pub fn make_sequence(spec: &SceneSpec, n: usize) -> Result<Sequence> {
    if n != 3 && n != 5 {
        return Err(Error::invalid(format!("tracklet length {n} is not 3 or 5")));
    }
    if spec.trajectory.len() != n {
        return Err(Error::invalid(format!(
            "scene trajectory has {} poses, tracklet needs {n}",
            spec.trajectory.len()
        )));
    }
    let all = render_all(spec)?;
    let target = n / 2;
    Ok(Sequence {
        frames: all.iter().map(|(i, _)| i.clone()).collect(),
        depths: all.into_iter().map(|(_, d)| d).collect(),
        poses: spec.camera_poses(),
        target,
        sources: (0..n).filter(|&i| i != target).collect(),
        intrinsics: spec.intrinsics,
    })
}

/// Renders every pose of the trajectory.
pub fn render_all(spec: &SceneSpec) -> Result<Vec<(Raster, DepthMap)>> {
    spec.camera_poses().iter().map(|p| render_view(spec, p)).collect()
}

/// Twist with `‖ω‖` and `‖v‖` drawn uniformly from `[lo, 1]` times the bounds, in a random
/// direction.
pub fn random_twist(rng: &mut ChaCha8Rng, max_omega: f64, max_v: f64, lo: f64) -> Vector6<f64> {
    let dir = |rng: &mut ChaCha8Rng| -> Vector3<f64> {
        loop {
            let v: Vector3<f64> = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
            if v.norm() > 1e-9 {
                return v.normalize();
            }
        }
    };
    let w = dir(rng) * max_omega * rng.random_range(lo..=1.0);
    let v = dir(rng) * max_v * rng.random_range(lo..=1.0);
    Vector6::new(w.x, w.y, w.z, v.x, v.y, v.z)
}

/// Multiplies depth by `1 + amplitude·f(x, y)` with `f` a seeded smooth field in `[−1, 1]`.
pub fn perturb_depth(depth: &DepthMap, amplitude: f64, rng: &mut ChaCha8Rng) -> DepthMap {
    let (h, w) = (depth.height(), depth.width());
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let ang = rng.random_range(0.0..std::f64::consts::TAU);
            let freq = rng.random_range(0.5..1.5) * std::f64::consts::TAU / w.max(h) as f64;
            (freq * ang.cos(), freq * ang.sin(), rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let values = (0..h * w)
        .map(|q| {
            let (x, y) = ((q % w) as f64, (q / w) as f64);
            let f: f64 = waves.iter().map(|(a, b, p)| (a * x + b * y + p).sin()).sum::<f64>() / waves.len() as f64;
            depth.values()[q] * (1.0 + amplitude * f)
        })
        .collect();
    DepthMap::from_vec_unchecked(h, w, values)
}

/// Applies `exp(δ)` on the left of each pose.
pub fn perturb_poses(poses: &[SE3Pose], max_omega: f64, max_v: f64, rng: &mut ChaCha8Rng) -> Vec<SE3Pose> {
    poses
        .iter()
        .map(|p| exp_coords(&random_twist(rng, max_omega, max_v, 0.5)).compose(p))
        .collect()
}
