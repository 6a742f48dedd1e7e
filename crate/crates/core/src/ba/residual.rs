//! Per-pixel residuals `e = F_s(π(T, d·q)) − F_t(q)` and their analytic Jacobians.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pixel, SE3Pose, BEHIND_CAMERA_EPS};
use crate::raster::{Raster, Stencil};

/// Stacked residuals, ordered `[pixel][view][channel]`, plus one validity flag per
/// `(pixel, view)`. Invalid entries are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualVector {
    pub channels: usize,
    pub views: usize,
    pub pixels: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl ResidualVector {
    #[inline]
    pub fn row(&self, q: usize, i: usize) -> &[f64] {
        let off = (q * self.views + i) * self.channels;
        &self.values[off..off + self.channels]
    }

    #[inline]
    pub fn is_valid(&self, q: usize, i: usize) -> bool {
        self.valid[q * self.views + i]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        1.0 - self.valid_count() as f64 / self.valid.len() as f64
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.squared_norm().sqrt()
    }

    /// Mean absolute residual over valid entries.
    pub fn mean_abs(&self) -> f64 {
        let n = self.valid_count() * self.channels;
        if n == 0 {
            return 0.0;
        }
        self.values.iter().map(|v| v.abs()).sum::<f64>() / n as f64
    }
}

/// Jacobian rows matching a [`ResidualVector`]: one depth column per pixel and six
/// left-twist columns `(ω, v)` for the row's own source view.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianBlocks {
    pub channels: usize,
    pub views: usize,
    pub d_depth: Vec<f64>,
    pub d_pose: Vec<[f64; 6]>,
}

impl JacobianBlocks {
    #[inline]
    pub fn rows(&self, q: usize, i: usize) -> (&[f64], &[[f64; 6]]) {
        let off = (q * self.views + i) * self.channels;
        (&self.d_depth[off..off + self.channels], &self.d_pose[off..off + self.channels])
    }

    /// Max `|J|` entry, used by tests.
    pub fn max_abs(&self) -> f64 {
        self.d_depth
            .iter()
            .chain(self.d_pose.iter().flatten())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Residual inputs at one pyramid level.
#[derive(Debug, Clone, Copy)]
pub struct LevelProblem<'a> {
    pub target: &'a Raster,
    pub sources: &'a [Raster],
    /// Intrinsics already scaled to this level.
    pub k: CameraIntrinsics,
}

impl<'a> LevelProblem<'a> {
    pub fn validate(&self, depth: &DepthMap, poses: &[SE3Pose]) -> Result<()> {
        let (c, h, w) = self.target.shape();
        if h < 2 || w < 2 {
            return Err(Error::shape(format!("level raster {h}×{w} is too small")));
        }
        if depth.height() != h || depth.width() != w {
            return Err(Error::shape(format!(
                "depth {}×{} does not match features {h}×{w}",
                depth.height(),
                depth.width()
            )));
        }
        if poses.len() != self.sources.len() || poses.is_empty() {
            return Err(Error::shape(format!(
                "{} poses for {} source views",
                poses.len(),
                self.sources.len()
            )));
        }
        if let Some(s) = self.sources.iter().find(|s| s.shape() != (c, h, w)) {
            return Err(Error::shape(format!("source shape {:?} differs from target {:?}", s.shape(), (c, h, w))));
        }
        self.k.validate()
    }
}

/// Geometry of one `(pixel, view)` correspondence.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Correspondence {
    /// `K⁻¹·q`.
    pub ray: Vector3<f64>,
    /// Source-frame point `R·d·ray + t`.
    pub point: Vector3<f64>,
    pub stencil: Stencil,
}

#[inline]
pub(crate) fn correspond(
    k: &CameraIntrinsics,
    pose: &SE3Pose,
    d: f64,
    x: usize,
    y: usize,
    w: usize,
    h: usize,
) -> Option<Correspondence> {
    let ray = k.unproject(&Pixel::center_of(x, y));
    let point = pose.rotation() * (ray * d) + pose.translation();
    if !(point.z > BEHIND_CAMERA_EPS) {
        return None;
    }
    let u = k.project_point(&point);
    let stencil = Stencil::new(u.x - 0.5, u.y - 0.5, w, h)?;
    Some(Correspondence { ray, point, stencil })
}

struct PixelRows {
    values: Vec<f64>,
    valid: Vec<bool>,
    d_depth: Vec<f64>,
    d_pose: Vec<[f64; 6]>,
}

fn pixel_rows(p: &LevelProblem, depth: &DepthMap, poses: &[SE3Pose], q: usize, jac: bool) -> PixelRows {
    let (c, h, w) = p.target.shape();
    let n = poses.len();
    let (x, y) = (q % w, q / w);
    let d = depth.values()[q];
    let mut out = PixelRows {
        values: vec![0.0; n * c],
        valid: vec![false; n],
        d_depth: if jac { vec![0.0; n * c] } else { Vec::new() },
        d_pose: if jac { vec![[0.0; 6]; n * c] } else { Vec::new() },
    };
    for (i, (pose, src)) in poses.iter().zip(p.sources).enumerate() {
        let Some(cor) = correspond(&p.k, pose, d, x, y, w, h) else {
            continue;
        };
        out.valid[i] = true;
        let ju = p.k.projection_jacobian(&cor.point);
        let r_ray = pose.rotation() * cor.ray;
        for ch in 0..c {
            let row = i * c + ch;
            out.values[row] = cor.stencil.sample(src, ch) - p.target.get(ch, y, x);
            if jac {
                let g = cor.stencil.gradient(src, ch);
                let gy = ju.transpose() * nalgebra::Vector2::new(g[0], g[1]);
                out.d_depth[row] = gy.dot(&r_ray);
                let wv = cor.point.cross(&gy);
                out.d_pose[row] = [wv.x, wv.y, wv.z, gy.x, gy.y, gy.z];
            }
        }
    }
    out
}

/// Residuals (and optionally Jacobian blocks) for every target pixel and source view.
pub fn evaluate_level(
    p: &LevelProblem,
    depth: &DepthMap,
    poses: &[SE3Pose],
    jacobian: bool,
) -> Result<(ResidualVector, Option<JacobianBlocks>)> {
    p.validate(depth, poses)?;
    let (c, _, _) = p.target.shape();
    let rows: Vec<PixelRows> = (0..depth.len())
        .into_par_iter()
        .map(|q| pixel_rows(p, depth, poses, q, jacobian))
        .collect();
    let pixels = rows.len();
    let n = poses.len();
    let mut values = Vec::with_capacity(pixels * n * c);
    let mut valid = Vec::with_capacity(pixels * n);
    let mut d_depth = Vec::new();
    let mut d_pose = Vec::new();
    for r in rows {
        values.extend(r.values);
        valid.extend(r.valid);
        d_depth.extend(r.d_depth);
        d_pose.extend(r.d_pose);
    }
    let e = ResidualVector {
        channels: c,
        views: n,
        pixels,
        values,
        valid,
    };
    if e.valid_count() == 0 {
        return Err(Error::degenerate("every residual is masked"));
    }
    let j = jacobian.then(|| JacobianBlocks {
        channels: c,
        views: n,
        d_depth,
        d_pose,
    });
    Ok((e, j))
}

/// Upstream adjoints of the residual/Jacobian evaluation at one level.
pub(crate) struct LevelAdjoint {
    pub depth: Vec<f64>,
    pub rotation: Vec<Matrix3<f64>>,
    pub translation: Vec<Vector3<f64>>,
    pub target: Raster,
    pub sources: Vec<Raster>,
}

/// Pulls `Ē` and `J̄` (same layouts as the forward outputs) back to the depth, the poses
/// (Euclidean `R̄`, `t̄`) and the feature rasters.
pub(crate) fn evaluate_level_vjp(
    p: &LevelProblem,
    depth: &DepthMap,
    poses: &[SE3Pose],
    e_bar: &[f64],
    jd_bar: &[f64],
    jp_bar: &[[f64; 6]],
) -> LevelAdjoint {
    let (c, h, w) = p.target.shape();
    let n = poses.len();
    let k = p.k;

    struct Local {
        depth: f64,
        pose: Vec<(Matrix3<f64>, Vector3<f64>)>,
        target: Vec<f64>,
        cells: Vec<(usize, usize, usize, usize, f64)>,
    }

    let locals: Vec<Local> = (0..depth.len())
        .into_par_iter()
        .map(|q| {
            let (x, y) = (q % w, q / w);
            let d = depth.values()[q];
            let mut loc = Local {
                depth: 0.0,
                pose: vec![(Matrix3::zeros(), Vector3::zeros()); n],
                target: vec![0.0; c],
                cells: Vec::new(),
            };
            for (i, (pose, src)) in poses.iter().zip(p.sources).enumerate() {
                let Some(cor) = correspond(&k, pose, d, x, y, w, h) else {
                    continue;
                };
                let st = cor.stencil;
                let yp = cor.point;
                let ju = k.projection_jacobian(&yp);
                let r_ray = pose.rotation() * cor.ray;
                let wts = st.weights();
                let cells = st.cells();
                let (ax, ay) = (st.ax, st.ay);
                let mut ybar = Vector3::zeros();
                let mut rray_bar = Vector3::zeros();
                let mut ju_bar = nalgebra::Matrix2x3::zeros();
                let mut a_bar = [0.0f64; 2];
                for ch in 0..c {
                    let row = (q * n + i) * c + ch;
                    let eb = e_bar[row];
                    let jdb = jd_bar[row];
                    let jpb = jp_bar[row];
                    let v = st.corners(src, ch);
                    let gx = (1.0 - ay) * (v[1] - v[0]) + ay * (v[3] - v[2]);
                    let gy_img = (1.0 - ax) * (v[2] - v[0]) + ax * (v[3] - v[1]);
                    let g = nalgebra::Vector2::new(gx, gy_img);
                    let gyv = ju.transpose() * g;
                    let wbar = Vector3::new(jpb[0], jpb[1], jpb[2]);
                    let vbar = Vector3::new(jpb[3], jpb[4], jpb[5]);
                    // jd = Gy·(R·ray); jω = Y × Gy; jv = Gy
                    let gy_bar = r_ray * jdb + wbar.cross(&yp) + vbar;
                    rray_bar += gyv * jdb;
                    ybar += gyv.cross(&wbar);
                    // Gy = Juᵀ·g
                    let g_bar = ju * gy_bar;
                    ju_bar += g * gy_bar.transpose();
                    let kappa = v[0] - v[1] - v[2] + v[3];
                    a_bar[1] += g_bar.x * kappa;
                    a_bar[0] += g_bar.y * kappa;
                    // e = sample − target
                    a_bar[0] += eb * gx;
                    a_bar[1] += eb * gy_img;
                    loc.target[ch] -= eb;
                    let cell_w = [
                        eb * wts[0] - g_bar.x * (1.0 - ay) - g_bar.y * (1.0 - ax),
                        eb * wts[1] + g_bar.x * (1.0 - ay) - g_bar.y * ax,
                        eb * wts[2] - g_bar.x * ay + g_bar.y * (1.0 - ax),
                        eb * wts[3] + g_bar.x * ay + g_bar.y * ax,
                    ];
                    for (cell, cw) in cells.iter().zip(cell_w) {
                        if cw != 0.0 {
                            loc.cells.push((i, ch, cell.1, cell.0, cw));
                        }
                    }
                }
                // Derivative of Ju entries with respect to Y.
                let iz = 1.0 / yp.z;
                let iz2 = iz * iz;
                let iz3 = iz2 * iz;
                ybar.x += ju_bar[(0, 2)] * (-k.fx * iz2);
                ybar.y += ju_bar[(1, 2)] * (-k.fy * iz2);
                ybar.z += ju_bar[(0, 0)] * (-k.fx * iz2)
                    + ju_bar[(0, 2)] * (2.0 * k.fx * yp.x * iz3)
                    + ju_bar[(1, 1)] * (-k.fy * iz2)
                    + ju_bar[(1, 2)] * (2.0 * k.fy * yp.y * iz3);
                // Sample position u − 0.5 moves with u.
                ybar += ju.transpose() * nalgebra::Vector2::new(a_bar[0], a_bar[1]);
                // Y = R·(d·ray) + t
                let xp = cor.ray * d;
                let (rb, tb) = &mut loc.pose[i];
                *rb += ybar * xp.transpose() + rray_bar * cor.ray.transpose();
                *tb += ybar;
                loc.depth += (pose.rotation().transpose() * ybar).dot(&cor.ray);
            }
            loc
        })
        .collect();

    let mut adj = LevelAdjoint {
        depth: vec![0.0; depth.len()],
        rotation: vec![Matrix3::zeros(); n],
        translation: vec![Vector3::zeros(); n],
        target: Raster::zeros(c, h, w),
        sources: vec![Raster::zeros(c, h, w); n],
    };
    for (q, loc) in locals.into_iter().enumerate() {
        adj.depth[q] = loc.depth;
        for (i, (rb, tb)) in loc.pose.into_iter().enumerate() {
            adj.rotation[i] += rb;
            adj.translation[i] += tb;
        }
        let (x, y) = (q % w, q / w);
        for ch in 0..c {
            let idx = adj.target.index(ch, y, x);
            adj.target.data_mut()[idx] += loc.target[ch];
        }
        for (i, ch, yy, xx, v) in loc.cells {
            let idx = adj.sources[i].index(ch, yy, xx);
            adj.sources[i].data_mut()[idx] += v;
        }
    }
    adj
}
