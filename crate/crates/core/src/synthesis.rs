//! View synthesis by inverse warping and the training objective: L1 photometric term,
//! SSIM appearance matching, edge-aware depth smoothness, summed over scales.

use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ba::{BaState, StateGrad};
use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, SE3Pose};
use crate::raster::Raster;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Source image resampled onto the target grid; invalid pixels hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpedView {
    pub image: Raster,
    pub valid: Vec<bool>,
}

impl WarpedView {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// SSIM share of the appearance term.
    pub alpha: f64,
    /// Smoothness weight at scale r is `smooth_base / r`.
    pub smooth_base: f64,
    /// Downscale ratios the loss is summed over.
    pub scales: Vec<usize>,
    /// Apply smoothness to `D / mean(D)` (true) or to raw depth.
    pub normalize_depth: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.85,
            smooth_base: 0.1,
            scales: vec![1, 2, 4],
            normalize_depth: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha {} is outside [0, 1]", self.alpha)));
        }
        if !(self.smooth_base > 0.0) || !self.smooth_base.is_finite() {
            return Err(Error::invalid(format!("smoothness base {} must be positive", self.smooth_base)));
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| *s == 0 || !s.is_power_of_two()) {
            return Err(Error::invalid("loss scales must be non-empty powers of two"));
        }
        Ok(())
    }

    pub fn smooth_weight(&self, r: usize) -> f64 {
        self.smooth_base / r as f64
    }
}

#[inline]
fn warp_pixel(
    k: &CameraIntrinsics,
    pose: &SE3Pose,
    d: f64,
    x: usize,
    y: usize,
    w: usize,
    h: usize,
) -> Option<crate::ba::residual::Correspondence> {
    crate::ba::residual::correspond(k, pose, d, x, y, w, h)
}

/// `Î_s(p) = I_s(π(T, D(p)·p))`, masked where the point is behind the camera or the
/// sample position leaves the source image.
pub fn synthesize_view(source: &Raster, depth: &DepthMap, pose: &SE3Pose, k: &CameraIntrinsics) -> Result<WarpedView> {
    let (c, h, w) = source.shape();
    if depth.height() != h || depth.width() != w {
        return Err(Error::shape(format!(
            "depth {}×{} does not match image {h}×{w}",
            depth.height(),
            depth.width()
        )));
    }
    let per: Vec<Option<Vec<f64>>> = (0..h * w)
        .into_par_iter()
        .map(|q| {
            let cor = warp_pixel(k, pose, depth.values()[q], q % w, q / w, w, h)?;
            Some((0..c).map(|ch| cor.stencil.sample(source, ch)).collect())
        })
        .collect();
    let mut image = Raster::zeros(c, h, w);
    let mut valid = vec![false; h * w];
    for (q, v) in per.into_iter().enumerate() {
        if let Some(v) = v {
            valid[q] = true;
            for (ch, val) in v.into_iter().enumerate() {
                image.data_mut()[ch * h * w + q] = val;
            }
        }
    }
    Ok(WarpedView { image, valid })
}

/// Pulls `∂L/∂Î` back to the target depth and the pose (Euclidean partials).
fn synthesize_view_vjp(
    source: &Raster,
    depth: &DepthMap,
    pose: &SE3Pose,
    k: &CameraIntrinsics,
    grad: &Raster,
) -> (Vec<f64>, Matrix3<f64>, Vector3<f64>) {
    let (c, h, w) = source.shape();
    let per: Vec<(f64, Matrix3<f64>, Vector3<f64>)> = (0..h * w)
        .into_par_iter()
        .map(|q| {
            let zero = (0.0, Matrix3::zeros(), Vector3::zeros());
            let d = depth.values()[q];
            let Some(cor) = warp_pixel(k, pose, d, q % w, q / w, w, h) else {
                return zero;
            };
            let mut a = Vector2::zeros();
            for ch in 0..c {
                let g = grad.data()[ch * h * w + q];
                if g != 0.0 {
                    let s = cor.stencil.gradient(source, ch);
                    a += Vector2::new(s[0], s[1]) * g;
                }
            }
            if a == Vector2::zeros() {
                return zero;
            }
            let ybar = k.projection_jacobian(&cor.point).transpose() * a;
            let x = cor.ray * d;
            ((pose.rotation().transpose() * ybar).dot(&cor.ray), ybar * x.transpose(), ybar)
        })
        .collect();
    let mut dd = Vec::with_capacity(h * w);
    let mut rb = Matrix3::zeros();
    let mut tb = Vector3::zeros();
    for (d, r, t) in per {
        dd.push(d);
        rb += r;
        tb += t;
    }
    (dd, rb, tb)
}

fn check_views(target: &Raster, views: &[WarpedView]) -> Result<()> {
    if views.is_empty() {
        return Err(Error::invalid("at least one synthesized view is required"));
    }
    for v in views {
        if !v.image.same_shape(target) {
            return Err(Error::shape("synthesized view does not match target shape"));
        }
        if v.valid_count() == 0 {
            return Err(Error::degenerate("synthesized view has no valid pixels"));
        }
    }
    Ok(())
}

/// Mean over valid pixels and channels of `|I_t − Î_s|`, summed over views.
pub fn loss_photo(target: &Raster, views: &[WarpedView]) -> Result<f64> {
    check_views(target, views)?;
    Ok(views.iter().map(|v| photo_term(target, v, false).0).sum())
}

fn photo_term(target: &Raster, v: &WarpedView, grad: bool) -> (f64, Option<Raster>) {
    let (c, h, w) = target.shape();
    let n = (v.valid_count() * c) as f64;
    let mut sum = 0.0;
    let mut g = grad.then(|| Raster::zeros(c, h, w));
    for ch in 0..c {
        for q in 0..h * w {
            if !v.valid[q] {
                continue;
            }
            let idx = ch * h * w + q;
            let diff = v.image.data()[idx] - target.data()[idx];
            sum += diff.abs();
            if let Some(g) = g.as_mut() {
                let sign = if diff == 0.0 { 0.0 } else { diff.signum() };
                g.data_mut()[idx] = sign / n;
            }
        }
    }
    (sum / n, g)
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

/// 3×3 box mean with reflective padding, per channel.
fn box3(r: &Raster) -> Raster {
    let (c, h, w) = r.shape();
    Raster::from_fn(c, h, w, |ch, y, x| {
        let mut s = 0.0;
        for dy in -1..=1 {
            for dx in -1..=1 {
                s += r.get(ch, reflect(y as isize + dy, h), reflect(x as isize + dx, w));
            }
        }
        s / 9.0
    })
}

fn box3_adjoint(g: &Raster) -> Raster {
    let (c, h, w) = g.shape();
    let mut out = Raster::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = g.get(ch, y, x) / 9.0;
                if v == 0.0 {
                    continue;
                }
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let idx = out.index(ch, reflect(y as isize + dy, h), reflect(x as isize + dx, w));
                        out.data_mut()[idx] += v;
                    }
                }
            }
        }
    }
    out
}

fn product(a: &Raster, b: &Raster) -> Raster {
    let mut out = a.clone();
    out.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x *= y);
    out
}

struct SsimParts {
    mx: Raster,
    my: Raster,
    sxx: Raster,
    syy: Raster,
    sxy: Raster,
    value: Raster,
}

fn ssim_parts(x: &Raster, y: &Raster) -> SsimParts {
    let mx = box3(x);
    let my = box3(y);
    let exx = box3(&product(x, x));
    let eyy = box3(&product(y, y));
    let exy = box3(&product(x, y));
    let n = x.data().len();
    let mut sxx = exx;
    let mut syy = eyy;
    let mut sxy = exy;
    let mut value = Raster::zeros(x.channels(), x.height(), x.width());
    for i in 0..n {
        let (a, b) = (mx.data()[i], my.data()[i]);
        sxx.data_mut()[i] -= a * a;
        syy.data_mut()[i] -= b * b;
        sxy.data_mut()[i] -= a * b;
        let num = (2.0 * a * b + SSIM_C1) * (2.0 * sxy.data()[i] + SSIM_C2);
        let den = (a * a + b * b + SSIM_C1) * (sxx.data()[i] + syy.data()[i] + SSIM_C2);
        value.data_mut()[i] = (num / den).clamp(-1.0, 1.0);
    }
    SsimParts {
        mx,
        my,
        sxx,
        syy,
        sxy,
        value,
    }
}

/// Per-pixel SSIM with 3×3 box statistics and reflective padding, clipped to [−1, 1].
pub fn ssim(x: &Raster, y: &Raster) -> Result<Raster> {
    if !x.same_shape(y) {
        return Err(Error::shape("ssim inputs differ in shape"));
    }
    if x.height() < 2 || x.width() < 2 {
        return Err(Error::shape("ssim needs at least 2×2 pixels"));
    }
    Ok(ssim_parts(x, y).value)
}

/// Mean over valid pixels of `(1 − SSIM)/2`, with optional gradient wrt the warped image.
fn ssim_term(target: &Raster, v: &WarpedView, grad: bool) -> (f64, Option<Raster>) {
    let (c, h, w) = target.shape();
    let parts = ssim_parts(target, &v.image);
    let n = (v.valid_count() * c) as f64;
    let mut sum = 0.0;
    for ch in 0..c {
        for q in 0..h * w {
            if v.valid[q] {
                sum += (1.0 - parts.value.data()[ch * h * w + q]) / 2.0;
            }
        }
    }
    if !grad {
        return (sum / n, None);
    }
    // Partials of SSIM wrt (μ_y, E[y²], E[xy]) at each pixel.
    let mut g_mu = Raster::zeros(c, h, w);
    let mut g_eyy = Raster::zeros(c, h, w);
    let mut g_exy = Raster::zeros(c, h, w);
    for ch in 0..c {
        for q in 0..h * w {
            if !v.valid[q] {
                continue;
            }
            let i = ch * h * w + q;
            let (mx, my) = (parts.mx.data()[i], parts.my.data()[i]);
            let a = 2.0 * mx * my + SSIM_C1;
            let b = 2.0 * parts.sxy.data()[i] + SSIM_C2;
            let p = mx * mx + my * my + SSIM_C1;
            let qq = parts.sxx.data()[i] + parts.syy.data()[i] + SSIM_C2;
            let den = p * qq;
            let s = a * b / den;
            if !(-1.0..=1.0).contains(&s) {
                continue;
            }
            let up = -0.5 / n;
            let d_mu = (2.0 * mx * b + a * (-2.0 * mx)) / den - s * (2.0 * my * qq + p * (-2.0 * my)) / den;
            g_mu.data_mut()[i] = up * d_mu;
            g_eyy.data_mut()[i] = up * (-s * p / den);
            g_exy.data_mut()[i] = up * (2.0 * a / den);
        }
    }
    let mut gy = box3_adjoint(&g_mu);
    let a_eyy = box3_adjoint(&g_eyy);
    let a_exy = box3_adjoint(&g_exy);
    for i in 0..gy.data().len() {
        let yv = v.image.data()[i];
        let xv = target.data()[i];
        gy.data_mut()[i] += 2.0 * yv * a_eyy.data()[i] + xv * a_exy.data()[i];
    }
    (sum / n, Some(gy))
}

/// `Σ_s α·mean((1 − SSIM)/2) + (1 − α)·mean|I_t − Î_s|`, means over valid pixels.
pub fn loss_match(target: &Raster, views: &[WarpedView], alpha: f64) -> Result<f64> {
    check_views(target, views)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} is outside [0, 1]")));
    }
    let mut total = 0.0;
    for v in views {
        let s = if alpha > 0.0 { ssim_term(target, v, false).0 } else { 0.0 };
        let p = if alpha < 1.0 { photo_term(target, v, false).0 } else { 0.0 };
        total += alpha * s + (1.0 - alpha) * p;
    }
    Ok(total)
}

/// Mean of `|∂x D̃|·e^{−|∂x I|} + |∂y D̃|·e^{−|∂y I|}` with `D̃ = D/mean(D)` when
/// `normalize`, forward differences, and channel-averaged image gradients.
pub fn loss_smooth(depth: &DepthMap, image: &Raster, normalize: bool) -> Result<f64> {
    Ok(smooth_with_grad(depth, image, normalize, false)?.0)
}

fn smooth_with_grad(depth: &DepthMap, image: &Raster, normalize: bool, grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    let (h, w) = (depth.height(), depth.width());
    if image.height() != h || image.width() != w {
        return Err(Error::shape("smoothness depth and image sizes differ"));
    }
    let (gx, gy) = image.image_gradients();
    let (c, n) = (image.channels() as f64, (h * w) as f64);
    let weight = |g: &Raster, y: usize, x: usize| -> f64 {
        let m: f64 = (0..image.channels()).map(|ch| g.get(ch, y, x)).sum::<f64>() / c;
        (-m.abs()).exp()
    };
    let m = if normalize { depth.mean() } else { 1.0 };
    let d = |y: usize, x: usize| depth.get(y, x) / m;
    let mut sum = 0.0;
    let mut g_tilde = grad.then(|| vec![0.0; h * w]);
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                let diff = d(y, x + 1) - d(y, x);
                let wt = weight(&gx, y, x);
                sum += diff.abs() * wt;
                if let Some(g) = g_tilde.as_mut() {
                    let s = if diff == 0.0 { 0.0 } else { diff.signum() } * wt / n;
                    g[y * w + x + 1] += s;
                    g[y * w + x] -= s;
                }
            }
            if y + 1 < h {
                let diff = d(y + 1, x) - d(y, x);
                let wt = weight(&gy, y, x);
                sum += diff.abs() * wt;
                if let Some(g) = g_tilde.as_mut() {
                    let s = if diff == 0.0 { 0.0 } else { diff.signum() } * wt / n;
                    g[(y + 1) * w + x] += s;
                    g[y * w + x] -= s;
                }
            }
        }
    }
    let g = g_tilde.map(|gt| {
        if !normalize {
            return gt;
        }
        // D̃_j = D_j / m with m = mean(D).
        let corr: f64 = gt.iter().zip(depth.values()).map(|(a, b)| a * b).sum::<f64>() / (m * m * n);
        gt.iter().map(|a| a / m - corr).collect()
    });
    Ok((sum / n, g))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleLoss {
    pub scale: usize,
    pub l_photo: f64,
    pub l_ssim: f64,
    pub l_match: f64,
    pub l_smooth: f64,
    pub smooth_weight: f64,
}

/// Loss summary. `l_smooth` is the weighted smoothness sum so that
/// `l_total = l_match + l_smooth`; `l_photo` is the unblended L1 sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_photo: f64,
    pub l_smooth: f64,
    pub l_match: f64,
    pub l_total: f64,
    pub per_scale: Vec<ScaleLoss>,
}

impl LossReport {
    /// Term-wise sum; per-scale entries are summed pairwise.
    pub fn add(&self, other: &LossReport) -> LossReport {
        LossReport {
            l_photo: self.l_photo + other.l_photo,
            l_smooth: self.l_smooth + other.l_smooth,
            l_match: self.l_match + other.l_match,
            l_total: self.l_total + other.l_total,
            per_scale: self
                .per_scale
                .iter()
                .zip(&other.per_scale)
                .map(|(a, b)| ScaleLoss {
                    scale: a.scale,
                    l_photo: a.l_photo + b.l_photo,
                    l_ssim: a.l_ssim + b.l_ssim,
                    l_match: a.l_match + b.l_match,
                    l_smooth: a.l_smooth + b.l_smooth,
                    smooth_weight: a.smooth_weight,
                })
                .collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> LossReport {
        LossReport {
            l_photo: self.l_photo * s,
            l_smooth: self.l_smooth * s,
            l_match: self.l_match * s,
            l_total: self.l_total * s,
            per_scale: self
                .per_scale
                .iter()
                .map(|a| ScaleLoss {
                    l_photo: a.l_photo * s,
                    l_ssim: a.l_ssim * s,
                    l_match: a.l_match * s,
                    l_smooth: a.l_smooth * s,
                    ..*a
                })
                .collect(),
        }
    }
}

/// Block means of the target and source images at every loss scale, computed once.
#[derive(Debug, Clone)]
pub struct ImageScales {
    pub scales: Vec<usize>,
    pub target: Vec<Raster>,
    pub sources: Vec<Vec<Raster>>,
}

impl ImageScales {
    pub fn new(target: &Raster, sources: &[Raster], scales: &[usize]) -> Result<Self> {
        let mut t = Vec::new();
        let mut s = Vec::new();
        for &r in scales {
            t.push(target.downsample_mean(r)?);
            s.push(sources.iter().map(|x| x.downsample_mean(r)).collect::<Result<Vec<_>>>()?);
        }
        Ok(ImageScales {
            scales: scales.to_vec(),
            target: t,
            sources: s,
        })
    }
}

/// `Σ_r [L_m + (base/r)·L_s]` at each scale `r` of the weights, with the depth block
/// averaged and the intrinsics scaled by `1/r`. Optionally returns gradients wrt the
/// full-resolution depth and each pose.
pub fn total_loss(
    state: &BaState,
    images: &ImageScales,
    k: &CameraIntrinsics,
    weights: &LossWeights,
    grad: bool,
) -> Result<(LossReport, Option<StateGrad>)> {
    weights.validate()?;
    if images.scales != weights.scales {
        return Err(Error::invalid("image scales do not match loss weights"));
    }
    let n = state.poses.len();
    if images.sources.iter().any(|s| s.len() != n) {
        return Err(Error::shape("source image count does not match pose count"));
    }
    let mut report = LossReport {
        l_photo: 0.0,
        l_smooth: 0.0,
        l_match: 0.0,
        l_total: 0.0,
        per_scale: Vec::new(),
    };
    let mut g = grad.then(|| StateGrad::zeros(state.depth.len(), n));
    let alpha = weights.alpha;
    for (si, &r) in weights.scales.iter().enumerate() {
        let d = state.depth.downsample(r)?;
        let kr = k.scaled(1.0 / r as f64);
        let target = &images.target[si];
        if (d.height(), d.width()) != (target.height(), target.width()) {
            return Err(Error::shape("depth and image sizes differ"));
        }
        let mut sl = ScaleLoss {
            scale: r,
            l_photo: 0.0,
            l_ssim: 0.0,
            l_match: 0.0,
            l_smooth: 0.0,
            smooth_weight: weights.smooth_weight(r),
        };
        let mut gd_scale = vec![0.0; d.len()];
        for (i, src) in images.sources[si].iter().enumerate() {
            let view = synthesize_view(src, &d, &state.poses[i], &kr)?;
            if view.valid_count() == 0 {
                return Err(Error::degenerate(format!("scale {r}, view {i}: every synthesized pixel is invalid")));
            }
            let (p, gp) = photo_term(target, &view, grad);
            let (s, gs) = ssim_term(target, &view, grad);
            sl.l_photo += p;
            sl.l_ssim += s;
            sl.l_match += alpha * s + (1.0 - alpha) * p;
            if let (Some(g), Some(gp), Some(gs)) = (g.as_mut(), gp, gs) {
                let mut gimg = gp.scale(1.0 - alpha);
                gimg.add_assign(&gs.scale(alpha));
                for (gi, valid) in gimg.data_mut().chunks_mut(d.len()).flat_map(|p| p.iter_mut().zip(&view.valid)) {
                    if !valid {
                        *gi = 0.0;
                    }
                }
                let (dd, rb, tb) = synthesize_view_vjp(src, &d, &state.poses[i], &kr, &gimg);
                gd_scale.iter_mut().zip(&dd).for_each(|(a, b)| *a += b);
                g.rotation[i] += rb;
                g.translation[i] += tb;
            }
        }
        let (ls, gs) = smooth_with_grad(&d, target, weights.normalize_depth, grad)?;
        sl.l_smooth = ls;
        if let Some(gs) = gs {
            let wgt = sl.smooth_weight;
            gd_scale.iter_mut().zip(&gs).for_each(|(a, b)| *a += wgt * b);
        }
        if let Some(g) = g.as_mut() {
            let up = Raster::from_vec_unchecked(1, d.height(), d.width(), gd_scale).downsample_mean_adjoint(r);
            g.depth.iter_mut().zip(up.data()).for_each(|(a, b)| *a += b);
        }
        report.l_photo += sl.l_photo;
        report.l_match += sl.l_match;
        report.l_smooth += sl.smooth_weight * sl.l_smooth;
        report.per_scale.push(sl);
    }
    report.l_total = report.l_match + report.l_smooth;
    if !report.l_total.is_finite() {
        return Err(Error::degenerate("loss is not finite"));
    }
    Ok((report, g))
}
