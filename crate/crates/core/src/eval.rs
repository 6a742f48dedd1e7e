//! Depth metrics with median scaling, and absolute trajectory error after least-squares
//! alignment.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::SE3Pose;

pub const DEFAULT_DEPTH_CAP: f64 = 80.0;
/// Predictions are clamped to at least this before any metric.
pub const PRED_FLOOR: f64 = 1e-3;
pub const DELTA_BASE: f64 = 1.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthEvalReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
}

/// Median with the two central values averaged for even counts.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

fn valid_indices(pred: &[f64], gt: &[f64], mask: Option<&[bool]>, cap: f64) -> Result<Vec<usize>> {
    if pred.len() != gt.len() || mask.is_some_and(|m| m.len() != gt.len()) {
        return Err(Error::shape("prediction, ground truth and mask lengths differ"));
    }
    Ok((0..gt.len())
        .filter(|&i| mask.is_none_or(|m| m[i]) && gt[i] > 0.0 && gt[i] <= cap && gt[i].is_finite())
        .collect())
}

/// `median(gt) / median(pred)` over pixels with valid ground truth (`gt > 0` and mask).
pub fn median_scale(pred: &[f64], gt: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    let idx = valid_indices(pred, gt, mask, f64::INFINITY)?;
    let mut g: Vec<f64> = idx.iter().map(|&i| gt[i]).collect();
    let mut p: Vec<f64> = idx.iter().map(|&i| pred[i]).collect();
    let (Some(mg), Some(mp)) = (median(&mut g), median(&mut p)) else {
        return Err(Error::degenerate("no valid ground-truth pixels for median scaling"));
    };
    if !(mp > 0.0) {
        return Err(Error::degenerate("median prediction is not positive"));
    }
    Ok(mg / mp)
}

/// The seven standard depth metrics on `mask ∧ 0 < gt ≤ cap`, predictions clamped to
/// `[1e-3, cap]`. Scaling is the caller's job.
pub fn depth_metrics(pred: &[f64], gt: &[f64], mask: Option<&[bool]>, cap: f64) -> Result<DepthEvalReport> {
    if !(cap > 0.0) {
        return Err(Error::invalid(format!("depth cap {cap} must be positive")));
    }
    let idx = valid_indices(pred, gt, mask, cap)?;
    if idx.is_empty() {
        return Err(Error::degenerate("no valid pixels for depth evaluation"));
    }
    let n = idx.len() as f64;
    let mut r = DepthEvalReport {
        abs_rel: 0.0,
        sq_rel: 0.0,
        rmse: 0.0,
        rmse_log: 0.0,
        a1: 0.0,
        a2: 0.0,
        a3: 0.0,
    };
    let (t1, t2, t3) = (DELTA_BASE, DELTA_BASE.powi(2), DELTA_BASE.powi(3));
    for &i in &idx {
        let g = gt[i];
        let p = pred[i].clamp(PRED_FLOOR, cap);
        let d = p - g;
        r.abs_rel += d.abs() / g;
        r.sq_rel += d * d / g;
        r.rmse += d * d;
        let l = p.ln() - g.ln();
        r.rmse_log += l * l;
        let ratio = (p / g).max(g / p);
        r.a1 += (ratio < t1) as u8 as f64;
        r.a2 += (ratio < t2) as u8 as f64;
        r.a3 += (ratio < t3) as u8 as f64;
    }
    r.abs_rel /= n;
    r.sq_rel /= n;
    r.rmse = (r.rmse / n).sqrt();
    r.rmse_log = (r.rmse_log / n).sqrt();
    r.a1 /= n;
    r.a2 /= n;
    r.a3 /= n;
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    Rigid,
    Similarity,
}

/// `q ≈ scale·R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub pose: SE3Pose,
    pub scale: f64,
}

impl Alignment {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.pose.rotation() * p * self.scale + self.pose.translation()
    }
}

/// Closed-form least-squares alignment of `p` onto `q` (centroids, cross-covariance SVD
/// with a reflection fix, optional scale).
pub fn horn_align(p: &[Vector3<f64>], q: &[Vector3<f64>], mode: AlignMode) -> Result<Alignment> {
    if p.len() != q.len() {
        return Err(Error::shape(format!("trajectories have {} and {} points", p.len(), q.len())));
    }
    if p.len() < 3 {
        return Err(Error::degenerate("alignment needs at least 3 points"));
    }
    if p.iter().chain(q).any(|v| !v.iter().all(|c| c.is_finite())) {
        return Err(Error::invalid("trajectory contains non-finite positions"));
    }
    let n = p.len() as f64;
    let mp = p.iter().sum::<Vector3<f64>>() / n;
    let mq = q.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    let mut var_p = 0.0;
    for (a, b) in p.iter().zip(q) {
        let (da, db) = (a - mp, b - mq);
        cov += db * da.transpose();
        spread += da * da.transpose();
        var_p += da.norm_squared();
    }
    cov /= n;
    var_p /= n;
    let sv = spread.symmetric_eigenvalues();
    let mut ev: Vec<f64> = sv.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if !(ev[0] > 1e-24) || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::degenerate("trajectory points are coincident or collinear"));
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut s = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    let scale = match mode {
        AlignMode::Rigid => 1.0,
        AlignMode::Similarity => {
            let d = svd.singular_values;
            (d[0] * s[(0, 0)] + d[1] * s[(1, 1)] + d[2] * s[(2, 2)]) / var_p
        }
    };
    let t = mq - r * mp * scale;
    Ok(Alignment {
        pose: SE3Pose::from_approx(r, t)?,
        scale,
    })
}

/// RMSE of `‖s·R·p_i + t − q_i‖` after alignment.
pub fn ate_rmse(p: &[Vector3<f64>], q: &[Vector3<f64>], mode: AlignMode) -> Result<f64> {
    let a = horn_align(p, q, mode)?;
    let sum: f64 = p.iter().zip(q).map(|(a_, b)| (a.apply(a_) - b).norm_squared()).sum();
    Ok((sum / p.len() as f64).sqrt())
}

pub fn positions(poses: &[SE3Pose]) -> Vec<Vector3<f64>> {
    poses.iter().map(|p| *p.translation()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnippetReport {
    pub mean_ate: f64,
    pub std_ate: f64,
    pub n_snippets: usize,
    pub per_snippet: Vec<f64>,
}

impl SnippetReport {
    /// `mean±std` with three decimals.
    pub fn formatted(&self) -> String {
        format!("{:.3}±{:.3}", self.mean_ate, self.std_ate)
    }
}

/// Similarity-aligned ATE over every window of `length` frames (step `stride`); mean and
/// population standard deviation.
pub fn snippet_eval(est: &[Vector3<f64>], gt: &[Vector3<f64>], length: usize, stride: usize) -> Result<SnippetReport> {
    if length < 3 {
        return Err(Error::invalid(format!("snippet length {length} is below 3")));
    }
    if stride == 0 {
        return Err(Error::invalid("snippet stride must be positive"));
    }
    if est.len() != gt.len() {
        return Err(Error::shape(format!("trajectories have {} and {} frames", est.len(), gt.len())));
    }
    if est.len() < length {
        return Err(Error::degenerate(format!("{} frames is shorter than one {length}-frame snippet", est.len())));
    }
    let starts: Vec<usize> = (0..=est.len() - length).step_by(stride).collect();
    let per: Vec<f64> = starts
        .par_iter()
        .map(|&s| ate_rmse(&est[s..s + length], &gt[s..s + length], AlignMode::Similarity))
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let mean = per.iter().sum::<f64>() / n;
    let var = per.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(SnippetReport {
        mean_ate: mean,
        std_ate: var.sqrt(),
        n_snippets: per.len(),
        per_snippet: per,
    })
}
