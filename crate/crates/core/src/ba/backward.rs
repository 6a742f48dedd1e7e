//! Reverse pass through the unrolled solve.

use nalgebra::{DVector, Matrix3, Vector3, Vector6};
use rayon::prelude::*;

use super::lm::{split_pose, DAMPING_FLOOR};
use super::mlp::{global_average_pool_adjoint, DampingMlp, DampingMlpGrad};
use super::residual::evaluate_level_vjp;
use super::solve::SolveTrace;
use super::{level_problem, BaInputs, DEPTH_MIN};
use crate::error::{Error, Result};
use crate::geometry::{exp_jacobian, left_gradient};
use crate::raster::Raster;

/// Gradient of a scalar with respect to a [`super::BaState`]: full-resolution depth and
/// Euclidean partials of each pose's rotation and translation.
#[derive(Debug, Clone, PartialEq)]
pub struct StateGrad {
    pub depth: Vec<f64>,
    pub rotation: Vec<Matrix3<f64>>,
    pub translation: Vec<Vector3<f64>>,
}

impl StateGrad {
    pub fn zeros(pixels: usize, views: usize) -> Self {
        StateGrad {
            depth: vec![0.0; pixels],
            rotation: vec![Matrix3::zeros(); views],
            translation: vec![Vector3::zeros(); views],
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaGradients {
    /// Per pyramid level (1..=3 stored at 0..3).
    pub target_features: [Raster; 3],
    pub source_features: Vec<[Raster; 3]>,
    pub mlp: DampingMlpGrad,
    pub init: StateGrad,
    /// Left-twist form of `init.rotation`/`init.translation`.
    pub init_pose_left: Vec<Vector6<f64>>,
}

pub fn ba_backward(trace: &SolveTrace, inputs: &BaInputs, mlp: &DampingMlp, upstream: &StateGrad) -> Result<BaGradients> {
    let n = trace.init.poses.len();
    if upstream.depth.len() != trace.init.depth.len() || upstream.rotation.len() != n || upstream.translation.len() != n {
        return Err(Error::shape("upstream gradient does not match the solved state"));
    }
    let zeros_like = |p: &crate::features::FeaturePyramid| -> [Raster; 3] {
        std::array::from_fn(|k| {
            let l = p.level(k + 1);
            Raster::zeros(l.channels(), l.height(), l.width())
        })
    };
    let mut grads = BaGradients {
        target_features: zeros_like(&inputs.target),
        source_features: inputs.sources.iter().map(zeros_like).collect(),
        mlp: mlp.zero_grad(),
        init: upstream.clone(),
        init_pose_left: Vec::new(),
    };
    let (full_h, full_w) = (trace.init.depth.height(), trace.init.depth.width());
    let mut d_full = upstream.depth.clone();
    let mut r_bar = upstream.rotation.clone();
    let mut t_bar = upstream.translation.clone();

    for lr in trace.levels.iter().rev() {
        let level = lr.level;
        let factor = 1usize << level;
        let (target, sources) = inputs.level_rasters(level);
        let problem = level_problem(&target, &sources, inputs.level_intrinsics(level));

        // full_after = max(full_before + up(end − start), d_min)
        let masked: Vec<f64> = d_full
            .iter()
            .zip(&lr.unclamped)
            .map(|(g, ok)| if *ok { *g } else { 0.0 })
            .collect();
        let masked_r = Raster::from_vec_unchecked(1, full_h, full_w, masked.clone());
        let blocks = masked_r.block_sum(factor);
        let mut d_level: Vec<f64> = blocks.data().to_vec();
        let start_from_transition: Vec<f64> = blocks.data().iter().map(|v| -v).collect();
        let mut d_full_before = masked;

        for it in lr.iterations.iter().rev() {
            let step = &it.step;
            // Through apply_update.
            let mut delta_d_bar = vec![0.0; d_level.len()];
            for (q, (d, dd)) in it.depth.values().iter().zip(&it.applied_depth).enumerate() {
                if d + dd <= DEPTH_MIN {
                    d_level[q] = 0.0;
                } else if let Some(r) = it.pinned[q] {
                    // Applied Δd = d·(r − 1) does not depend on the raw step.
                    d_level[q] *= r;
                } else {
                    delta_d_bar[q] = d_level[q];
                }
            }
            let mut delta_p_bar = Vec::with_capacity(n);
            for i in 0..n {
                let pose = &it.poses[i];
                let ej = exp_jacobian(&step.delta_pose[i]);
                let rd = *ej.pose.rotation();
                let r_delta_bar = r_bar[i] * pose.rotation().transpose() + t_bar[i] * pose.translation().transpose();
                let t_delta_bar = t_bar[i];
                let mut g = Vector6::zeros();
                for k in 0..6 {
                    g[k] = r_delta_bar.component_mul(&ej.d_rotation[k]).sum() + t_delta_bar.dot(&ej.d_translation[k]);
                }
                delta_p_bar.push(g);
                r_bar[i] = rd.transpose() * r_bar[i];
                t_bar[i] = rd.transpose() * t_bar[i];
            }
            if step.stalled {
                continue;
            }
            // Through Δ = −M⁻¹ JᵀE.
            let dp_bar = DVector::from_iterator(6 * n, delta_p_bar.iter().flat_map(|v| v.iter().copied()));
            let Some((w_d, w_p)) = it.system.solve(&it.normal, &delta_d_bar, &dp_bar) else {
                continue;
            };
            let w_p = split_pose(&w_p);
            let sys = &it.system;
            let lambda = sys.lambda;
            let mut lambda_bar = 0.0;
            for q in 0..w_d.len() {
                lambda_bar -= w_d[q] * step.delta_depth[q] * sys.damping_depth[q];
            }
            for i in 0..n {
                for a in 0..6 {
                    lambda_bar -= w_p[i][a] * step.delta_pose[i][a] * sys.damping_pose[6 * i + a];
                }
            }
            let e = &it.residual;
            let j = &it.jacobian;
            let c = e.channels;
            let hdd = &it.normal.hdd;
            let hpp_diag: Vec<f64> = (0..6 * n).map(|k| it.normal.hpp[(k, k)]).collect();
            struct Rows {
                e: Vec<f64>,
                jd: Vec<f64>,
                jp: Vec<[f64; 6]>,
            }
            let rows: Vec<Rows> = (0..e.pixels)
                .into_par_iter()
                .map(|q| {
                    let mut out = Rows {
                        e: vec![0.0; n * c],
                        jd: vec![0.0; n * c],
                        jp: vec![[0.0; 6]; n * c],
                    };
                    let damp_d = hdd[q] > DAMPING_FLOOR;
                    for i in 0..n {
                        if !e.is_valid(q, i) {
                            continue;
                        }
                        let er = e.row(q, i);
                        let (jd, jp) = j.rows(q, i);
                        let (dd, wd) = (step.delta_depth[q], w_d[q]);
                        let (dp, wp) = (&step.delta_pose[i], &w_p[i]);
                        for ch in 0..c {
                            let jpv = Vector6::from_column_slice(&jp[ch]);
                            let j_delta = jd[ch] * dd + jpv.dot(dp);
                            let j_w = jd[ch] * wd + jpv.dot(wp);
                            let r = i * c + ch;
                            out.e[r] = -j_w;
                            let s = j_delta + er[ch];
                            out.jd[r] = -wd * s - dd * j_w - if damp_d { 2.0 * lambda * jd[ch] * wd * dd } else { 0.0 };
                            for a in 0..6 {
                                let damp = if hpp_diag[6 * i + a] > DAMPING_FLOOR {
                                    2.0 * lambda * jp[ch][a] * wp[a] * dp[a]
                                } else {
                                    0.0
                                };
                                out.jp[r][a] = -wp[a] * s - dp[a] * j_w - damp;
                            }
                        }
                    }
                    out
                })
                .collect();
            let mut e_bar = Vec::with_capacity(e.values.len());
            let mut jd_bar = Vec::with_capacity(e.values.len());
            let mut jp_bar = Vec::with_capacity(e.values.len());
            for r in rows {
                e_bar.extend(r.e);
                jd_bar.extend(r.jd);
                jp_bar.extend(r.jp);
            }
            // λ = MLP(GAP(E)).
            let x_bar = mlp.backward(&it.mlp_tape, lambda_bar, &mut grads.mlp);
            global_average_pool_adjoint(e, &x_bar, &mut e_bar);

            let adj = evaluate_level_vjp(&problem, &it.depth, &it.poses, &e_bar, &jd_bar, &jp_bar);
            for (g, a) in d_level.iter_mut().zip(&adj.depth) {
                *g += a;
            }
            for i in 0..n {
                r_bar[i] += adj.rotation[i];
                t_bar[i] += adj.translation[i];
            }
            grads.target_features[level - 1].add_assign(&adj.target);
            for (gs, a) in grads.source_features.iter_mut().zip(&adj.sources) {
                gs[level - 1].add_assign(a);
            }
        }
        // start = downsample(full_before), used both as iteration input and in the transition.
        for (g, s) in d_level.iter_mut().zip(&start_from_transition) {
            *g += s;
        }
        let (lh, lw) = (lr.start.height(), lr.start.width());
        let spread = Raster::from_vec_unchecked(1, lh, lw, d_level).downsample_mean_adjoint(factor);
        for (g, s) in d_full_before.iter_mut().zip(spread.data()) {
            *g += s;
        }
        d_full = d_full_before;
    }
    grads.init_pose_left = trace
        .init
        .poses
        .iter()
        .zip(r_bar.iter().zip(&t_bar))
        .map(|(p, (r, t))| left_gradient(p, r, t))
        .collect();
    grads.init = StateGrad {
        depth: d_full,
        rotation: r_bar,
        translation: t_bar,
    };
    Ok(grads)
}
