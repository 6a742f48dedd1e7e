//! Differentiable bundle-adjustment layer over per-pixel target depth and source poses.

mod backward;
pub mod lm;
pub mod mlp;
pub mod residual;
mod solve;

use nalgebra::{Matrix3, Vector3, Vector6};

pub use backward::{ba_backward, BaGradients, StateGrad};
pub use lm::{lm_step, DampedSystem, LmStep, NormalEquations};
pub use mlp::{global_average_pool, predict_lambda, DampingMlp, DampingMlpGrad};
pub use residual::{evaluate_level, JacobianBlocks, LevelProblem, ResidualVector};
pub use solve::{ba_solve, IterationRecord, Schedule, SolveTrace, TraceRecord};

use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::features::FeaturePyramid;
use crate::geometry::{exp_coords, se3_log, CameraIntrinsics, SE3Pose, Twist};
use crate::raster::Raster;

/// Lower bound applied to depth after every update.
pub const DEPTH_MIN: f64 = 1e-3;

/// Full-resolution target depth and one `T_{t→s}` per source view; the target pose is
/// the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct BaState {
    pub depth: DepthMap,
    pub poses: Vec<SE3Pose>,
}

impl BaState {
    pub fn new(depth: DepthMap, poses: Vec<SE3Pose>) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::invalid("at least one source pose is required"));
        }
        Ok(BaState { depth, poses })
    }

    pub fn twists(&self) -> Vec<Twist> {
        self.poses.iter().map(se3_log).collect()
    }
}

/// Target and source pyramids of one tracklet with full-resolution intrinsics.
#[derive(Debug, Clone)]
pub struct BaInputs {
    pub target: FeaturePyramid,
    pub sources: Vec<FeaturePyramid>,
    pub k: CameraIntrinsics,
}

impl BaInputs {
    pub fn level_rasters(&self, level: usize) -> (Raster, Vec<Raster>) {
        (
            self.target.level(level).clone(),
            self.sources.iter().map(|p| p.level(level).clone()).collect(),
        )
    }

    pub fn level_intrinsics(&self, level: usize) -> CameraIntrinsics {
        self.k.scaled(1.0 / (1u32 << level) as f64)
    }
}

/// One iteration may scale a pixel's depth by at most this factor either way.
pub const DEPTH_STEP_RATIO: f64 = 1.25;

/// Limits each Δd so that `depth + Δd` stays within `[depth/ρ, depth·ρ]`. Returns the
/// limited step and, per pixel, the ratio it was pinned to.
pub fn bound_depth_step(depth: &DepthMap, step: &LmStep) -> (LmStep, Vec<Option<f64>>) {
    let (values, pinned): (Vec<f64>, Vec<Option<f64>>) = depth
        .values()
        .iter()
        .zip(&step.delta_depth)
        .map(|(d, dd)| {
            if d + dd > d * DEPTH_STEP_RATIO {
                (d * (DEPTH_STEP_RATIO - 1.0), Some(DEPTH_STEP_RATIO))
            } else if d + dd < d / DEPTH_STEP_RATIO {
                (d * (1.0 / DEPTH_STEP_RATIO - 1.0), Some(1.0 / DEPTH_STEP_RATIO))
            } else {
                (*dd, None)
            }
        })
        .unzip();
    let bounded = LmStep {
        delta_depth: values,
        delta_pose: step.delta_pose.clone(),
        stalled: step.stalled,
    };
    (bounded, pinned)
}

/// `depth′ = max(depth + Δd, d_min)`, `T′ = exp(Δξ)·T`.
pub fn apply_update(depth: &DepthMap, poses: &[SE3Pose], step: &LmStep) -> (DepthMap, Vec<SE3Pose>) {
    let values = depth
        .values()
        .iter()
        .zip(&step.delta_depth)
        .map(|(d, dd)| (d + dd).max(DEPTH_MIN))
        .collect();
    let poses = poses
        .iter()
        .zip(&step.delta_pose)
        .map(|(t, xi)| exp_coords(xi).compose(t))
        .collect();
    (DepthMap::from_vec_unchecked(depth.height(), depth.width(), values), poses)
}

/// Shared residual evaluation at one level for the given inputs.
fn level_problem<'a>(target: &'a Raster, sources: &'a [Raster], k: CameraIntrinsics) -> LevelProblem<'a> {
    LevelProblem { target, sources, k }
}

/// Feature-metric residual of a full-resolution state at pyramid `level` (1..=3).
pub fn feature_residual(state: &BaState, inputs: &BaInputs, level: usize) -> Result<ResidualVector> {
    if !(1..=3).contains(&level) {
        return Err(Error::invalid(format!("pyramid level {level} is outside 1..=3")));
    }
    let (t, s) = inputs.level_rasters(level);
    let d = state.depth.downsample(1 << level)?;
    Ok(evaluate_level(&level_problem(&t, &s, inputs.level_intrinsics(level)), &d, &state.poses, false)?.0)
}

/// Same contract as [`feature_residual`] with block-averaged intensities as features.
pub fn photometric_residual(state: &BaState, target: &Raster, sources: &[Raster], k: &CameraIntrinsics, level: usize) -> Result<ResidualVector> {
    let inputs = BaInputs {
        target: FeaturePyramid::from_image(target)?,
        sources: sources.iter().map(FeaturePyramid::from_image).collect::<Result<_>>()?,
        k: *k,
    };
    feature_residual(state, &inputs, level)
}

/// Jacobian of [`feature_residual`] with respect to level depth and left pose twists.
pub fn residual_jacobian(state: &BaState, inputs: &BaInputs, level: usize) -> Result<JacobianBlocks> {
    if !(1..=3).contains(&level) {
        return Err(Error::invalid(format!("pyramid level {level} is outside 1..=3")));
    }
    let (t, s) = inputs.level_rasters(level);
    let d = state.depth.downsample(1 << level)?;
    let (_, j) = evaluate_level(&level_problem(&t, &s, inputs.level_intrinsics(level)), &d, &state.poses, true)?;
    Ok(j.expect("jacobian requested"))
}

/// `(R̄, t̄)` per pose from a left-twist gradient, and back.
pub fn left_gradients(poses: &[SE3Pose], rotation: &[Matrix3<f64>], translation: &[Vector3<f64>]) -> Vec<Vector6<f64>> {
    poses
        .iter()
        .zip(rotation.iter().zip(translation))
        .map(|(p, (r, t))| crate::geometry::left_gradient(p, r, t))
        .collect()
}
