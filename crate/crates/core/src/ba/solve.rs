//! Fixed-schedule coarse-to-fine Levenberg-Marquardt loop.

use serde::{Deserialize, Serialize};

use super::lm::{lm_solve, DampedSystem, LmStep, NormalEquations};
use super::mlp::{global_average_pool, lambda_of, DampingMlp, MlpTape};
use super::residual::{evaluate_level, JacobianBlocks, ResidualVector};
use super::{apply_update, bound_depth_step, level_problem, BaInputs, BaState, DEPTH_MIN};
use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::geometry::SE3Pose;

/// Pyramid levels (coarsest first) and iterations per level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub levels: Vec<usize>,
    pub iterations: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            levels: vec![3, 2, 1],
            iterations: 6,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() || self.iterations == 0 {
            return Err(Error::invalid("schedule needs at least one level and one iteration"));
        }
        if let Some(l) = self.levels.iter().find(|l| !(1..=3).contains(*l)) {
            return Err(Error::invalid(format!("schedule level {l} is outside 1..=3")));
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        self.levels.len() * self.iterations
    }
}

/// One line of the solve trace dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub level: usize,
    pub iter: usize,
    pub lambda: f64,
    pub residual_l2: f64,
    pub masked_fraction: f64,
    pub step_norm: f64,
    pub stalled: bool,
}

/// Everything one iteration needs for the reverse pass.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub depth: DepthMap,
    pub poses: Vec<SE3Pose>,
    pub residual: ResidualVector,
    pub jacobian: JacobianBlocks,
    pub(crate) mlp_tape: MlpTape,
    pub normal: NormalEquations,
    pub system: DampedSystem,
    /// Raw damped step.
    pub step: LmStep,
    /// Depth step after [`bound_depth_step`], as applied.
    pub applied_depth: Vec<f64>,
    pub pinned: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub(crate) struct LevelRecord {
    pub level: usize,
    /// Block-averaged depth entering the level.
    pub start: DepthMap,
    /// `full_before + up(end − start) > d_min`, per full-resolution pixel.
    pub unclamped: Vec<bool>,
    pub iterations: Vec<IterationRecord>,
}

#[derive(Debug, Clone)]
pub struct SolveTrace {
    pub records: Vec<TraceRecord>,
    pub(crate) levels: Vec<LevelRecord>,
    pub init: BaState,
}

impl SolveTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iterations(&self) -> impl Iterator<Item = &IterationRecord> {
        self.levels.iter().flat_map(|l| l.iterations.iter())
    }

    /// One JSON object per iteration, newline separated.
    pub fn to_json_lines(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("trace record serialises") + "\n")
            .collect()
    }
}

/// Runs every scheduled iteration (no early exit). Each level refines the block-averaged
/// depth and adds the change back to the full-resolution map.
pub fn ba_solve(init: &BaState, inputs: &BaInputs, mlp: &DampingMlp, schedule: &Schedule) -> Result<(BaState, SolveTrace)> {
    schedule.validate()?;
    if inputs.sources.len() != init.poses.len() {
        return Err(Error::shape(format!(
            "{} source pyramids for {} poses",
            inputs.sources.len(),
            init.poses.len()
        )));
    }
    if mlp.inputs() != inputs.target.channels() {
        return Err(Error::shape(format!(
            "damping network expects {} channels, features have {}",
            mlp.inputs(),
            inputs.target.channels()
        )));
    }
    let mut full = init.depth.clone();
    let mut poses = init.poses.clone();
    let mut records = Vec::with_capacity(schedule.total_iterations());
    let mut levels = Vec::with_capacity(schedule.levels.len());
    for &level in &schedule.levels {
        let factor = 1usize << level;
        let (target, sources) = inputs.level_rasters(level);
        let problem = level_problem(&target, &sources, inputs.level_intrinsics(level));
        let start = full.downsample(factor)?;
        if (start.height(), start.width()) != (target.height(), target.width()) {
            return Err(Error::shape(format!(
                "level {level} depth {}×{} does not match features {}×{}",
                start.height(),
                start.width(),
                target.height(),
                target.width()
            )));
        }
        let mut depth = start.clone();
        let mut iterations = Vec::with_capacity(schedule.iterations);
        for iter in 0..schedule.iterations {
            let (e, j) = evaluate_level(&problem, &depth, &poses, true).map_err(|err| match err {
                Error::Degenerate(msg) => Error::degenerate(format!("level {level}, iteration {iter}: {msg}")),
                other => other,
            })?;
            let j = j.expect("jacobian requested");
            let tape = mlp.forward_taped(&global_average_pool(&e));
            let lambda = lambda_of(&tape);
            let ne = NormalEquations::build(&e, &j);
            let (step, system) = lm_solve(&ne, lambda);
            records.push(TraceRecord {
                level,
                iter,
                lambda,
                residual_l2: e.norm(),
                masked_fraction: e.masked_fraction(),
                step_norm: step.norm(),
                stalled: step.stalled,
            });
            let (applied, pinned) = bound_depth_step(&depth, &step);
            let (next_depth, next_poses) = apply_update(&depth, &poses, &applied);
            iterations.push(IterationRecord {
                depth,
                poses,
                residual: e,
                jacobian: j,
                mlp_tape: tape,
                normal: ne,
                system,
                step,
                applied_depth: applied.delta_depth,
                pinned,
            });
            depth = next_depth;
            poses = next_poses;
        }
        let change: Vec<f64> = depth.values().iter().zip(start.values()).map(|(a, b)| a - b).collect();
        let up = crate::raster::Raster::from_vec_unchecked(1, depth.height(), depth.width(), change).upsample_nearest(factor);
        let sum: Vec<f64> = full.values().iter().zip(up.data()).map(|(d, c)| d + c).collect();
        let unclamped: Vec<bool> = sum.iter().map(|v| *v > DEPTH_MIN).collect();
        let next_full = DepthMap::from_vec_unchecked(full.height(), full.width(), sum.iter().map(|v| v.max(DEPTH_MIN)).collect());
        levels.push(LevelRecord {
            level,
            start,
            unclamped,
            iterations,
        });
        full = next_full;
    }
    let out = BaState { depth: full, poses };
    Ok((
        out,
        SolveTrace {
            records,
            levels,
            init: init.clone(),
        },
    ))
}
