//! `eval-depth` and `eval-ate` over the output directory of a `solve` run.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use fmba_core::eval::{depth_metrics, median_scale, positions, snippet_eval, DepthEvalReport, SnippetReport};
use fmba_core::io::{read_depth_pfm, read_poses};
use fmba_core::{Error, Result, SE3Pose};

use crate::config::RunConfig;
use crate::dataset::{ingest, load, tracklet_windows, DatasetIndex};
use crate::solve::{tracklet_dir, Manifest, Status};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDepthReport {
    pub frame: String,
    /// Median scale `median(gt) / median(pred)` applied before the metrics.
    pub scale: f64,
    pub metrics: DepthEvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthReport {
    pub cap: f64,
    /// Per-metric mean over frames.
    pub mean: DepthEvalReport,
    pub frames: Vec<FrameDepthReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteReport {
    pub snippet_length: usize,
    pub snippet_stride: usize,
    /// Frames of the chained trajectory, in order.
    pub frames: Vec<String>,
    pub ate: SnippetReport,
    pub formatted: String,
}

fn predictions_dir(cfg: &RunConfig) -> Result<&Path> {
    cfg.eval
        .predictions
        .as_deref()
        .ok_or_else(|| Error::invalid("no predictions directory (set eval.predictions or pass --predictions)"))
}

/// Successful tracklets of the manifest, checked against the windows the dataset implies.
fn predicted_targets(cfg: &RunConfig, index: &DatasetIndex, manifest: &Manifest) -> Result<Vec<usize>> {
    let by_name: BTreeMap<&str, usize> = index.frames.iter().map(|f| (f.name.as_str(), f.index)).collect();
    let mut unknown = Vec::new();
    let mut predicted = BTreeMap::new();
    for t in manifest.tracklets.iter().filter(|t| t.status == Status::Ok) {
        match by_name.get(t.target.as_str()) {
            Some(&i) => {
                predicted.insert(i, t);
            }
            None => unknown.push(t.target.clone()),
        }
    }
    if !unknown.is_empty() {
        return Err(Error::invalid(format!(
            "predicted frames not in the dataset: {}",
            unknown.join(", ")
        )));
    }
    let expected = tracklet_windows(index.frames.len(), cfg.tracklet_length);
    let missing: Vec<String> = expected
        .iter()
        .filter(|w| !predicted.contains_key(&w.target))
        .map(|w| index.frames[w.target].name.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::invalid(format!("frames without predictions: {}", missing.join(", "))));
    }
    if predicted.len() != expected.len() {
        return Err(Error::invalid(format!(
            "{} predicted tracklets for {} expected windows (check tracklet_length)",
            predicted.len(),
            expected.len()
        )));
    }
    for w in &expected {
        let entry = predicted[&w.target];
        let names: Vec<&str> = w.sources.iter().map(|&s| index.frames[s].name.as_str()).collect();
        if entry.sources != names {
            return Err(Error::invalid(format!(
                "tracklet {} has sources {:?}, expected {:?}",
                entry.target, entry.sources, names
            )));
        }
    }
    Ok(expected.iter().map(|w| w.target).collect())
}

pub fn run_eval_depth(cfg: &RunConfig) -> Result<DepthReport> {
    let pred_dir = predictions_dir(cfg)?;
    let manifest = Manifest::load(pred_dir)?;
    let index = ingest(cfg.dataset_dir()?)?;
    let targets = predicted_targets(cfg, &index, &manifest)?;
    let no_gt: Vec<String> = targets
        .iter()
        .filter(|&&t| index.frames[t].depth.is_none())
        .map(|&t| index.frames[t].name.clone())
        .collect();
    if !no_gt.is_empty() {
        return Err(Error::invalid(format!("frames without ground-truth depth: {}", no_gt.join(", "))));
    }
    let data = load(index, Some([manifest.width, manifest.height]))?;
    let mut frames = Vec::with_capacity(targets.len());
    for &t in &targets {
        let name = &data.index.frames[t].name;
        let path = tracklet_dir(pred_dir, name).join("depth.pfm");
        let pred = read_depth_pfm(&path)?;
        let gt = data.depths[t].as_ref().expect("checked above");
        if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
            return Err(Error::format(&path, "predicted depth size differs from the manifest"));
        }
        let scale = median_scale(pred.values(), gt.values(), None)?;
        let scaled: Vec<f64> = pred.values().iter().map(|d| d * scale).collect();
        let metrics = depth_metrics(&scaled, gt.values(), None, cfg.eval.depth_cap)?;
        frames.push(FrameDepthReport {
            frame: name.clone(),
            scale,
            metrics,
        });
    }
    Ok(DepthReport {
        cap: cfg.eval.depth_cap,
        mean: mean_report(&frames),
        frames,
    })
}

fn mean_report(frames: &[FrameDepthReport]) -> DepthEvalReport {
    let n = frames.len() as f64;
    let mean = |f: fn(&DepthEvalReport) -> f64| frames.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
    DepthEvalReport {
        abs_rel: mean(|m| m.abs_rel),
        sq_rel: mean(|m| m.sq_rel),
        rmse: mean(|m| m.rmse),
        rmse_log: mean(|m| m.rmse_log),
        a1: mean(|m| m.a1),
        a2: mean(|m| m.a2),
        a3: mean(|m| m.a3),
    }
}

/// Camera-to-world trajectory from chained tracklet motions, with the first target at the
/// identity. Consecutive targets are linked by the earlier tracklet's pose to the next
/// frame; frames outside the target range come from the first and last tracklets.
pub fn chain_trajectory(targets: &[usize], sources: &[Vec<usize>], relative: &[Vec<SE3Pose>]) -> Result<Vec<SE3Pose>> {
    let (Some(&first), Some(&last)) = (targets.first(), targets.last()) else {
        return Err(Error::invalid("no tracklets to chain"));
    };
    let pose_to = |k: usize, frame: usize| -> Result<SE3Pose> {
        sources[k]
            .iter()
            .position(|&s| s == frame)
            .map(|j| relative[k][j])
            .ok_or_else(|| Error::invalid(format!("tracklet of frame {} does not contain frame {frame}", targets[k])))
    };
    let lo = sources[0].iter().copied().min().unwrap_or(first).min(first);
    let hi = sources[targets.len() - 1].iter().copied().max().unwrap_or(last).max(last);
    let mut traj: Vec<Option<SE3Pose>> = vec![None; hi - lo + 1];
    traj[first - lo] = Some(SE3Pose::identity());
    for k in 0..targets.len() - 1 {
        let (t, next) = (targets[k], targets[k + 1]);
        if next != t + 1 {
            return Err(Error::invalid(format!("targets {t} and {next} are not consecutive")));
        }
        let pt = traj[t - lo].expect("set on the previous step");
        traj[next - lo] = Some(pt.compose(&pose_to(k, next)?.inverse()));
    }
    for (k, t) in [(0, first), (targets.len() - 1, last)] {
        let pt = traj[t - lo].expect("targets are set");
        for &s in &sources[k] {
            if traj[s - lo].is_none() {
                traj[s - lo] = Some(pt.compose(&pose_to(k, s)?.inverse()));
            }
        }
    }
    traj.into_iter()
        .enumerate()
        .map(|(i, p)| p.ok_or_else(|| Error::invalid(format!("frame {} is not covered by any tracklet", lo + i))))
        .collect()
}

pub fn run_eval_ate(cfg: &RunConfig) -> Result<AteReport> {
    let pred_dir = predictions_dir(cfg)?;
    let manifest = Manifest::load(pred_dir)?;
    let index = ingest(cfg.dataset_dir()?)?;
    let targets = predicted_targets(cfg, &index, &manifest)?;
    let windows = tracklet_windows(index.frames.len(), cfg.tracklet_length);
    let mut relative = Vec::with_capacity(windows.len());
    for w in &windows {
        let path = tracklet_dir(pred_dir, &index.frames[w.target].name).join("poses.txt");
        let poses = read_poses(&path)?;
        if poses.len() != w.sources.len() {
            return Err(Error::format(&path, format!("{} poses for {} sources", poses.len(), w.sources.len())));
        }
        relative.push(poses);
    }
    let sources: Vec<Vec<usize>> = windows.iter().map(|w| w.sources.clone()).collect();
    let est = chain_trajectory(&targets, &sources, &relative)?;
    let no_gt: Vec<String> = index.frames.iter().filter(|f| f.pose.is_none()).map(|f| f.name.clone()).collect();
    if !no_gt.is_empty() {
        return Err(Error::invalid(format!("frames without ground-truth poses: {}", no_gt.join(", "))));
    }
    let gt: Vec<SE3Pose> = index.frames.iter().map(|f| f.pose.expect("checked above")).collect();
    let ate = snippet_eval(&positions(&est), &positions(&gt), cfg.eval.snippet_length, cfg.eval.snippet_stride)?;
    Ok(AteReport {
        snippet_length: cfg.eval.snippet_length,
        snippet_stride: cfg.eval.snippet_stride,
        frames: index.frames.iter().map(|f| f.name.clone()).collect(),
        formatted: ate.formatted(),
        ate,
    })
}
