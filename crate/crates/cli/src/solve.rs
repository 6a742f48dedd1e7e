//! `solve`: runs the BA layer on every tracklet of a dataset.
//!
//! Output layout:
//!
//! ```text
//! manifest.json                  one entry per tracklet with its status
//! tracklets/<target>/depth.pfm   refined target depth
//! tracklets/<target>/poses.txt   refined target→source poses, in source order
//! tracklets/<target>/loss.json   view-synthesis loss before and after the solve
//! tracklets/<target>/trace.jsonl one record per solver iteration
//! ```

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use fmba_core::ba::{ba_solve, BaState, TraceRecord};
use fmba_core::io::{read_json, write_bytes, write_json, write_pfm, write_poses};
use fmba_core::synthesis::{total_loss, ImageScales, LossReport};
use fmba_core::{Error, Result};

use crate::config::RunConfig;
use crate::dataset::{ingest, load, tracklet_windows, LoadedDataset, TrackletFrames};
use crate::pipeline::{ba_inputs, damping_mlp, frame_pyramids, init_pose_file, initial_state};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRACKLETS_DIR: &str = "tracklets";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackletEntry {
    pub target: String,
    pub sources: Vec<String>,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub tracklets: Vec<TrackletEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join(MANIFEST_FILE))
    }

    pub fn failed(&self) -> usize {
        self.tracklets.iter().filter(|t| t.status == Status::Failed).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub initial: LossReport,
    #[serde(rename = "final")]
    pub refined: LossReport,
}

pub fn tracklet_dir(out: &Path, target: &str) -> std::path::PathBuf {
    out.join(TRACKLETS_DIR).join(target)
}

/// Solves every tracklet and writes the outputs. Returns the manifest; tracklets that fail
/// numerically are recorded as failed and turn the overall result into an error after the
/// manifest is written.
pub fn run_solve(cfg: &RunConfig) -> Result<Manifest> {
    let out = cfg.output_dir()?;
    let data = load(ingest(cfg.dataset_dir()?)?, cfg.resolution)?;
    let windows = tracklet_windows(data.images.len(), cfg.tracklet_length);
    if windows.is_empty() {
        return Err(Error::invalid(format!(
            "{} frames are fewer than one tracklet of {}",
            data.images.len(),
            cfg.tracklet_length
        )));
    }
    let pose_file = init_pose_file(cfg, data.images.len())?;
    let inits = windows
        .iter()
        .map(|w| initial_state(cfg, &data, w, pose_file.as_deref()))
        .collect::<Result<Vec<_>>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::invalid(format!("worker pool: {e}")))?;
    let pyramids = pool.install(|| frame_pyramids(cfg, &data))?;
    let channels = pyramids[0].channels();
    let mlp = damping_mlp(cfg, channels)?;
    let tracklets_dir = out.join(TRACKLETS_DIR);
    std::fs::create_dir_all(&tracklets_dir).map_err(|e| Error::io(&tracklets_dir, e))?;

    let entries = pool.install(|| {
        windows
            .par_iter()
            .zip(inits.par_iter())
            .map(|(w, init)| {
                let entry = entry_for(&data, w);
                match solve_one(cfg, &data, w, init, &pyramids, &mlp) {
                    Ok(sol) => {
                        write_tracklet(out, &entry.target, &sol)?;
                        Ok(entry)
                    }
                    Err(e) if e.is_numeric() || matches!(e, Error::InvalidArgument(_)) => Ok(TrackletEntry {
                        status: Status::Failed,
                        error: Some(e.to_string()),
                        ..entry
                    }),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let manifest = Manifest {
        schema_version: crate::config::SCHEMA_VERSION,
        seed: cfg.seed,
        width: data.width,
        height: data.height,
        tracklets: entries,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    match manifest.failed() {
        0 => Ok(manifest),
        n => Err(Error::degenerate(format!(
            "{n} of {} tracklets failed; see {}",
            manifest.tracklets.len(),
            out.join(MANIFEST_FILE).display()
        ))),
    }
}

fn entry_for(data: &LoadedDataset, w: &TrackletFrames) -> TrackletEntry {
    let name = |i: usize| data.index.frames[i].name.clone();
    TrackletEntry {
        target: name(w.target),
        sources: w.sources.iter().map(|&s| name(s)).collect(),
        status: Status::Ok,
        error: None,
    }
}

struct Solution {
    state: BaState,
    records: Vec<TraceRecord>,
    loss: LossSummary,
}

fn solve_one(
    cfg: &RunConfig,
    data: &LoadedDataset,
    w: &TrackletFrames,
    init: &BaState,
    pyramids: &[fmba_core::features::FeaturePyramid],
    mlp: &fmba_core::ba::DampingMlp,
) -> Result<Solution> {
    let inputs = ba_inputs(pyramids, data, w);
    let (state, trace) = ba_solve(init, &inputs, mlp, &cfg.schedule)?;
    let sources: Vec<_> = w.sources.iter().map(|&s| data.images[s].clone()).collect();
    let images = ImageScales::new(&data.images[w.target], &sources, &cfg.loss.scales)?;
    let (initial, _) = total_loss(init, &images, &data.k, &cfg.loss, false)?;
    let (refined, _) = total_loss(&state, &images, &data.k, &cfg.loss, false)?;
    Ok(Solution {
        state,
        records: trace.records,
        loss: LossSummary { initial, refined },
    })
}

fn write_tracklet(out: &Path, target: &str, sol: &Solution) -> Result<()> {
    let dir = tracklet_dir(out, target);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_pfm(&dir.join("depth.pfm"), &sol.state.depth)?;
    write_poses(&dir.join("poses.txt"), &sol.state.poses)?;
    write_json(&dir.join("loss.json"), &sol.loss)?;
    let mut lines = Vec::new();
    for r in &sol.records {
        serde_json::to_writer(&mut lines, r).map_err(|e| Error::format(dir.join("trace.jsonl"), e.to_string()))?;
        lines.write_all(b"\n").map_err(|e| Error::io(dir.join("trace.jsonl"), e))?;
    }
    write_bytes(&dir.join("trace.jsonl"), &lines)
}
