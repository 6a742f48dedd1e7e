//! `train-demo`: end-to-end training of the feature network and damping MLP on a small
//! synthetic dataset.
//!
//! Output layout:
//!
//! ```text
//! loss_curve.csv         step,l_photo,l_smooth,l_match,l_total (steps + 1 rows)
//! weights.bin(.json)     final feature network and damping MLP
//! train_report.json      initial and final loss
//! failure/               written instead when a loss is not finite
//! ```

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use fmba_core::ba::DampingMlp;
use fmba_core::features::FeatureNet;
use fmba_core::io::{write_bytes, write_json, write_pfm, write_poses};
use fmba_core::nn::WeightBundle;
use fmba_core::synthesis::LossReport;
use fmba_core::train::{try_batch_loss, Tracklet, Trainer};
use fmba_core::{Error, Result};

use crate::config::{ErrorMode, FeatureSource, RunConfig};
use crate::dataset::{ingest, load, tracklet_windows, LoadedDataset, TrackletFrames};
use crate::pipeline::{damping_mlp, feature_net, init_pose_file, initial_state, MLP_PREFIX};

pub const CURVE_FILE: &str = "loss_curve.csv";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const REPORT_FILE: &str = "train_report.json";
pub const FAILURE_DIR: &str = "failure";
pub const CURVE_HEADER: &str = "step,l_photo,l_smooth,l_match,l_total";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub tracklets: usize,
    pub initial: f64,
    #[serde(rename = "final")]
    pub last: f64,
    /// `final / initial`.
    pub ratio: f64,
    pub curve: Vec<LossReport>,
}

#[derive(Debug, Serialize)]
struct FailureInfo<'a> {
    step: usize,
    tracklet: usize,
    target: &'a str,
    sources: Vec<&'a str>,
    error: String,
}

/// Bundle with the feature network and the damping-MLP tensors.
pub fn weight_bundle(net: &FeatureNet, mlp: &DampingMlp) -> WeightBundle {
    let mut bundle = net.to_bundle();
    bundle.tensors.extend(mlp.to_tensors(MLP_PREFIX));
    bundle
}

pub fn curve_csv(curve: &[LossReport]) -> String {
    let mut s = String::from(CURVE_HEADER);
    s.push('\n');
    for (i, r) in curve.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{},{},{}", r.l_photo, r.l_smooth, r.l_match, r.l_total);
    }
    s
}

pub fn run_train_demo(cfg: &RunConfig) -> Result<TrainReport> {
    if cfg.error_mode != ErrorMode::Feature || cfg.features.source != FeatureSource::Network {
        return Err(Error::invalid("train-demo trains the feature network: needs error_mode = feature, features.source = network"));
    }
    let out = cfg.output_dir()?;
    let data = load(ingest(cfg.dataset_dir()?)?, cfg.resolution)?;
    if data.width > 64 || data.height > 64 {
        return Err(Error::invalid(format!(
            "train-demo runs at most 64×64, got {}×{} (set resolution)",
            data.width, data.height
        )));
    }
    let windows = tracklet_windows(data.images.len(), cfg.tracklet_length);
    if windows.is_empty() {
        return Err(Error::invalid("dataset is shorter than one tracklet"));
    }
    let pose_file = init_pose_file(cfg, data.images.len())?;
    let tracklets = windows
        .iter()
        .map(|w| {
            Ok(Tracklet {
                target: data.images[w.target].clone(),
                sources: w.sources.iter().map(|&s| data.images[s].clone()).collect(),
                k: data.k,
                init: initial_state(cfg, &data, w, pose_file.as_deref())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut net = feature_net(cfg, data.images[0].channels())?;
    let mut mlp = damping_mlp(cfg, net.channels())?;
    let mut trainer = Trainer::new(cfg.train)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut curve = Vec::with_capacity(cfg.train.steps + 1);
    for step in 0..=cfg.train.steps {
        let grad = step < cfg.train.steps;
        match try_batch_loss(&net, &mlp, &tracklets, &cfg.schedule, &cfg.loss, grad) {
            Ok((report, g)) => {
                curve.push(report);
                if let Some(g) = g {
                    trainer.apply(&mut net, &mut mlp, g);
                }
            }
            Err(f) => {
                let w = &windows[f.index];
                dump_failure(out, &data, w, &tracklets[f.index], step, f.index, &f.error, &net, &mlp)?;
                write_bytes(&out.join(CURVE_FILE), curve_csv(&curve).as_bytes())?;
                return Err(match f.error {
                    e @ (Error::Degenerate(_) | Error::BehindCamera { .. }) => Error::degenerate(format!(
                        "step {step}, target {}: {e}; diagnostics in {}",
                        data.index.frames[w.target].name,
                        out.join(FAILURE_DIR).display()
                    )),
                    e => e,
                });
            }
        }
    }
    write_bytes(&out.join(CURVE_FILE), curve_csv(&curve).as_bytes())?;
    weight_bundle(&net, &mlp).save(&out.join(WEIGHTS_FILE))?;
    let initial = curve[0].l_total;
    let last = curve[curve.len() - 1].l_total;
    let report = TrainReport {
        steps: cfg.train.steps,
        tracklets: tracklets.len(),
        initial,
        last,
        ratio: last / initial,
        curve,
    };
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn dump_failure(
    out: &Path,
    data: &LoadedDataset,
    w: &TrackletFrames,
    t: &Tracklet,
    step: usize,
    index: usize,
    error: &Error,
    net: &FeatureNet,
    mlp: &DampingMlp,
) -> Result<()> {
    let dir = out.join(FAILURE_DIR);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let name = |i: usize| data.index.frames[i].name.as_str();
    write_json(
        &dir.join("failure.json"),
        &FailureInfo {
            step,
            tracklet: index,
            target: name(w.target),
            sources: w.sources.iter().map(|&s| name(s)).collect(),
            error: error.to_string(),
        },
    )?;
    write_pfm(&dir.join("init_depth.pfm"), &t.init.depth)?;
    write_poses(&dir.join("init_poses.txt"), &t.init.poses)?;
    weight_bundle(net, mlp).save(&dir.join(WEIGHTS_FILE))
}
