use std::path::{Path, PathBuf};
use std::process::Command;

use fmba::config::{DepthInit, FeatureSource, InitConfig, PoseInit, RunConfig};
use fmba::dataset::{ingest, DEPTHS_DIR, POSES_FILE};
use fmba::evaluate::{run_eval_ate, run_eval_depth};
use fmba::solve::{run_solve, tracklet_dir, Manifest, MANIFEST_FILE};
use fmba::synthgen::run_synthgen;
use fmba_core::io::{read_depth_pfm, read_poses, write_json, write_pfm, write_poses};
use fmba_core::{DepthMap, SE3Pose};

fn synth(dir: &Path, frames: usize) -> PathBuf {
    let data = dir.join("data");
    let mut cfg = RunConfig { output: Some(data.clone()), ..RunConfig::default() };
    cfg.synth.frames = frames;
    cfg.synth.jitter_omega = 0.01;
    cfg.synth.jitter_v = 0.05;
    run_synthgen(&cfg).unwrap();
    data
}

/// Scene features with ground-truth initialisation.
fn gt_config(data: &Path, out: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        dataset: Some(data.to_path_buf()),
        output: Some(out.to_path_buf()),
        init: InitConfig {
            depth: DepthInit::Pfm { dir: data.join(DEPTHS_DIR) },
            poses: PoseInit::File { path: data.join(POSES_FILE) },
        },
        ..RunConfig::default()
    };
    cfg.features.source = FeatureSource::Scene;
    cfg.eval.predictions = Some(out.to_path_buf());
    cfg
}

#[test]
fn synthgen_output_is_an_ingestible_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 5);
    let index = ingest(&data).unwrap();
    assert_eq!(index.frames.len(), 5);
    assert!(index.frames.iter().all(|f| f.depth.is_some()));
    assert!(index.scene.is_some());
    assert_eq!((index.width, index.height), (64, 64));
    let names: Vec<&str> = index.frames.iter().map(|f| f.name.as_str()).collect();
    assert_eq!(names, ["000000", "000001", "000002", "000003", "000004"]);
}

#[test]
fn ground_truth_initialisation_is_preserved_and_evaluates_to_near_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 5);
    let cfg = gt_config(&data, &dir.path().join("solve"));
    let manifest = run_solve(&cfg).unwrap();
    assert_eq!(manifest.tracklets.len(), 3);
    let depth = run_eval_depth(&cfg).unwrap();
    assert!(depth.mean.abs_rel < 1e-2, "{:?}", depth.mean);
    assert_eq!(depth.frames.len(), 3);
    let ate = run_eval_ate(&cfg).unwrap();
    assert!(ate.ate.mean_ate < 1e-2, "{}", ate.formatted);
    for t in &manifest.tracklets {
        let trace = std::fs::read_to_string(tracklet_dir(&dir.path().join("solve"), &t.target).join("trace.jsonl")).unwrap();
        assert_eq!(trace.lines().count(), 18);
    }
}

/// Replaces every solved tracklet with the ground truth, depth scaled by `s` and
/// translations by `s`, so median-scaled metrics and similarity ATE must vanish.
fn overwrite_with_truth(data: &Path, out: &Path, s: f64) {
    let manifest = Manifest::load(out).unwrap();
    let index = ingest(data).unwrap();
    let world = read_poses(&data.join(POSES_FILE)).unwrap();
    let find = |name: &str| index.frames.iter().position(|f| f.name == name).unwrap();
    for t in &manifest.tracklets {
        let dir = tracklet_dir(out, &t.target);
        let ti = find(&t.target);
        let gt = read_depth_pfm(index.frames[ti].depth.as_ref().unwrap()).unwrap();
        let scaled = DepthMap::new(gt.height(), gt.width(), gt.values().iter().map(|d| d * s).collect()).unwrap();
        write_pfm(&dir.join("depth.pfm"), &scaled).unwrap();
        let rel: Vec<SE3Pose> = t
            .sources
            .iter()
            .map(|name| {
                let p = world[find(name)].inverse().compose(&world[ti]);
                SE3Pose::new(*p.rotation(), p.translation() * s).unwrap()
            })
            .collect();
        write_poses(&dir.join("poses.txt"), &rel).unwrap();
    }
}

#[test]
fn exact_predictions_score_zero_at_any_scale() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 7);
    let out = dir.path().join("solve");
    let cfg = gt_config(&data, &out);
    run_solve(&cfg).unwrap();
    for s in [1.0, 3.0] {
        overwrite_with_truth(&data, &out, s);
        let depth = run_eval_depth(&cfg).unwrap();
        assert!(depth.mean.abs_rel < 1e-6, "scale {s}: {:?}", depth.mean);
        assert_eq!(depth.mean.a1, 1.0);
        assert!(depth.frames.iter().all(|f| (f.scale * s - 1.0).abs() < 1e-6));
        let ate = run_eval_ate(&cfg).unwrap();
        assert!(ate.ate.mean_ate < 1e-5, "scale {s}: {}", ate.formatted);
    }
}

#[test]
fn evaluation_names_the_frames_missing_from_the_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 5);
    let out = dir.path().join("solve");
    let cfg = gt_config(&data, &out);
    let mut manifest = run_solve(&cfg).unwrap();
    let dropped = manifest.tracklets.remove(1).target;
    write_json(&out.join(MANIFEST_FILE), &manifest).unwrap();
    let err = run_eval_depth(&cfg).unwrap_err().to_string();
    assert!(err.contains(&dropped), "{err}");
    let err = run_eval_ate(&cfg).unwrap_err().to_string();
    assert!(err.contains(&dropped), "{err}");
}

fn fmba(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_fmba")).args(args).output().unwrap()
}

#[test]
fn unknown_config_keys_are_rejected_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"schema_version": 1, "sed": 3}"#).unwrap();
    let out = dir.path().join("out");
    let o = fmba(&["synthgen", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sed"));
    assert!(!out.exists());
}

#[test]
fn missing_schema_version_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"seed": 3}"#).unwrap();
    let o = fmba(&["solve", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_dataset_exits_with_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let out = dir.path().join("out");
    let o = fmba(&["solve", "--dataset", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere"));
}

#[test]
fn degenerate_tracklets_exit_with_code_one_and_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 3);
    // Sources 10 km away see nothing of the target.
    let far: Vec<SE3Pose> = (0..3)
        .map(|i| SE3Pose::from_translation(nalgebra::Vector3::new(1e4 * i as f64, 0.0, 0.0)))
        .collect();
    let poses = dir.path().join("far.txt");
    write_poses(&poses, &far).unwrap();
    let cfg = dir.path().join("run.json");
    let json = serde_json::json!({
        "schema_version": 1,
        "init": {"poses": {"kind": "file", "path": poses}},
    });
    std::fs::write(&cfg, json.to_string()).unwrap();
    let out = dir.path().join("out");
    let o = fmba(&[
        "solve",
        "--config",
        cfg.to_str().unwrap(),
        "--dataset",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = Manifest::load(&out).unwrap();
    assert_eq!(manifest.failed(), 1);
    assert!(manifest.tracklets[0].error.is_some());
}

#[test]
fn eval_commands_write_json_reports() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), 5);
    let solve = dir.path().join("solve");
    let report = dir.path().join("report");
    let (d, s, r) = (data.to_str().unwrap(), solve.to_str().unwrap(), report.to_str().unwrap());
    assert_eq!(fmba(&["solve", "--dataset", d, "--out", s]).status.code(), Some(0));
    for (cmd, file) in [("eval-depth", "eval_depth.json"), ("eval-ate", "eval_ate.json")] {
        let o = fmba(&[cmd, "--dataset", d, "--predictions", s, "--out", r]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let written: serde_json::Value = serde_json::from_slice(&std::fs::read(report.join(file)).unwrap()).unwrap();
        let printed: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(written, printed);
    }
}
