//! Versioned JSON run configuration. Every key is optional except `schema_version`;
//! unknown keys and out-of-range values are rejected before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fmba_core::ba::Schedule;
use fmba_core::eval::DEFAULT_DEPTH_CAP;
use fmba_core::synth::{SceneSpec, DEFAULT_BASELINE};
use fmba_core::synthesis::LossWeights;
use fmba_core::train::TrainConfig;
use fmba_core::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Dataset root (`images/`, `intrinsics.json`, optional `depths/` and `poses.txt`).
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// `[width, height]` the images are resized to; `None` keeps the dataset size.
    #[serde(default)]
    pub resolution: Option<[usize; 2]>,
    #[serde(default = "default_tracklet_length")]
    pub tracklet_length: usize,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub error_mode: ErrorMode,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub synth: SynthConfig,
    /// Size of the tracklet worker pool.
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_tracklet_length() -> usize {
    3
}

fn default_workers() -> usize {
    1
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            dataset: None,
            resolution: None,
            tracklet_length: default_tracklet_length(),
            features: FeatureConfig::default(),
            schedule: Schedule::default(),
            loss: LossWeights::default(),
            seed: 0,
            init: InitConfig::default(),
            error_mode: ErrorMode::default(),
            eval: EvalConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            workers: default_workers(),
            output: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMode {
    /// Residuals on learned (or scene-rendered) feature pyramids.
    #[default]
    Feature,
    /// Residuals on block-averaged image intensities.
    Photometric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// The feature network, seeded or loaded from `weights`.
    #[default]
    Network,
    /// View-consistent features rendered from the dataset's `scene.json` at the
    /// ground-truth camera poses. Synthetic datasets only.
    Scene,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub source: FeatureSource,
    /// Channels per pyramid level for a seeded network.
    pub channels: usize,
    /// Weight bundle written by `train-demo` (feature network and damping MLP).
    pub weights: Option<PathBuf>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            source: FeatureSource::Network,
            channels: 16,
            weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DepthInit {
    /// Constant depth; `None` uses the mean ground-truth depth of the target frame.
    Constant {
        #[serde(default)]
        value: Option<f64>,
    },
    /// `<dir>/<frame>.pfm`, resized to the working resolution.
    Pfm { dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PoseInit {
    Identity,
    /// Camera-to-world poses, one 3×4 line per frame; relative poses are derived from it.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub depth: DepthInit,
    pub poses: PoseInit,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            depth: DepthInit::Constant { value: None },
            poses: PoseInit::Identity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub depth_cap: f64,
    pub snippet_length: usize,
    pub snippet_stride: usize,
    /// Output directory of a previous `solve`.
    pub predictions: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            depth_cap: DEFAULT_DEPTH_CAP,
            snippet_length: 5,
            snippet_stride: 1,
            predictions: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub frames: usize,
    pub baseline: f64,
    /// Per-frame random rotation and translation bounds added to the lateral track.
    pub jitter_omega: f64,
    pub jitter_v: f64,
    /// Full scene description; when present it replaces the fields above.
    pub scene: Option<SceneSpec>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frames: 3,
            baseline: DEFAULT_BASELINE,
            jitter_omega: 0.0,
            jitter_v: 0.0,
            scene: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if let Some([w, h]) = self.resolution {
            if w == 0 || h == 0 || w % 8 != 0 || h % 8 != 0 {
                return Err(Error::invalid(format!("resolution {w}×{h} must be positive multiples of 8")));
            }
        }
        if self.tracklet_length != 3 && self.tracklet_length != 5 {
            return Err(Error::invalid(format!("tracklet_length {} must be 3 or 5", self.tracklet_length)));
        }
        if self.features.channels == 0 {
            return Err(Error::invalid("features.channels must be positive"));
        }
        self.schedule.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if let DepthInit::Constant { value: Some(v) } = self.init.depth {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("init depth {v} must be positive")));
            }
        }
        if !(self.eval.depth_cap > 0.0 && self.eval.depth_cap.is_finite()) {
            return Err(Error::invalid("eval.depth_cap must be positive"));
        }
        if self.eval.snippet_length < 3 || self.eval.snippet_stride == 0 {
            return Err(Error::invalid("eval snippets need length ≥ 3 and a positive stride"));
        }
        let s = &self.synth;
        if s.scene.is_none() && s.frames < self.tracklet_length {
            return Err(Error::invalid(format!(
                "synth.frames {} is shorter than one tracklet",
                s.frames
            )));
        }
        if !(s.baseline.is_finite() && s.jitter_omega >= 0.0 && s.jitter_v >= 0.0 && s.jitter_omega < 1.0) {
            return Err(Error::invalid("synth baseline and jitter bounds are out of range"));
        }
        if let Some(scene) = &s.scene {
            scene.validate()?;
        }
        if self.workers == 0 {
            return Err(Error::invalid("workers must be positive"));
        }
        Ok(())
    }

    /// Scene written by `synthgen`.
    pub fn scene(&self) -> SceneSpec {
        if let Some(s) = &self.synth.scene {
            return s.clone();
        }
        let mut spec = SceneSpec::default_scene(self.synth.frames, self.seed);
        spec.trajectory = fmba_core::synth::lateral_trajectory(
            self.synth.frames,
            self.synth.baseline,
            self.synth.jitter_omega,
            self.synth.jitter_v,
            self.seed,
        );
        spec
    }

    pub fn dataset_dir(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| Error::invalid("config has no dataset path"))
    }

    pub fn output_dir(&self) -> Result<&Path> {
        self.output
            .as_deref()
            .ok_or_else(|| Error::invalid("no output directory (set `output` or pass --out)"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"schema_version": 1}"#).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.schedule.total_iterations(), 18);
        assert_eq!(cfg.loss.alpha, 0.85);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for text in [
            r#"{"schema_version": 1, "bogus": 1}"#,
            r#"{"schema_version": 1, "loss": {"alpha": 0.85, "beta": 1}}"#,
            r#"{"schema_version": 1, "init": {"depth": {"kind": "constant", "valu": 3}}}"#,
            r#"{"schema_version": 1, "features": {"chanels": 8}}"#,
            r#"{"schema_version": 1, "train": {"steps": 3, "lr": 0.1}}"#,
        ] {
            assert!(serde_json::from_str::<RunConfig>(text).is_err(), "{text}");
        }
    }

    #[test]
    fn out_of_range_values_fail_validation() {
        for text in [
            r#"{"schema_version": 2}"#,
            r#"{"schema_version": 1, "tracklet_length": 4}"#,
            r#"{"schema_version": 1, "loss": {"alpha": 1.5}}"#,
            r#"{"schema_version": 1, "schedule": {"levels": [4], "iterations": 6}}"#,
            r#"{"schema_version": 1, "init": {"depth": {"kind": "constant", "value": -1}}}"#,
            r#"{"schema_version": 1, "eval": {"snippet_length": 2}}"#,
            r#"{"schema_version": 1, "resolution": [60, 64]}"#,
            r#"{"schema_version": 1, "workers": 0}"#,
            r#"{"schema_version": 1, "train": {"learning_rate": -1}}"#,
        ] {
            let cfg: RunConfig = serde_json::from_str(text).unwrap();
            assert!(cfg.validate().is_err(), "{text}");
        }
    }

    #[test]
    fn missing_schema_version_is_rejected() {
        assert!(serde_json::from_str::<RunConfig>("{}").is_err());
    }
}
