//! `synthgen`: renders a synthetic scene into the dataset layout.

use std::path::Path;

use serde::Serialize;

use fmba_core::io::{write_json, write_pfm, write_png, write_poses, IntrinsicsFile};
use fmba_core::synth::{render_all, SceneSpec};
use fmba_core::{Error, Result};

use crate::config::RunConfig;
use crate::dataset::{DEPTHS_DIR, IMAGES_DIR, INTRINSICS_FILE, POSES_FILE, SCENE_FILE};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthSummary {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

/// File stem of frame `i`.
pub fn frame_name(i: usize) -> String {
    format!("{i:06}")
}

pub fn run_synthgen(cfg: &RunConfig) -> Result<SynthSummary> {
    let out = cfg.output_dir()?;
    let spec = cfg.scene();
    spec.validate()?;
    if spec.trajectory.len() < cfg.tracklet_length {
        return Err(Error::invalid(format!(
            "scene has {} frames, fewer than one tracklet",
            spec.trajectory.len()
        )));
    }
    write_dataset(out, &spec)?;
    Ok(SynthSummary {
        frames: spec.trajectory.len(),
        width: spec.width,
        height: spec.height,
        seed: cfg.seed,
    })
}

/// Renders every frame of `spec` and writes the full dataset under `out`.
pub fn write_dataset(out: &Path, spec: &SceneSpec) -> Result<()> {
    let views = render_all(spec)?;
    for dir in [out.to_path_buf(), out.join(IMAGES_DIR), out.join(DEPTHS_DIR)] {
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (i, (img, depth)) in views.iter().enumerate() {
        let name = frame_name(i);
        write_png(&out.join(IMAGES_DIR).join(format!("{name}.png")), img)?;
        write_pfm(&out.join(DEPTHS_DIR).join(format!("{name}.pfm")), depth)?;
    }
    write_poses(&out.join(POSES_FILE), &spec.camera_poses())?;
    write_json(
        &out.join(INTRINSICS_FILE),
        &IntrinsicsFile::new(&spec.intrinsics, spec.width, spec.height),
    )?;
    write_json(&out.join(SCENE_FILE), spec)
}
