//! Model construction, feature pyramids and solver initialisation shared by the commands.

use std::path::Path;

use fmba_core::ba::{BaInputs, BaState, DampingMlp};
use fmba_core::features::{FeatureNet, FeaturePyramid};
use fmba_core::io::{read_depth_pfm, read_poses};
use fmba_core::nn::WeightBundle;
use fmba_core::synth::render_feature_pyramid;
use fmba_core::{DepthMap, Error, Result, SE3Pose};

use crate::config::{DepthInit, ErrorMode, FeatureSource, PoseInit, RunConfig};
use crate::dataset::{LoadedDataset, TrackletFrames};

/// Prefix of the damping-MLP tensors inside a weight bundle.
pub const MLP_PREFIX: &str = "mlp";

/// Feature network (seeded or loaded) for `image_channels`-channel images.
pub fn feature_net(cfg: &RunConfig, image_channels: usize) -> Result<FeatureNet> {
    match &cfg.features.weights {
        Some(path) => FeatureNet::from_bundle(&WeightBundle::load(path)?),
        None => Ok(FeatureNet::seeded(image_channels, cfg.features.channels, cfg.seed)),
    }
}

/// Damping MLP for pyramids with `channels` channels.
pub fn damping_mlp(cfg: &RunConfig, channels: usize) -> Result<DampingMlp> {
    let mlp = match &cfg.features.weights {
        Some(path) => DampingMlp::from_tensors(&WeightBundle::load(path)?, MLP_PREFIX)?,
        None => DampingMlp::seeded(channels, cfg.seed),
    };
    if mlp.inputs() != channels {
        return Err(Error::invalid(format!(
            "damping MLP takes {} channels, the pyramids have {channels}",
            mlp.inputs()
        )));
    }
    Ok(mlp)
}

/// One pyramid per frame, in frame order.
pub fn frame_pyramids(cfg: &RunConfig, data: &LoadedDataset) -> Result<Vec<FeaturePyramid>> {
    match (cfg.error_mode, cfg.features.source) {
        (ErrorMode::Photometric, _) => data.images.iter().map(FeaturePyramid::from_image).collect(),
        (ErrorMode::Feature, FeatureSource::Network) => {
            let channels = data.images.first().map_or(1, |i| i.channels());
            let net = feature_net(cfg, channels)?;
            data.images.iter().map(|i| net.forward(i)).collect()
        }
        (ErrorMode::Feature, FeatureSource::Scene) => {
            let scene = data.index.scene.as_ref().ok_or_else(|| {
                Error::invalid(format!(
                    "features.source = scene needs {}",
                    data.index.root.join(crate::dataset::SCENE_FILE).display()
                ))
            })?;
            if (scene.width, scene.height) != (data.width, data.height) {
                return Err(Error::invalid(format!(
                    "scene features are rendered at {}×{}, not the working resolution {}×{}",
                    scene.width, scene.height, data.width, data.height
                )));
            }
            data.index
                .frames
                .iter()
                .map(|f| {
                    let pose = f.pose.ok_or_else(|| {
                        Error::invalid(format!("frame {} has no ground-truth pose for scene features", f.name))
                    })?;
                    render_feature_pyramid(scene, &pose)
                })
                .collect()
        }
    }
}

pub fn ba_inputs(pyramids: &[FeaturePyramid], data: &LoadedDataset, w: &TrackletFrames) -> BaInputs {
    BaInputs {
        target: pyramids[w.target].clone(),
        sources: w.sources.iter().map(|&s| pyramids[s].clone()).collect(),
        k: data.k,
    }
}

/// Camera-to-world poses for the `File` pose policy.
pub fn init_pose_file(cfg: &RunConfig, frames: usize) -> Result<Option<Vec<SE3Pose>>> {
    match &cfg.init.poses {
        PoseInit::Identity => Ok(None),
        PoseInit::File { path } => {
            let poses = read_poses(path)?;
            if poses.len() != frames {
                return Err(Error::format(path, format!("{} poses for {frames} frames", poses.len())));
            }
            Ok(Some(poses))
        }
    }
}

/// Solver initialisation for one window under the configured policy.
pub fn initial_state(
    cfg: &RunConfig,
    data: &LoadedDataset,
    w: &TrackletFrames,
    pose_file: Option<&[SE3Pose]>,
) -> Result<BaState> {
    let target = &data.index.frames[w.target];
    let depth = match &cfg.init.depth {
        DepthInit::Constant { value: Some(v) } => DepthMap::constant(data.height, data.width, *v)?,
        DepthInit::Constant { value: None } => {
            let gt = data.depths[w.target].as_ref().ok_or_else(|| {
                Error::invalid(format!(
                    "init.depth.value is unset and frame {} has no ground-truth depth",
                    target.name
                ))
            })?;
            DepthMap::constant(data.height, data.width, gt.mean())?
        }
        DepthInit::Pfm { dir } => load_depth_at(&dir.join(format!("{}.pfm", target.name)), data.width, data.height)?,
    };
    let poses = match pose_file {
        None => vec![SE3Pose::identity(); w.sources.len()],
        Some(p) => {
            let pt = &p[w.target];
            w.sources.iter().map(|&s| p[s].inverse().compose(pt)).collect()
        }
    };
    BaState::new(depth, poses)
}

/// Reads a PFM depth map and resizes it to `width`×`height`.
pub fn load_depth_at(path: &Path, width: usize, height: usize) -> Result<DepthMap> {
    let d = read_depth_pfm(path)?;
    if (d.width(), d.height()) == (width, height) {
        return Ok(d);
    }
    DepthMap::from_raster(&d.to_raster().resize_bilinear(height, width)?)
}
