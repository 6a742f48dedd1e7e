//! Dataset directory layout shared by `synthgen` (writer) and every other command (reader):
//!
//! ```text
//! intrinsics.json      fx, fy, cx, cy, width, height
//! images/<name>.png    frames, ordered by file name
//! depths/<name>.pfm    optional ground-truth depth
//! poses.txt            optional camera-to-world 3×4 poses, one line per frame
//! scene.json           optional scene description (synthetic datasets)
//! ```

use std::path::{Path, PathBuf};

use fmba_core::geometry::{CameraIntrinsics, SE3Pose};
use fmba_core::io::{read_depth_pfm, read_json, read_png, read_poses, IntrinsicsFile};
use fmba_core::synth::SceneSpec;
use fmba_core::{DepthMap, Error, Raster, Result};

pub const INTRINSICS_FILE: &str = "intrinsics.json";
pub const IMAGES_DIR: &str = "images";
pub const DEPTHS_DIR: &str = "depths";
pub const POSES_FILE: &str = "poses.txt";
pub const SCENE_FILE: &str = "scene.json";

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub index: usize,
    /// File stem shared by the image and its depth.
    pub name: String,
    pub image: PathBuf,
    pub depth: Option<PathBuf>,
    /// Camera-to-world.
    pub pose: Option<SE3Pose>,
}

#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub frames: Vec<FrameRecord>,
    pub intrinsics: CameraIntrinsics,
    pub width: usize,
    pub height: usize,
    pub scene: Option<SceneSpec>,
}

/// Scans a dataset directory. Frames are ordered lexicographically by file name.
pub fn ingest(root: &Path) -> Result<DatasetIndex> {
    let intr_path = root.join(INTRINSICS_FILE);
    if !intr_path.is_file() {
        return Err(Error::format(&intr_path, "missing intrinsics file"));
    }
    let intr: IntrinsicsFile = read_json(&intr_path)?;
    let intrinsics = intr.intrinsics().map_err(|e| Error::format(&intr_path, e.to_string()))?;
    let images_dir = root.join(IMAGES_DIR);
    let entries = std::fs::read_dir(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut images = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&images_dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            images.push(path);
        }
    }
    if images.is_empty() {
        return Err(Error::format(&images_dir, "no PNG frames"));
    }
    images.sort();
    let poses_path = root.join(POSES_FILE);
    let poses = if poses_path.is_file() {
        let p = read_poses(&poses_path)?;
        if p.len() != images.len() {
            return Err(Error::format(
                &poses_path,
                format!("{} poses for {} frames", p.len(), images.len()),
            ));
        }
        Some(p)
    } else {
        None
    };
    let scene_path = root.join(SCENE_FILE);
    let scene = if scene_path.is_file() {
        let s: SceneSpec = read_json(&scene_path)?;
        s.validate().map_err(|e| Error::format(&scene_path, e.to_string()))?;
        Some(s)
    } else {
        None
    };
    let frames = images
        .into_iter()
        .enumerate()
        .map(|(index, image)| {
            let name = image
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let depth = root.join(DEPTHS_DIR).join(format!("{name}.pfm"));
            FrameRecord {
                index,
                name,
                image,
                depth: depth.is_file().then_some(depth),
                pose: poses.as_ref().map(|p| p[index]),
            }
        })
        .collect();
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        frames,
        intrinsics,
        width: intr.width,
        height: intr.height,
        scene,
    })
}

/// Frames decoded and resized to the working resolution.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub index: DatasetIndex,
    pub images: Vec<Raster>,
    pub depths: Vec<Option<DepthMap>>,
    /// Intrinsics at the working resolution.
    pub k: CameraIntrinsics,
    pub width: usize,
    pub height: usize,
}

/// Per-axis rescaling of `k` from `from` to `to` pixels (`[width, height]`).
pub fn rescale_intrinsics(k: &CameraIntrinsics, from: [usize; 2], to: [usize; 2]) -> Result<CameraIntrinsics> {
    let sx = to[0] as f64 / from[0] as f64;
    let sy = to[1] as f64 / from[1] as f64;
    CameraIntrinsics::new(k.fx * sx, k.fy * sy, k.cx * sx, k.cy * sy)
}

/// Loads every frame, bilinearly resized to `resolution` (`[width, height]`) when given.
pub fn load(index: DatasetIndex, resolution: Option<[usize; 2]>) -> Result<LoadedDataset> {
    let [width, height] = resolution.unwrap_or([index.width, index.height]);
    let mut images = Vec::with_capacity(index.frames.len());
    let mut depths = Vec::with_capacity(index.frames.len());
    for f in &index.frames {
        let img = read_png(&f.image)?;
        if (img.width(), img.height()) != (index.width, index.height) {
            return Err(Error::format(
                &f.image,
                format!(
                    "image is {}×{}, intrinsics say {}×{}",
                    img.width(),
                    img.height(),
                    index.width,
                    index.height
                ),
            ));
        }
        images.push(img.resize_bilinear(height, width)?);
        depths.push(match &f.depth {
            Some(p) => {
                let d = read_depth_pfm(p)?;
                if (d.width(), d.height()) != (index.width, index.height) {
                    return Err(Error::format(p, "depth size does not match the images"));
                }
                Some(DepthMap::from_raster(&d.to_raster().resize_bilinear(height, width)?)?)
            }
            None => None,
        });
    }
    let k = rescale_intrinsics(&index.intrinsics, [index.width, index.height], [width, height])?;
    Ok(LoadedDataset {
        index,
        images,
        depths,
        k,
        width,
        height,
    })
}

/// Frame indices of one sliding window; the centre frame is the target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackletFrames {
    pub target: usize,
    pub sources: Vec<usize>,
}

/// Every window of `length` consecutive frames, stride 1.
pub fn tracklet_windows(frames: usize, length: usize) -> Vec<TrackletFrames> {
    if frames < length || length == 0 {
        return Vec::new();
    }
    (0..=frames - length)
        .map(|start| {
            let target = start + length / 2;
            TrackletFrames {
                target,
                sources: (start..start + length).filter(|&i| i != target).collect(),
            }
        })
        .collect()
}
