//! File formats: 8-bit PNG images, PFM depth maps, KITTI-style pose text, intrinsics and
//! report JSON.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, SE3Pose};
use crate::raster::Raster;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 1- or 3-channel raster with values in `[0, 1]` as 8-bit PNG.
pub fn write_png(path: &Path, img: &Raster) -> Result<()> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let res = match img.channels() {
        1 => GrayImage::from_fn(w, h, |x, y| Luma([to_u8(img.get(0, y as usize, x as usize))])).save(path),
        3 => RgbImage::from_fn(w, h, |x, y| {
            Rgb([0, 1, 2].map(|c| to_u8(img.get(c, y as usize, x as usize))))
        })
        .save(path),
        c => return Err(Error::invalid(format!("PNG needs 1 or 3 channels, raster has {c}"))),
    };
    res.map_err(|e| image_error(path, e))
}

/// Reads an 8-bit PNG as a raster in `[0, 1]`: grayscale stays 1 channel, anything else
/// becomes RGB.
pub fn read_png(path: &Path) -> Result<Raster> {
    let img = image::open(path).map_err(|e| image_error(path, e))?;
    Ok(match img {
        DynamicImage::ImageLuma8(g) => gray_raster(&g),
        other => {
            let rgb = other.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            Raster::from_fn(3, h, w, |c, y, x| rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0)
        }
    })
}

fn gray_raster(g: &ImageBuffer<Luma<u8>, Vec<u8>>) -> Raster {
    let (w, h) = (g.width() as usize, g.height() as usize);
    Raster::from_fn(1, h, w, |_, y, x| g.get_pixel(x as u32, y as u32)[0] as f64 / 255.0)
}

fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

/// Writes a little-endian grayscale PFM (`Pf`, scale −1), rows stored bottom to top.
pub fn write_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    let (w, h) = (depth.width(), depth.height());
    let mut buf = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    buf.reserve(w * h * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            buf.extend_from_slice(&(depth.get(y, x) as f32).to_le_bytes());
        }
    }
    write_bytes(path, &buf)
}

/// Reads a `Pf` (1 channel) or `PF` (3 channel) PFM of either byte order.
pub fn read_pfm(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::format(path, msg.to_string());
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PFM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII PFM header"))?);
    }
    // Exactly one whitespace byte separates the header from the data.
    pos += 1;
    let channels = match fields[0] {
        "Pf" => 1,
        "PF" => 3,
        _ => return Err(bad("missing Pf/PF magic")),
    };
    let w: usize = fields[1].parse().map_err(|_| bad("bad PFM width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad PFM height"))?;
    let scale: f64 = fields[3].parse().map_err(|_| bad("bad PFM scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(bad("PFM scale must be nonzero"));
    }
    let n = w * h * channels;
    let data = bytes.get(pos..pos + 4 * n).ok_or_else(|| bad("truncated PFM data"))?;
    let value = |i: usize| {
        let b: [u8; 4] = data[4 * i..4 * i + 4].try_into().expect("4 bytes");
        if scale < 0.0 {
            f32::from_le_bytes(b) as f64
        } else {
            f32::from_be_bytes(b) as f64
        }
    };
    Ok(Raster::from_fn(channels, h, w, |c, y, x| value(((h - 1 - y) * w + x) * channels + c)))
}

/// Reads a single-channel PFM as a positive depth map.
pub fn read_depth_pfm(path: &Path) -> Result<DepthMap> {
    let r = read_pfm(path)?;
    if r.channels() != 1 {
        return Err(Error::format(path, "depth PFM must have one channel"));
    }
    DepthMap::from_raster(&r).map_err(|e| Error::format(path, e.to_string()))
}

/// One pose per line as 12 numbers, the row-major 3×4 `[R | t]`.
pub fn write_poses(path: &Path, poses: &[SE3Pose]) -> Result<()> {
    let mut s = String::new();
    for p in poses {
        let row: Vec<String> = p.to_row_major_3x4().iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    write_bytes(path, s.as_bytes())
}

pub fn read_poses(path: &Path) -> Result<Vec<SE3Pose>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
            let m: [f64; 12] = vals
                .try_into()
                .map_err(|v: Vec<f64>| Error::format(path, format!("line {}: {} values, expected 12", i + 1, v.len())))?;
            SE3Pose::from_row_major_3x4(&m).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// `intrinsics.json`: pinhole parameters for images of `width`×`height`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntrinsicsFile {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl IntrinsicsFile {
    pub fn new(k: &CameraIntrinsics, width: usize, height: usize) -> Self {
        IntrinsicsFile {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width,
            height,
        }
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy)
    }
}

/// Pretty-printed JSON followed by a newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}
