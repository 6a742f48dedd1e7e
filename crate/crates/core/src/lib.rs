//! Feature-metric bundle adjustment for monocular depth and ego-motion.

pub mod depth;
pub mod ba;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod io;
pub mod nn;
pub mod raster;
pub mod synth;
pub mod synthesis;
pub mod train;

pub use depth::DepthMap;
pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, Pixel, SE3Pose, Twist};
pub use raster::Raster;
