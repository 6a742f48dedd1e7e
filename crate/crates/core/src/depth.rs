use crate::error::{Error, Result};
use crate::raster::Raster;

/// Per-pixel positive depth grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::shape(format!(
                "depth buffer of length {} does not match {height}×{width}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::invalid(format!("depth values must be positive and finite, found {v}")));
        }
        Ok(DepthMap {
            height,
            width,
            values,
        })
    }

    pub fn constant(height: usize, width: usize, depth: f64) -> Result<Self> {
        DepthMap::new(height, width, vec![depth; height * width])
    }

    pub fn from_raster(r: &Raster) -> Result<Self> {
        if r.channels() != 1 {
            return Err(Error::shape(format!("depth raster must have 1 channel, has {}", r.channels())));
        }
        DepthMap::new(r.height(), r.width(), r.data().to_vec())
    }

    pub(crate) fn from_vec_unchecked(height: usize, width: usize, values: Vec<f64>) -> Self {
        DepthMap {
            height,
            width,
            values,
        }
    }

    pub fn to_raster(&self) -> Raster {
        Raster::from_vec_unchecked(1, self.height, self.width, self.values.clone())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        DepthMap::new(self.height, self.width, self.values.iter().map(|v| v * s).collect())
    }

    /// Block average by a power-of-two factor; keeps the mean depth.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !factor.is_power_of_two() {
            return Err(Error::invalid(format!("downsample factor {factor} is not a power of two")));
        }
        let r = self.to_raster().downsample_mean(factor)?;
        Ok(DepthMap::from_vec_unchecked(r.height(), r.width(), r.into_data()))
    }
}
