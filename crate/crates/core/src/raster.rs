//! Dense multi-channel rasters and the resampling primitives used by the solver and the
//! losses: bilinear sampling with its vector-Jacobian product, forward-difference image
//! gradients, block averaging and ×2 bilinear upsampling (each with its adjoint).
//!
//! Sampling positions here are raster index coordinates: `(0, 0)` is the centre of the
//! first cell. Camera code converts from image coordinates by subtracting one half.

use crate::error::{Error, Result};
use crate::geometry::Pixel;

/// Channel-major `C×H×W` buffer of finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "raster dimensions must be positive, got {channels}×{height}×{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "buffer length {} does not match {channels}×{height}×{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("raster contains non-finite values"));
        }
        Ok(Raster {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "empty raster");
        Raster {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Raster {
            channels,
            height,
            width,
            data,
        }
    }

    pub(crate) fn from_vec_unchecked(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        Raster {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    /// Per-pixel channel vector at a lattice point.
    pub fn pixel(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.get(c, y, x)).collect()
    }

    pub fn scale(&self, s: f64) -> Raster {
        Raster {
            data: self.data.iter().map(|v| v * s).collect(),
            ..self.clone()
        }
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.shape() == other.shape()
    }

    pub fn add_assign(&mut self, other: &Raster) {
        assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Channel-wise concatenation; spatial sizes must agree.
    pub fn concat(&self, other: &Raster) -> Result<Raster> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::shape(format!(
                "cannot concatenate {}×{} with {}×{}",
                self.height, self.width, other.height, other.width
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Raster::from_vec_unchecked(
            self.channels + other.channels,
            self.height,
            self.width,
            data,
        ))
    }

    /// Splits off the first `channels` channels; the inverse of [`Raster::concat`].
    pub fn split_channels(&self, channels: usize) -> (Raster, Raster) {
        assert!(channels > 0 && channels < self.channels);
        let cut = channels * self.plane_len();
        (
            Raster::from_vec_unchecked(channels, self.height, self.width, self.data[..cut].to_vec()),
            Raster::from_vec_unchecked(
                self.channels - channels,
                self.height,
                self.width,
                self.data[cut..].to_vec(),
            ),
        )
    }

    /// Mean over channels, as a single-channel raster.
    pub fn channel_mean(&self) -> Raster {
        let n = self.plane_len();
        let mut out = vec![0.0; n];
        for c in 0..self.channels {
            for (o, v) in out.iter_mut().zip(self.plane(c)) {
                *o += v;
            }
        }
        let inv = 1.0 / self.channels as f64;
        for o in &mut out {
            *o *= inv;
        }
        Raster::from_vec_unchecked(1, self.height, self.width, out)
    }

    /// Bilinear sample at raster index coordinates; `None` outside `[0, W-1]×[0, H-1]`.
    pub fn bilinear_sample(&self, p: Pixel) -> Result<Option<Vec<f64>>> {
        if !p.is_finite() {
            return Err(Error::invalid("non-finite sample position"));
        }
        Ok(Stencil::new(p.x, p.y, self.width, self.height).map(|s| {
            (0..self.channels).map(|c| s.sample(self, c)).collect()
        }))
    }

    /// Vector-Jacobian product of [`Raster::bilinear_sample`]: given `upstream = ∂L/∂sample`,
    /// returns `∂L/∂p` and, for each of the four touched cells, the factor `w` such that
    /// `∂L/∂r[c, y, x] = upstream[c]·w`.
    ///
    /// The interpolation cell is `[⌊x⌋, ⌊x⌋+1]`, so on an integer lattice line the
    /// position gradient is the one-sided derivative from the right (from the left on the
    /// last row/column).
    pub fn bilinear_sample_vjp(&self, p: Pixel, upstream: &[f64]) -> Result<Option<SampleVjp>> {
        if !p.is_finite() {
            return Err(Error::invalid("non-finite sample position"));
        }
        if upstream.len() != self.channels {
            return Err(Error::shape(format!(
                "upstream has {} channels, raster has {}",
                upstream.len(),
                self.channels
            )));
        }
        let Some(s) = Stencil::new(p.x, p.y, self.width, self.height) else {
            return Ok(None);
        };
        let mut grad = [0.0; 2];
        for (c, u) in upstream.iter().enumerate() {
            let g = s.gradient(self, c);
            grad[0] += u * g[0];
            grad[1] += u * g[1];
        }
        Ok(Some(SampleVjp {
            grad_position: grad,
            cells: s.cells(),
        }))
    }

    /// Forward differences; the last column of `∂x` and the last row of `∂y` are zero.
    pub fn image_gradients(&self) -> (Raster, Raster) {
        let mut dx = Raster::zeros(self.channels, self.height, self.width);
        let mut dy = Raster::zeros(self.channels, self.height, self.width);
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    if x + 1 < self.width {
                        dx.set(c, y, x, self.get(c, y, x + 1) - self.get(c, y, x));
                    }
                    if y + 1 < self.height {
                        dy.set(c, y, x, self.get(c, y + 1, x) - self.get(c, y, x));
                    }
                }
            }
        }
        (dx, dy)
    }

    /// Block average over `factor × factor` cells.
    pub fn downsample_mean(&self, factor: usize) -> Result<Raster> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::invalid(format!(
                "factor {factor} does not divide {}×{}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let inv = 1.0 / (factor * factor) as f64;
        let mut out = Raster::zeros(self.channels, h, w);
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    let i = out.index(c, y / factor, x / factor);
                    out.data[i] += self.get(c, y, x) * inv;
                }
            }
        }
        Ok(out)
    }

    /// Adjoint of [`Raster::downsample_mean`]: spreads each coarse value over its block.
    pub fn downsample_mean_adjoint(&self, factor: usize) -> Raster {
        let inv = 1.0 / (factor * factor) as f64;
        let mut out = self.upsample_nearest(factor);
        for v in &mut out.data {
            *v *= inv;
        }
        out
    }

    /// Replicates each cell into a `factor × factor` block.
    pub fn upsample_nearest(&self, factor: usize) -> Raster {
        Raster::from_fn(self.channels, self.height * factor, self.width * factor, |c, y, x| {
            self.get(c, y / factor, x / factor)
        })
    }

    /// Adjoint of [`Raster::upsample_nearest`]: sums each block. Equivalent to
    /// `downsample_mean(factor)` times `factor²`.
    pub fn block_sum(&self, factor: usize) -> Raster {
        assert!(self.height % factor == 0 && self.width % factor == 0);
        let mut out = Raster::zeros(self.channels, self.height / factor, self.width / factor);
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    let i = out.index(c, y / factor, x / factor);
                    out.data[i] += self.get(c, y, x);
                }
            }
        }
        out
    }

    /// ×2 bilinear upsampling with half-pixel alignment (source position `j/2 - 1/4`,
    /// clamped at the borders).
    pub fn upsample2_bilinear(&self) -> Raster {
        let (h, w) = (self.height * 2, self.width * 2);
        let ys: Vec<_> = (0..h).map(|j| upsample_tap(j, self.height)).collect();
        let xs: Vec<_> = (0..w).map(|i| upsample_tap(i, self.width)).collect();
        let mut out = Raster::zeros(self.channels, h, w);
        for c in 0..self.channels {
            for (j, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (i, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let v = (1.0 - fy) * ((1.0 - fx) * self.get(c, y0, x0) + fx * self.get(c, y0, x1))
                        + fy * ((1.0 - fx) * self.get(c, y1, x0) + fx * self.get(c, y1, x1));
                    out.set(c, j, i, v);
                }
            }
        }
        out
    }

    /// Adjoint of [`Raster::upsample2_bilinear`]; `self` has the upsampled shape.
    pub fn upsample2_bilinear_adjoint(&self) -> Raster {
        assert!(self.height % 2 == 0 && self.width % 2 == 0);
        let (h, w) = (self.height / 2, self.width / 2);
        let ys: Vec<_> = (0..self.height).map(|j| upsample_tap(j, h)).collect();
        let xs: Vec<_> = (0..self.width).map(|i| upsample_tap(i, w)).collect();
        let mut out = Raster::zeros(self.channels, h, w);
        for c in 0..self.channels {
            for (j, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (i, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let g = self.get(c, j, i);
                    let idx = |y, x| (c * h + y) * w + x;
                    out.data[idx(y0, x0)] += g * (1.0 - fy) * (1.0 - fx);
                    out.data[idx(y0, x1)] += g * (1.0 - fy) * fx;
                    out.data[idx(y1, x0)] += g * fy * (1.0 - fx);
                    out.data[idx(y1, x1)] += g * fy * fx;
                }
            }
        }
        out
    }

    /// Bilinear resampling to `height × width` with pixel centres aligned (output centre
    /// `j + 1/2` reads source position `(j + 1/2)·n/m`), clamped at the borders. Equal
    /// sizes return an exact copy.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Raster> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("resize target must be non-empty"));
        }
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let ys: Vec<_> = (0..height).map(|j| resize_tap(j, height, self.height)).collect();
        let xs: Vec<_> = (0..width).map(|i| resize_tap(i, width, self.width)).collect();
        Ok(Raster::from_fn(self.channels, height, width, |c, j, i| {
            let ((y0, y1, fy), (x0, x1, fx)) = (ys[j], xs[i]);
            (1.0 - fy) * ((1.0 - fx) * self.get(c, y0, x0) + fx * self.get(c, y0, x1))
                + fy * ((1.0 - fx) * self.get(c, y1, x0) + fx * self.get(c, y1, x1))
        }))
    }
}

/// Source taps for output index `j` of `m` when resampling `n` cells, centres aligned.
fn resize_tap(j: usize, m: usize, n: usize) -> (usize, usize, f64) {
    let src = ((j as f64 + 0.5) * n as f64 / m as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let i0 = (src.floor() as usize).min(n.saturating_sub(2));
    let i1 = (i0 + 1).min(n - 1);
    let f = if i1 == i0 { 0.0 } else { src - i0 as f64 };
    (i0, i1, f)
}

fn upsample_tap(j: usize, n: usize) -> (usize, usize, f64) {
    let src = (j as f64 * 0.5 - 0.25).clamp(0.0, (n - 1) as f64);
    let i0 = (src.floor() as usize).min(n.saturating_sub(2));
    let i1 = (i0 + 1).min(n - 1);
    let f = if i1 == i0 { 0.0 } else { src - i0 as f64 };
    (i0, i1, f)
}

/// Output of [`Raster::bilinear_sample_vjp`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleVjp {
    pub grad_position: [f64; 2],
    /// `(x, y, weight)` for the four neighbours.
    pub cells: [(usize, usize, f64); 4],
}

/// Interpolation cell and fractional offsets of one in-bounds sample position.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub ax: f64,
    pub ay: f64,
}

impl Stencil {
    /// `None` when `(x, y)` lies outside `[0, W-1]×[0, H-1]` or is not finite.
    #[inline]
    pub fn new(x: f64, y: f64, width: usize, height: usize) -> Option<Self> {
        let (xmax, ymax) = ((width - 1) as f64, (height - 1) as f64);
        if !(x >= 0.0 && x <= xmax && y >= 0.0 && y <= ymax) {
            return None;
        }
        let (x0, x1, ax) = axis(x, width);
        let (y0, y1, ay) = axis(y, height);
        Some(Stencil {
            x0,
            y0,
            x1,
            y1,
            ax,
            ay,
        })
    }

    #[inline]
    pub fn weights(&self) -> [f64; 4] {
        let (ax, ay) = (self.ax, self.ay);
        [(1.0 - ax) * (1.0 - ay), ax * (1.0 - ay), (1.0 - ax) * ay, ax * ay]
    }

    /// `(x, y, weight)` in the order 00, 10, 01, 11.
    #[inline]
    pub fn cells(&self) -> [(usize, usize, f64); 4] {
        let w = self.weights();
        [
            (self.x0, self.y0, w[0]),
            (self.x1, self.y0, w[1]),
            (self.x0, self.y1, w[2]),
            (self.x1, self.y1, w[3]),
        ]
    }

    #[inline]
    pub fn corners(&self, r: &Raster, c: usize) -> [f64; 4] {
        [
            r.get(c, self.y0, self.x0),
            r.get(c, self.y0, self.x1),
            r.get(c, self.y1, self.x0),
            r.get(c, self.y1, self.x1),
        ]
    }

    #[inline]
    pub fn sample(&self, r: &Raster, c: usize) -> f64 {
        let v = self.corners(r, c);
        let w = self.weights();
        w[0] * v[0] + w[1] * v[1] + w[2] * v[2] + w[3] * v[3]
    }

    /// Spatial derivative `(∂/∂x, ∂/∂y)` of the interpolant inside the cell.
    #[inline]
    pub fn gradient(&self, r: &Raster, c: usize) -> [f64; 2] {
        gradient_from_corners(&self.corners(r, c), self.ax, self.ay, self.x1 != self.x0, self.y1 != self.y0)
    }
}

#[inline]
pub(crate) fn gradient_from_corners(v: &[f64; 4], ax: f64, ay: f64, has_x: bool, has_y: bool) -> [f64; 2] {
    let gx = if has_x {
        (1.0 - ay) * (v[1] - v[0]) + ay * (v[3] - v[2])
    } else {
        0.0
    };
    let gy = if has_y {
        (1.0 - ax) * (v[2] - v[0]) + ax * (v[3] - v[1])
    } else {
        0.0
    };
    [gx, gy]
}

#[inline]
fn axis(x: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let i0 = (x.floor() as usize).min(n - 2);
    (i0, i0 + 1, x - i0 as f64)
}
