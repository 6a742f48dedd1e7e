//! Small trainable building blocks: 3×3 convolutions (stride 1 or 2, zero padding),
//! fully connected layers, the leaky rectifier, and a flat weight bundle for persistence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

pub const LEAKY_SLOPE: f64 = 0.1;

#[inline]
pub fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[inline]
pub fn leaky_grad(pre: f64) -> f64 {
    if pre > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

pub fn leaky_raster(r: &Raster) -> Raster {
    let mut out = r.clone();
    out.data_mut().iter_mut().for_each(|v| *v = leaky(*v));
    out
}

/// `grad ⊙ leaky'(pre)`.
pub fn leaky_backward(pre: &Raster, grad: &Raster) -> Raster {
    let mut out = grad.clone();
    out.data_mut()
        .iter_mut()
        .zip(pre.data())
        .for_each(|(g, p)| *g *= leaky_grad(*p));
    out
}

/// 3×3 convolution with zero padding of one cell; weights laid out `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3x3 {
    pub fn zeros(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        assert!(stride == 1 || stride == 2, "stride must be 1 or 2");
        Conv3x3 {
            in_channels,
            out_channels,
            stride,
            weights: vec![0.0; out_channels * in_channels * 9],
            bias: vec![0.0; out_channels],
        }
    }

    /// Seeded He-normal weights (`σ² = 2/(9·in)`), zero bias.
    pub fn seeded(in_channels: usize, out_channels: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut conv = Conv3x3::zeros(in_channels, out_channels, stride);
        let noise = Normal::new(0.0, (2.0 / (9.0 * in_channels as f64)).sqrt()).expect("valid sigma");
        conv.weights.iter_mut().for_each(|w| *w = noise.sample(rng));
        conv
    }

    /// Centre tap 1 for `out == in`, zero elsewhere (requires equal channel counts).
    pub fn identity(channels: usize, stride: usize) -> Self {
        let mut conv = Conv3x3::zeros(channels, channels, stride);
        for c in 0..channels {
            let idx = conv.weight_index(c, c, 1, 1);
            conv.weights[idx] = 1.0;
        }
        conv
    }

    #[inline]
    pub fn weight_index(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + i) * 3 + ky) * 3 + kx
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 1 {
            return Ok((h, w));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(format!("stride-2 conv needs even size, got {h}×{w}")));
        }
        Ok((h / 2, w / 2))
    }

    /// Pre-activation output.
    pub fn forward(&self, input: &Raster) -> Result<Raster> {
        if input.channels() != self.in_channels {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels,
                input.channels()
            )));
        }
        let (h, w) = (input.height(), input.width());
        let (oh, ow) = self.output_size(h, w)?;
        let s = self.stride;
        let planes: Vec<Vec<f64>> = (0..self.out_channels)
            .into_par_iter()
            .map(|o| {
                let mut out = vec![self.bias[o]; oh * ow];
                for i in 0..self.in_channels {
                    let src = input.plane(i);
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let wv = self.weights[self.weight_index(o, i, ky, kx)];
                            if wv == 0.0 {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (s * oy + ky) as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let row = &src[iy as usize * w..(iy as usize + 1) * w];
                                let dst = &mut out[oy * ow..(oy + 1) * ow];
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    let ix = (s * ox + kx) as isize - 1;
                                    if ix >= 0 && ix < w as isize {
                                        *d += wv * row[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
                out
            })
            .collect();
        Ok(Raster::from_vec_unchecked(self.out_channels, oh, ow, planes.concat()))
    }

    /// Given `∂L/∂(pre-activation output)`, returns parameter gradients and `∂L/∂input`.
    pub fn backward(&self, input: &Raster, grad_out: &Raster) -> (ConvGrad, Raster) {
        let (h, w) = (input.height(), input.width());
        let (oh, ow) = (grad_out.height(), grad_out.width());
        let s = self.stride;
        let per_out: Vec<(Vec<f64>, f64)> = (0..self.out_channels)
            .into_par_iter()
            .map(|o| {
                let g = grad_out.plane(o);
                let bias: f64 = g.iter().sum();
                let mut wg = vec![0.0; self.in_channels * 9];
                for i in 0..self.in_channels {
                    let src = input.plane(i);
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let mut acc = 0.0;
                            for oy in 0..oh {
                                let iy = (s * oy + ky) as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for ox in 0..ow {
                                    let ix = (s * ox + kx) as isize - 1;
                                    if ix >= 0 && ix < w as isize {
                                        acc += g[oy * ow + ox] * src[iy as usize * w + ix as usize];
                                    }
                                }
                            }
                            wg[(i * 3 + ky) * 3 + kx] = acc;
                        }
                    }
                }
                (wg, bias)
            })
            .collect();
        let mut weights = Vec::with_capacity(self.weights.len());
        let mut bias = Vec::with_capacity(self.out_channels);
        for (wg, b) in per_out {
            weights.extend(wg);
            bias.push(b);
        }

        let grad_in: Vec<Vec<f64>> = (0..self.in_channels)
            .into_par_iter()
            .map(|i| {
                let mut gi = vec![0.0; h * w];
                for o in 0..self.out_channels {
                    let g = grad_out.plane(o);
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let wv = self.weights[self.weight_index(o, i, ky, kx)];
                            if wv == 0.0 {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (s * oy + ky) as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for ox in 0..ow {
                                    let ix = (s * ox + kx) as isize - 1;
                                    if ix >= 0 && ix < w as isize {
                                        gi[iy as usize * w + ix as usize] += wv * g[oy * ow + ox];
                                    }
                                }
                            }
                        }
                    }
                }
                gi
            })
            .collect();
        (
            ConvGrad { weights, bias },
            Raster::from_vec_unchecked(self.in_channels, h, w, grad_in.concat()),
        )
    }
}

/// Ordered list of 3×3 convolutions, each followed by the leaky rectifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    pub layers: Vec<Conv3x3>,
    pub seed: u64,
}

impl ConvStack {
    /// `channels[0]` is the input width; layer `k` maps `channels[k] → channels[k+1]`.
    pub fn seeded(channels: &[usize], stride: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = channels
            .windows(2)
            .map(|w| Conv3x3::seeded(w[0], w[1], stride, &mut rng))
            .collect();
        ConvStack { layers, seed }
    }

    /// One layer per `(in, out, stride)` triple, drawn from a single seeded stream.
    pub fn from_specs(specs: &[(usize, usize, usize)], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = specs
            .iter()
            .map(|&(i, o, s)| Conv3x3::seeded(i, o, s, &mut rng))
            .collect();
        ConvStack { layers, seed }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Conv3x3::parameter_count).sum()
    }

    pub fn zero_grads(&self) -> Vec<ConvGrad> {
        self.layers
            .iter()
            .map(|l| ConvGrad {
                weights: vec![0.0; l.weights.len()],
                bias: vec![0.0; l.bias.len()],
            })
            .collect()
    }

    pub fn apply_gradient(&mut self, grads: &[ConvGrad], step: f64) {
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            for (w, d) in layer.weights.iter_mut().zip(&g.weights) {
                *w -= step * d;
            }
            for (b, d) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= step * d;
            }
        }
    }

    pub fn to_tensors(&self, prefix: &str) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (k, l) in self.layers.iter().enumerate() {
            out.push(NamedTensor {
                name: format!("{prefix}.{k}.weight"),
                shape: vec![l.out_channels, l.in_channels, 3, 3],
                stride: Some(l.stride),
                data: l.weights.clone(),
            });
            out.push(NamedTensor {
                name: format!("{prefix}.{k}.bias"),
                shape: vec![l.out_channels],
                stride: None,
                data: l.bias.clone(),
            });
        }
        out
    }

    pub fn from_tensors(bundle: &WeightBundle, prefix: &str) -> Result<Self> {
        let mut layers = Vec::new();
        for k in 0.. {
            let Some(w) = bundle.get(&format!("{prefix}.{k}.weight")) else {
                break;
            };
            let b = bundle
                .get(&format!("{prefix}.{k}.bias"))
                .ok_or_else(|| Error::invalid(format!("missing {prefix}.{k}.bias")))?;
            if w.shape.len() != 4 || w.shape[2] != 3 || w.shape[3] != 3 || b.shape != vec![w.shape[0]] {
                return Err(Error::shape(format!("bad conv tensor shapes for {prefix}.{k}")));
            }
            let stride = w.stride.unwrap_or(1);
            if stride != 1 && stride != 2 {
                return Err(Error::invalid(format!("bad stride {stride} for {prefix}.{k}")));
            }
            layers.push(Conv3x3 {
                in_channels: w.shape[1],
                out_channels: w.shape[0],
                stride,
                weights: w.data.clone(),
                bias: b.data.clone(),
            });
        }
        if layers.is_empty() {
            return Err(Error::invalid(format!("no layers named {prefix}.* in weight bundle")));
        }
        Ok(ConvStack {
            layers,
            seed: bundle.seed,
        })
    }
}

/// Fully connected layer `y = W·x + b`, `W` row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// (Semi-)orthogonal weights from the QR factor of a Gaussian matrix, times `gain`.
    pub fn orthogonal(inputs: usize, outputs: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let (rows, cols) = (outputs.max(inputs), outputs.min(inputs));
        let a = nalgebra::DMatrix::from_fn(rows, cols, |_, _| normal.sample(rng));
        let qr = a.qr();
        let mut q = qr.q();
        let r = qr.r();
        // Sign fix so the factorisation is unique.
        for j in 0..cols {
            if r[(j, j)] < 0.0 {
                for i in 0..rows {
                    q[(i, j)] = -q[(i, j)];
                }
            }
        }
        let mut layer = Dense::zeros(inputs, outputs);
        for o in 0..outputs {
            for i in 0..inputs {
                let v = if outputs >= inputs { q[(o, i)] } else { q[(i, o)] };
                layer.weights[o * inputs + i] = gain * v;
            }
        }
        layer
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns `∂L/∂x`.
    pub fn backward(&self, x: &[f64], grad_out: &[f64], grad: &mut DenseGrad) -> Vec<f64> {
        let mut gx = vec![0.0; self.inputs];
        for o in 0..self.outputs {
            let g = grad_out[o];
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let grow = &mut grad.weights[o * self.inputs..(o + 1) * self.inputs];
            for i in 0..self.inputs {
                grow[i] += g * x[i];
                gx[i] += g * row[i];
            }
        }
        gx
    }

    pub fn zero_grad(&self) -> DenseGrad {
        DenseGrad {
            weights: vec![0.0; self.weights.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseGrad {
    pub fn add_assign(&mut self, other: &DenseGrad) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}

/// One named parameter tensor of a [`WeightBundle`].
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub stride: Option<usize>,
    pub data: Vec<f64>,
}

/// Parameters stored as one flat little-endian `f32` blob plus a JSON sidecar listing the
/// tensors in blob order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBundle {
    pub seed: u64,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SidecarTensor {
    name: String,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    format: String,
    version: u32,
    dtype: String,
    seed: u64,
    tensors: Vec<SidecarTensor>,
}

const WEIGHT_FORMAT: &str = "fmba-weights";

impl WeightBundle {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Writes `<path>` (binary) and `<path>.json` (sidecar).
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut blob = Vec::new();
        let mut entries = Vec::new();
        let mut offset = 0;
        for t in &self.tensors {
            for v in &t.data {
                blob.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            entries.push(SidecarTensor {
                name: t.name.clone(),
                shape: t.shape.clone(),
                stride: t.stride,
                offset,
                len: t.data.len(),
            });
            offset += t.data.len();
        }
        let sidecar = Sidecar {
            format: WEIGHT_FORMAT.into(),
            version: 1,
            dtype: "f32le".into(),
            seed: self.seed,
            tensors: entries,
        };
        std::fs::write(path, &blob).map_err(|e| Error::io(path, e))?;
        let side_path = sidecar_path(path);
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serialises");
        std::fs::write(&side_path, json + "\n").map_err(|e| Error::io(&side_path, e))?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let side_path = sidecar_path(path);
        let text = std::fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
        let sidecar: Sidecar =
            serde_json::from_str(&text).map_err(|e| Error::format(&side_path, e.to_string()))?;
        if sidecar.format != WEIGHT_FORMAT || sidecar.dtype != "f32le" {
            return Err(Error::format(&side_path, "unsupported weight format"));
        }
        let blob = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if blob.len() % 4 != 0 {
            return Err(Error::format(path, "blob length is not a multiple of 4"));
        }
        let values: Vec<f64> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let mut tensors = Vec::new();
        for t in sidecar.tensors {
            let expected: usize = t.shape.iter().product();
            if expected != t.len || t.offset + t.len > values.len() {
                return Err(Error::format(path, format!("tensor {} is out of range", t.name)));
            }
            tensors.push(NamedTensor {
                name: t.name,
                shape: t.shape,
                stride: t.stride,
                data: values[t.offset..t.offset + t.len].to_vec(),
            });
        }
        Ok(WeightBundle {
            seed: sidecar.seed,
            tensors,
        })
    }
}

pub fn sidecar_path(path: &std::path::Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}
