//! Encoder (four stride-2 convolutions) and the top-down pyramid with lateral connections.

use crate::error::{Error, Result};
use crate::nn::{leaky_backward, leaky_raster, ConvGrad, ConvStack, WeightBundle};
use crate::raster::Raster;

pub const PYRAMID_LEVELS: usize = 3;

/// Levels F₁, F₂, F₃ at 1/2, 1/4, 1/8 of the input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: [Raster; PYRAMID_LEVELS],
}

impl FeaturePyramid {
    pub fn new(levels: [Raster; PYRAMID_LEVELS]) -> Result<Self> {
        for k in 1..PYRAMID_LEVELS {
            let (a, b) = (&levels[k - 1], &levels[k]);
            if b.channels() != a.channels() || b.height() != a.height() / 2 || b.width() != a.width() / 2 {
                return Err(Error::shape(format!(
                    "pyramid level {} is {:?}, expected half of {:?}",
                    k + 1,
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(FeaturePyramid { levels })
    }

    /// Block-averaged copies of the image itself, used by the photometric error mode.
    pub fn from_image(img: &Raster) -> Result<Self> {
        Ok(FeaturePyramid {
            levels: [img.downsample_mean(2)?, img.downsample_mean(4)?, img.downsample_mean(8)?],
        })
    }

    /// `level` in 1..=3.
    pub fn level(&self, level: usize) -> &Raster {
        &self.levels[level - 1]
    }

    pub fn levels(&self) -> &[Raster; PYRAMID_LEVELS] {
        &self.levels
    }

    pub fn channels(&self) -> usize {
        self.levels[0].channels()
    }

    pub fn into_levels(self) -> [Raster; PYRAMID_LEVELS] {
        self.levels
    }
}

/// Encoder outputs C₁..C₄ at 1/2..1/16.
pub fn encode_base(img: &Raster, enc: &ConvStack) -> Result<[Raster; 4]> {
    Ok(encode_cached(img, enc)?.outputs)
}

pub fn build_pyramid(c: &[Raster; 4], lat: &ConvStack) -> Result<FeaturePyramid> {
    Ok(pyramid_cached(c, lat)?.pyramid)
}

struct EncoderCache {
    inputs: Vec<Raster>,
    pre: Vec<Raster>,
    outputs: [Raster; 4],
}

fn encode_cached(img: &Raster, enc: &ConvStack) -> Result<EncoderCache> {
    if enc.layers.len() != 4 || enc.layers.iter().any(|l| l.stride != 2) {
        return Err(Error::invalid("encoder must be four stride-2 convolutions"));
    }
    if img.height() % 16 != 0 || img.width() % 16 != 0 {
        return Err(Error::invalid(format!(
            "encoder input {}×{} is not divisible by 16",
            img.height(),
            img.width()
        )));
    }
    let mut inputs = Vec::with_capacity(4);
    let mut pre = Vec::with_capacity(4);
    let mut outs = Vec::with_capacity(4);
    let mut x = img.clone();
    for layer in &enc.layers {
        let z = layer.forward(&x)?;
        let y = leaky_raster(&z);
        inputs.push(x);
        pre.push(z);
        outs.push(y.clone());
        x = y;
    }
    let outputs: [Raster; 4] = outs.try_into().expect("four outputs");
    Ok(EncoderCache { inputs, pre, outputs })
}

struct PyramidCache {
    /// Lateral conv inputs (upsampled coarse ⧺ skip), in order F₃, F₂, F₁.
    inputs: Vec<Raster>,
    pre: Vec<Raster>,
    /// Channel count of the upsampled part of each lateral input.
    up_channels: Vec<usize>,
    pyramid: FeaturePyramid,
}

fn pyramid_cached(c: &[Raster; 4], lat: &ConvStack) -> Result<PyramidCache> {
    if lat.layers.len() != 3 || lat.layers.iter().any(|l| l.stride != 1) {
        return Err(Error::invalid("lateral stack must be three stride-1 convolutions"));
    }
    for k in 1..4 {
        if c[k].height() * 2 != c[k - 1].height() || c[k].width() * 2 != c[k - 1].width() {
            return Err(Error::invalid(format!(
                "encoder level {} is {:?}, expected half of {:?}",
                k + 1,
                c[k].shape(),
                c[k - 1].shape()
            )));
        }
    }
    let mut inputs = Vec::with_capacity(3);
    let mut pre = Vec::with_capacity(3);
    let mut up_channels = Vec::with_capacity(3);
    let mut outs: Vec<Raster> = Vec::with_capacity(3);
    let mut coarse = c[3].clone();
    for (step, layer) in lat.layers.iter().enumerate() {
        let skip = &c[2 - step];
        let cat = coarse.upsample2_bilinear().concat(skip)?;
        up_channels.push(coarse.channels());
        let z = layer.forward(&cat)?;
        let y = leaky_raster(&z);
        inputs.push(cat);
        pre.push(z);
        outs.push(y.clone());
        coarse = y;
    }
    // outs = [F₃, F₂, F₁]
    let f1 = outs.pop().expect("F1");
    let f2 = outs.pop().expect("F2");
    let f3 = outs.pop().expect("F3");
    let pyramid = FeaturePyramid::new([f1, f2, f3])?;
    Ok(PyramidCache {
        inputs,
        pre,
        up_channels,
        pyramid,
    })
}

/// Encoder plus lateral stack.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNet {
    pub encoder: ConvStack,
    pub lateral: ConvStack,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNetGrad {
    pub encoder: Vec<ConvGrad>,
    pub lateral: Vec<ConvGrad>,
}

impl FeatureNetGrad {
    pub fn add_assign(&mut self, other: &FeatureNetGrad) {
        for (a, b) in self
            .encoder
            .iter_mut()
            .chain(self.lateral.iter_mut())
            .zip(other.encoder.iter().chain(other.lateral.iter()))
        {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.encoder.iter_mut().chain(self.lateral.iter_mut()) {
            g.weights.iter_mut().chain(g.bias.iter_mut()).for_each(|v| *v *= s);
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.encoder
            .iter()
            .chain(self.lateral.iter())
            .flat_map(|g| g.weights.iter().chain(g.bias.iter()))
            .map(|v| v * v)
            .sum()
    }
}

/// Intermediate values of one forward pass, needed by [`FeatureNet::backward`].
pub struct FeatureTape {
    encoder: EncoderCache,
    pyramid: PyramidCache,
}

impl FeatureTape {
    pub fn pyramid(&self) -> &FeaturePyramid {
        &self.pyramid.pyramid
    }
}

impl FeatureNet {
    /// Encoder channels `image → 8 → 16 → 16 → 16`, pyramid width `channels`.
    pub fn seeded(image_channels: usize, channels: usize, seed: u64) -> Self {
        let enc = [image_channels, 8, 16, 16, 16];
        let encoder = ConvStack::seeded(&enc, 2, seed);
        let lateral = ConvStack::from_specs(
            &[
                (enc[4] + enc[3], channels, 1),
                (channels + enc[2], channels, 1),
                (channels + enc[1], channels, 1),
            ],
            seed.wrapping_add(1),
        );
        FeatureNet { encoder, lateral }
    }

    pub fn channels(&self) -> usize {
        self.lateral.layers.last().map(|l| l.out_channels).unwrap_or(0)
    }

    pub fn forward(&self, img: &Raster) -> Result<FeaturePyramid> {
        build_pyramid(&encode_base(img, &self.encoder)?, &self.lateral)
    }

    pub fn forward_taped(&self, img: &Raster) -> Result<FeatureTape> {
        let encoder = encode_cached(img, &self.encoder)?;
        let pyramid = pyramid_cached(&encoder.outputs, &self.lateral)?;
        Ok(FeatureTape { encoder, pyramid })
    }

    pub fn zero_grad(&self) -> FeatureNetGrad {
        FeatureNetGrad {
            encoder: self.encoder.zero_grads(),
            lateral: self.lateral.zero_grads(),
        }
    }

    /// Gradient of a scalar wrt all weights given `∂L/∂F₁..F₃`.
    pub fn backward(&self, tape: &FeatureTape, grad_levels: &[Raster; PYRAMID_LEVELS]) -> FeatureNetGrad {
        let mut grad = self.zero_grad();
        let pc = &tape.pyramid;
        let ec = &tape.encoder;
        let mut g_c: Vec<Raster> = ec.outputs.iter().map(|r| Raster::zeros(r.channels(), r.height(), r.width())).collect();

        // Lateral steps in reverse: F₁, F₂, F₃.
        let mut g_out = grad_levels[0].clone();
        for step in (0..3).rev() {
            let layer = &self.lateral.layers[step];
            let gz = leaky_backward(&pc.pre[step], &g_out);
            let (pg, g_in) = layer.backward(&pc.inputs[step], &gz);
            grad.lateral[step] = pg;
            let (g_up, g_skip) = g_in.split_channels(pc.up_channels[step]);
            g_c[2 - step].add_assign(&g_skip);
            let g_coarse = g_up.upsample2_bilinear_adjoint();
            if step == 0 {
                g_c[3].add_assign(&g_coarse);
            } else {
                // The coarse input of step s is the output F of step s−1.
                let mut g = g_coarse;
                g.add_assign(&grad_levels[3 - step]);
                g_out = g;
            }
        }

        for k in (0..4).rev() {
            let gz = leaky_backward(&ec.pre[k], &g_c[k]);
            let (pg, g_in) = self.encoder.layers[k].backward(&ec.inputs[k], &gz);
            grad.encoder[k] = pg;
            if k > 0 {
                g_c[k - 1].add_assign(&g_in);
            }
        }
        grad
    }

    pub fn apply_gradient(&mut self, grad: &FeatureNetGrad, step: f64) {
        self.encoder.apply_gradient(&grad.encoder, step);
        self.lateral.apply_gradient(&grad.lateral, step);
    }

    pub fn to_bundle(&self) -> WeightBundle {
        let mut tensors = self.encoder.to_tensors("encoder");
        tensors.extend(self.lateral.to_tensors("lateral"));
        WeightBundle {
            seed: self.encoder.seed,
            tensors,
        }
    }

    pub fn from_bundle(bundle: &WeightBundle) -> Result<Self> {
        let encoder = ConvStack::from_tensors(bundle, "encoder")?;
        let mut lateral = ConvStack::from_tensors(bundle, "lateral")?;
        lateral.seed = bundle.seed.wrapping_add(1);
        Ok(FeatureNet { encoder, lateral })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Conv3x3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Raster {
        Raster::from_fn(c, h, w, |_, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn encoder_scales() {
        let net = FeatureNet::seeded(1, 16, 4);
        let img = Raster::filled(1, 192, 640, 0.3);
        let c = encode_base(&img, &net.encoder).unwrap();
        let shapes: Vec<_> = c.iter().map(|r| (r.height(), r.width())).collect();
        assert_eq!(shapes, vec![(96, 320), (48, 160), (24, 80), (12, 40)]);
        assert!(encode_base(&Raster::zeros(1, 40, 64), &net.encoder).is_err());
    }

    #[test]
    fn zero_image_zero_bias_gives_zero() {
        let net = FeatureNet::seeded(1, 16, 4);
        let p = net.forward(&Raster::zeros(1, 32, 32)).unwrap();
        for l in p.levels() {
            assert!(l.data().iter().all(|&v| v == 0.0));
        }
        assert_eq!(p.levels().len(), 3);
        assert_eq!(p.level(1).shape(), (16, 16, 16));
        assert_eq!(p.level(3).shape(), (16, 4, 4));
    }

    #[test]
    fn identity_like_lateral_kernels() {
        // Each output channel copies one input channel of the concatenation.
        let c: [Raster; 4] = [
            Raster::filled(2, 16, 16, 1.0),
            Raster::filled(2, 8, 8, 2.0),
            Raster::filled(2, 4, 4, 3.0),
            Raster::filled(2, 2, 2, 4.0),
        ];
        let mut lat = ConvStack::seeded(&[4, 2, 2, 2], 1, 0);
        for layer in &mut lat.layers {
            *layer = Conv3x3::zeros(4, 2, 1);
            // out 0 ← upsampled channel 0, out 1 ← skip channel 0
            let i = layer.weight_index(0, 0, 1, 1);
            layer.weights[i] = 1.0;
            let j = layer.weight_index(1, 2, 1, 1);
            layer.weights[j] = 0.5;
        }
        let p = build_pyramid(&c, &lat).unwrap();
        let f3 = p.level(3);
        assert!(f3.plane(0).iter().all(|&v| v == 4.0));
        assert!(f3.plane(1).iter().all(|&v| v == 1.5));
        let f1 = p.level(1);
        assert!(f1.plane(0).iter().all(|&v| v == 4.0));
        assert!(f1.plane(1).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn linear_without_bias_for_positive_scaling() {
        let net = FeatureNet::seeded(1, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = encode_base(&random(&mut rng, 1, 32, 32), &net.encoder).unwrap();
        let a = build_pyramid(&c, &net.lateral).unwrap();
        let c2: [Raster; 4] = c.clone().map(|r| r.scale(2.5));
        let b = build_pyramid(&c2, &net.lateral).unwrap();
        for (la, lb) in a.levels().iter().zip(b.levels()) {
            for (x, y) in la.data().iter().zip(lb.data()) {
                assert!((2.5 * x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random(&mut rng, 1, 32, 48);
        let a = FeatureNet::seeded(1, 16, 9).forward(&img).unwrap();
        let b = FeatureNet::seeded(1, 16, 9).forward(&img).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = FeatureNet::seeded(1, 4, 3);
        let img = random(&mut rng, 1, 32, 32);
        let tape = net.forward_taped(&img).unwrap();
        let probes: [Raster; 3] = tape.pyramid().levels().clone().map(|l| {
            Raster::from_fn(l.channels(), l.height(), l.width(), |_, _, _| rng.random_range(-1.0..1.0))
        });
        let loss = |n: &FeatureNet| -> f64 {
            let p = n.forward(&img).unwrap();
            p.levels()
                .iter()
                .zip(&probes)
                .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>())
                .sum()
        };
        let g = net.backward(&tape, &probes);
        let h = 1e-6;
        for (which, k, idx) in [(0, 0, 3), (0, 2, 40), (0, 3, 100), (1, 0, 17), (1, 1, 5), (1, 2, 60)] {
            let mut p = net.clone();
            let mut m = net.clone();
            let (gp, pl, ml) = if which == 0 {
                (&g.encoder[k], &mut p.encoder.layers[k], &mut m.encoder.layers[k])
            } else {
                (&g.lateral[k], &mut p.lateral.layers[k], &mut m.lateral.layers[k])
            };
            pl.weights[idx] += h;
            ml.weights[idx] -= h;
            let analytic = gp.weights[idx];
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!(
                (fd - analytic).abs() <= 1e-6 * (1.0 + fd.abs()),
                "stack {which} layer {k} weight {idx}: fd {fd} analytic {analytic}"
            );
        }
    }

    #[test]
    fn bundle_round_trip() {
        let net = FeatureNet::seeded(3, 16, 1);
        let back = FeatureNet::from_bundle(&net.to_bundle()).unwrap();
        assert_eq!(back, net);
    }
}
