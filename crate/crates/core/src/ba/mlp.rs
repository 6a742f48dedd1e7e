//! Damping predictor: pooled residual → three dense layers → non-negative λ.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ba::residual::ResidualVector;
use crate::error::{Error, Result};
use crate::nn::{leaky, leaky_grad, Dense, DenseGrad, NamedTensor, WeightBundle};

/// Output bias of a freshly seeded network.
pub const INITIAL_LAMBDA: f64 = 1e-3;

/// Lower bound on the predicted damping. Monocular BA has an exact scale gauge, so the
/// undamped system is singular.
pub const LAMBDA_FLOOR: f64 = 1e-4;

pub const HIDDEN_UNITS: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct DampingMlp {
    pub layers: [Dense; 3],
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DampingMlpGrad {
    pub layers: [DenseGrad; 3],
}

impl DampingMlpGrad {
    pub fn add_assign(&mut self, other: &DampingMlpGrad) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v *= s);
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
            .map(|v| v * v)
            .sum()
    }
}

/// Forward intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpTape {
    pub input: Vec<f64>,
    pre1: Vec<f64>,
    act1: Vec<f64>,
    pre2: Vec<f64>,
    act2: Vec<f64>,
    pre3: f64,
}

impl DampingMlp {
    /// Orthogonal layers scaled by 0.1 and output bias [`INITIAL_LAMBDA`], so the untrained
    /// network predicts nearly Gauss-Newton steps.
    pub fn seeded(inputs: usize, seed: u64) -> Self {
        DampingMlp::seeded_with_bias(inputs, seed, INITIAL_LAMBDA)
    }

    pub fn seeded_with_bias(inputs: usize, seed: u64, output_bias: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l1 = Dense::orthogonal(inputs, HIDDEN_UNITS, 0.1, &mut rng);
        let l2 = Dense::orthogonal(HIDDEN_UNITS, HIDDEN_UNITS, 0.1, &mut rng);
        let mut l3 = Dense::orthogonal(HIDDEN_UNITS, 1, 0.1, &mut rng);
        l3.bias[0] = output_bias;
        DampingMlp {
            layers: [l1, l2, l3],
            seed,
        }
    }

    pub fn zeros(inputs: usize) -> Self {
        DampingMlp {
            layers: [
                Dense::zeros(inputs, HIDDEN_UNITS),
                Dense::zeros(HIDDEN_UNITS, HIDDEN_UNITS),
                Dense::zeros(HIDDEN_UNITS, 1),
            ],
            seed: 0,
        }
    }

    /// Zero weights with output bias `lambda`: predicts `max(lambda, 0)` for any residual.
    pub fn constant(inputs: usize, lambda: f64) -> Self {
        let mut mlp = DampingMlp::zeros(inputs);
        mlp.layers[2].bias[0] = lambda;
        mlp
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn forward_taped(&self, x: &[f64]) -> MlpTape {
        let pre1 = self.layers[0].forward(x);
        let act1: Vec<f64> = pre1.iter().map(|v| leaky(*v)).collect();
        let pre2 = self.layers[1].forward(&act1);
        let act2: Vec<f64> = pre2.iter().map(|v| leaky(*v)).collect();
        let pre3 = self.layers[2].forward(&act2)[0];
        MlpTape {
            input: x.to_vec(),
            pre1,
            act1,
            pre2,
            act2,
            pre3,
        }
    }

    pub fn forward(&self, x: &[f64]) -> f64 {
        lambda_of(&self.forward_taped(x))
    }

    pub fn zero_grad(&self) -> DampingMlpGrad {
        DampingMlpGrad {
            layers: [self.layers[0].zero_grad(), self.layers[1].zero_grad(), self.layers[2].zero_grad()],
        }
    }

    /// Accumulates `λ̄·∂λ/∂θ` into `grad`; returns `λ̄·∂λ/∂x`.
    pub fn backward(&self, tape: &MlpTape, lambda_bar: f64, grad: &mut DampingMlpGrad) -> Vec<f64> {
        if tape.pre3 <= LAMBDA_FLOOR || lambda_bar == 0.0 {
            return vec![0.0; self.inputs()];
        }
        let [g1, g2, g3] = &mut grad.layers;
        let ga2 = self.layers[2].backward(&tape.act2, &[lambda_bar], g3);
        let gp2: Vec<f64> = ga2.iter().zip(&tape.pre2).map(|(g, p)| g * leaky_grad(*p)).collect();
        let ga1 = self.layers[1].backward(&tape.act1, &gp2, g2);
        let gp1: Vec<f64> = ga1.iter().zip(&tape.pre1).map(|(g, p)| g * leaky_grad(*p)).collect();
        self.layers[0].backward(&tape.input, &gp1, g1)
    }

    pub fn apply_gradient(&mut self, grad: &DampingMlpGrad, step: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grad.layers) {
            l.weights.iter_mut().zip(&g.weights).for_each(|(w, d)| *w -= step * d);
            l.bias.iter_mut().zip(&g.bias).for_each(|(b, d)| *b -= step * d);
        }
    }

    pub fn to_tensors(&self, prefix: &str) -> Vec<NamedTensor> {
        let mut out = Vec::new();
        for (k, l) in self.layers.iter().enumerate() {
            out.push(NamedTensor {
                name: format!("{prefix}.{k}.weight"),
                shape: vec![l.outputs, l.inputs],
                stride: None,
                data: l.weights.clone(),
            });
            out.push(NamedTensor {
                name: format!("{prefix}.{k}.bias"),
                shape: vec![l.outputs],
                stride: None,
                data: l.bias.clone(),
            });
        }
        out
    }

    pub fn from_tensors(bundle: &WeightBundle, prefix: &str) -> Result<Self> {
        let mut layers = Vec::new();
        for k in 0..3 {
            let w = bundle
                .get(&format!("{prefix}.{k}.weight"))
                .ok_or_else(|| Error::invalid(format!("missing {prefix}.{k}.weight")))?;
            let b = bundle
                .get(&format!("{prefix}.{k}.bias"))
                .ok_or_else(|| Error::invalid(format!("missing {prefix}.{k}.bias")))?;
            if w.shape.len() != 2 || b.shape != vec![w.shape[0]] {
                return Err(Error::shape(format!("bad dense tensor shapes for {prefix}.{k}")));
            }
            layers.push(Dense {
                inputs: w.shape[1],
                outputs: w.shape[0],
                weights: w.data.clone(),
                bias: b.data.clone(),
            });
        }
        let layers: [Dense; 3] = layers.try_into().expect("three layers");
        if layers[0].outputs != layers[1].inputs || layers[1].outputs != layers[2].inputs || layers[2].outputs != 1 {
            return Err(Error::shape(format!("{prefix} layers do not chain to a scalar")));
        }
        Ok(DampingMlp {
            layers,
            seed: bundle.seed,
        })
    }
}

/// `max(relu(pre), LAMBDA_FLOOR)`.
pub fn lambda_of(tape: &MlpTape) -> f64 {
    tape.pre3.max(LAMBDA_FLOOR)
}

/// Per-channel mean of the residual over valid `(pixel, view)` entries.
pub fn global_average_pool(e: &ResidualVector) -> Vec<f64> {
    let mut acc = vec![0.0; e.channels];
    let mut n = 0usize;
    for (r, &ok) in e.values.chunks_exact(e.channels).zip(&e.valid) {
        if ok {
            n += 1;
            acc.iter_mut().zip(r).for_each(|(a, v)| *a += v);
        }
    }
    if n > 0 {
        acc.iter_mut().for_each(|a| *a /= n as f64);
    }
    acc
}

/// Adjoint of [`global_average_pool`]: adds `x̄_c / n` to every valid entry of channel `c`.
pub fn global_average_pool_adjoint(e: &ResidualVector, x_bar: &[f64], e_bar: &mut [f64]) {
    let n = e.valid_count();
    if n == 0 {
        return;
    }
    let inv = 1.0 / n as f64;
    for (r, &ok) in e_bar.chunks_exact_mut(e.channels).zip(&e.valid) {
        if ok {
            r.iter_mut().zip(x_bar).for_each(|(a, g)| *a += g * inv);
        }
    }
}

pub fn predict_lambda(e: &ResidualVector, mlp: &DampingMlp) -> Result<f64> {
    if mlp.inputs() != e.channels {
        return Err(Error::shape(format!(
            "damping network expects {} channels, residual has {}",
            mlp.inputs(),
            e.channels
        )));
    }
    Ok(mlp.forward(&global_average_pool(e)))
}
