//! End-to-end gradient descent on the feature network and damping MLP through the unrolled
//! solve and the view-synthesis loss.

use serde::{Deserialize, Serialize};

use crate::ba::{ba_backward, ba_solve, BaInputs, BaState, DampingMlp, DampingMlpGrad, Schedule};
use crate::error::{Error, Result};
use crate::features::{FeatureNet, FeatureNetGrad};
use crate::geometry::CameraIntrinsics;
use crate::raster::Raster;
use crate::synthesis::{total_loss, ImageScales, LossReport, LossWeights};

/// One target frame with its sources and the solver initialisation.
#[derive(Debug, Clone)]
pub struct Tracklet {
    pub target: Raster,
    pub sources: Vec<Raster>,
    pub k: CameraIntrinsics,
    pub init: BaState,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    /// `w ← w − lr·g`.
    Sgd,
    /// Bias-corrected Adam with a fixed learning rate.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Learning rate as a function of the step index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `lr·(1 + cos(π·k/steps))/2`, reaching zero after the last step.
    #[default]
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub optimizer: Optimizer,
    /// Rescales the joint gradient to at most this norm before each step; `None` disables.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            learning_rate: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            optimizer: Optimizer::adam(),
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                return Err(Error::invalid("Adam needs β1, β2 in [0, 1) and ε > 0"));
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::invalid("clip norm must be positive"));
            }
        }
        Ok(())
    }

    /// Learning rate of step `k` (0-based).
    pub fn learning_rate_at(&self, k: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine if self.steps == 0 => self.learning_rate,
            LrSchedule::Cosine => {
                let t = k.min(self.steps) as f64 / self.steps as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub features: FeatureNetGrad,
    pub mlp: DampingMlpGrad,
}

impl Gradients {
    pub fn squared_norm(&self) -> f64 {
        self.features.squared_norm() + self.mlp.squared_norm()
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        let f = &mut self.features;
        f.encoder
            .iter_mut()
            .chain(f.lateral.iter_mut())
            .flat_map(|g| g.weights.iter_mut().chain(g.bias.iter_mut()))
            .chain(
                self.mlp
                    .layers
                    .iter_mut()
                    .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut())),
            )
    }

    fn add_assign(&mut self, other: &Gradients) {
        self.features.add_assign(&other.features);
        self.mlp.add_assign(&other.mlp);
    }
}

/// Loss of one tracklet and, with `grad`, its gradient with respect to every weight.
pub fn tracklet_loss(
    net: &FeatureNet,
    mlp: &DampingMlp,
    tracklet: &Tracklet,
    schedule: &Schedule,
    weights: &LossWeights,
    grad: bool,
) -> Result<(LossReport, Option<Gradients>)> {
    let target_tape = net.forward_taped(&tracklet.target)?;
    let source_tapes = tracklet
        .sources
        .iter()
        .map(|s| net.forward_taped(s))
        .collect::<Result<Vec<_>>>()?;
    let inputs = BaInputs {
        target: target_tape.pyramid().clone(),
        sources: source_tapes.iter().map(|t| t.pyramid().clone()).collect(),
        k: tracklet.k,
    };
    let (state, trace) = ba_solve(&tracklet.init, &inputs, mlp, schedule)?;
    let images = ImageScales::new(&tracklet.target, &tracklet.sources, &weights.scales)?;
    let (report, upstream) = total_loss(&state, &images, &tracklet.k, weights, grad)?;
    if !report.l_total.is_finite() {
        return Err(Error::degenerate(format!("non-finite loss {:?}", report)));
    }
    let Some(upstream) = upstream else {
        return Ok((report, None));
    };
    let g = ba_backward(&trace, &inputs, mlp, &upstream)?;
    let mut features = net.backward(&target_tape, &g.target_features);
    for (tape, fg) in source_tapes.iter().zip(&g.source_features) {
        features.add_assign(&net.backward(tape, fg));
    }
    Ok((report, Some(Gradients { features, mlp: g.mlp })))
}

/// A tracklet whose loss could not be evaluated.
#[derive(Debug)]
pub struct TrackletFailure {
    pub index: usize,
    pub error: Error,
}

/// Mean loss and gradient over tracklets.
pub fn batch_loss(
    net: &FeatureNet,
    mlp: &DampingMlp,
    tracklets: &[Tracklet],
    schedule: &Schedule,
    weights: &LossWeights,
    grad: bool,
) -> Result<(LossReport, Option<Gradients>)> {
    if tracklets.is_empty() {
        return Err(Error::invalid("no tracklets to train on"));
    }
    try_batch_loss(net, mlp, tracklets, schedule, weights, grad)
        .map_err(|f| with_context(f.error, &format!("tracklet {}", f.index)))
}

/// [`batch_loss`] reporting which tracklet failed. `tracklets` must be non-empty.
pub fn try_batch_loss(
    net: &FeatureNet,
    mlp: &DampingMlp,
    tracklets: &[Tracklet],
    schedule: &Schedule,
    weights: &LossWeights,
    grad: bool,
) -> std::result::Result<(LossReport, Option<Gradients>), TrackletFailure> {
    let mut mean: Option<LossReport> = None;
    let mut total: Option<Gradients> = None;
    for (index, t) in tracklets.iter().enumerate() {
        let (r, g) = tracklet_loss(net, mlp, t, schedule, weights, grad)
            .map_err(|error| TrackletFailure { index, error })?;
        mean = Some(match mean {
            None => r,
            Some(m) => m.add(&r),
        });
        if let Some(g) = g {
            match &mut total {
                None => total = Some(g),
                Some(t) => t.add_assign(&g),
            }
        }
    }
    let n = tracklets.len() as f64;
    let mean = mean
        .ok_or_else(|| TrackletFailure {
            index: 0,
            error: Error::invalid("no tracklets to train on"),
        })?
        .scaled(1.0 / n);
    if let Some(t) = &mut total {
        t.features.scale(1.0 / n);
        t.mlp.scale(1.0 / n);
    }
    Ok((mean, total))
}

fn with_context(e: Error, ctx: &str) -> Error {
    match e {
        Error::Degenerate(m) => Error::Degenerate(format!("{ctx}: {m}")),
        Error::InvalidArgument(m) => Error::InvalidArgument(format!("{ctx}: {m}")),
        other => other,
    }
}

/// Optimiser state carried between steps.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    step: usize,
    moments: Vec<(f64, f64)>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            cfg,
            step: 0,
            moments: Vec::new(),
        })
    }

    /// Steps taken so far.
    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Updates the weights from a gradient of the mean loss.
    pub fn apply(&mut self, net: &mut FeatureNet, mlp: &mut DampingMlp, mut g: Gradients) {
        if let Some(c) = self.cfg.clip_norm {
            let norm = g.squared_norm().sqrt();
            if norm > c {
                g.values_mut().for_each(|v| *v *= c / norm);
            }
        }
        let lr = self.cfg.learning_rate_at(self.step);
        self.step += 1;
        if let Optimizer::Adam { beta1, beta2, eps } = self.cfg.optimizer {
            let t = self.step as i32;
            let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
            let mut values: Vec<&mut f64> = g.values_mut().collect();
            self.moments.resize(values.len(), (0.0, 0.0));
            for (v, (m, s)) in values.iter_mut().zip(self.moments.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * **v;
                *s = beta2 * *s + (1.0 - beta2) * **v * **v;
                **v = (*m / c1) / ((*s / c2).sqrt() + eps);
            }
        }
        net.apply_gradient(&g.features, lr);
        mlp.apply_gradient(&g.mlp, lr);
    }
}

/// Runs `cfg.steps` descent steps. Returns the loss before every step and after the last,
/// `steps + 1` reports in all.
pub fn train(
    net: &mut FeatureNet,
    mlp: &mut DampingMlp,
    tracklets: &[Tracklet],
    schedule: &Schedule,
    weights: &LossWeights,
    cfg: &TrainConfig,
) -> Result<Vec<LossReport>> {
    let mut trainer = Trainer::new(*cfg)?;
    let mut curve = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let last = step == cfg.steps;
        let (report, g) = batch_loss(net, mlp, tracklets, schedule, weights, !last)
            .map_err(|e| with_context(e, &format!("step {step}")))?;
        curve.push(report);
        if let Some(g) = g {
            trainer.apply(net, mlp, g);
        }
    }
    Ok(curve)
}
