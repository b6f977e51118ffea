//! Denoising score matching for [`MlpScore`].
//!
//! Each sample draws a step `i` uniformly from `1..=N` and fresh noise `z`,
//! forms `x_i = sqrt(abar_i) x0 + sqrt(1 - abar_i) z` and regresses the
//! network's noise prediction onto `z`. In score units this is the DSM
//! objective `|s(x_i) + z / sqrt(1 - abar_i)|^2` weighted by `1 - abar_i`,
//! which has the same minimizer at every step.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Activation, GaussianSkip, MlpScore, TIME_FEATURES};
use crate::error::{Error, Result};
use crate::grid::SignalGrid;
use crate::rng::{normal, Branch, Streams};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Heavy-ball SGD.
    SgdMomentum,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub optimizer: Optimizer,
    /// Hidden widths; input and output widths follow from the data.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
    /// Stop after this many parameter updates even mid-epoch.
    pub max_steps: Option<usize>,
    /// Rescale the gradient when its global norm exceeds this.
    pub clip_norm: Option<f64>,
    /// Add the diagonal-Gaussian skip predictor fitted to the dataset.
    pub gaussian_skip: bool,
    /// Anneal the learning rate to zero along a half cosine over the run.
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            momentum: 0.9,
            optimizer: Optimizer::SgdMomentum,
            hidden: vec![128, 128],
            activation: Activation::Tanh,
            seed: 0,
            max_steps: None,
            clip_norm: None,
            gaussian_skip: true,
            cosine_decay: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub model: MlpScore,
    /// Mean training loss per completed epoch.
    pub loss_history: Vec<f64>,
    /// Loss on the held-out set after each epoch (empty without one).
    pub heldout_history: Vec<f64>,
    pub steps: usize,
}

/// The initialization `dsm_train` starts from for this shape and config.
pub fn init_model(shape: &[usize], cfg: &TrainConfig) -> Result<MlpScore> {
    let mut rng = Streams::new(cfg.seed).stream(Branch::TRAINING, u64::MAX);
    MlpScore::init(shape, &cfg.hidden, cfg.activation, &mut rng)
}

pub fn dsm_train(dataset: &[SignalGrid], sched: &NoiseSchedule, cfg: &TrainConfig) -> Result<TrainReport> {
    dsm_train_monitored(dataset, &[], sched, cfg)
}

/// Fixed `(step, noise)` draws so held-out losses are comparable across epochs.
struct HeldOut {
    inputs: DMatrix<f64>,
    targets: DMatrix<f64>,
}

impl HeldOut {
    fn new(items: &[SignalGrid], sched: &NoiseSchedule, seed: u64) -> Self {
        let n = items[0].len();
        let mut rng = Streams::new(seed).stream(Branch::PROBE, 0);
        let mut inputs = DMatrix::zeros(n + TIME_FEATURES, items.len());
        let mut targets = DMatrix::zeros(n, items.len());
        for (col, x0) in items.iter().enumerate() {
            let i = rng.random_range(1..=sched.n_steps());
            fill_column(&mut inputs, &mut targets, col, x0.data(), i, sched, &mut rng);
        }
        Self { inputs, targets }
    }

    fn loss(&self, model: &MlpScore) -> f64 {
        let (out, _) = model.forward(self.inputs.clone());
        (out - &self.targets).norm_squared() / self.targets.ncols() as f64
    }
}

fn fill_column<R: Rng + ?Sized>(
    inputs: &mut DMatrix<f64>,
    targets: &mut DMatrix<f64>,
    col: usize,
    x0: &[f64],
    i: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) {
    let ab = sched.alpha_bar(i);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let n = x0.len();
    for (k, &x) in x0.iter().enumerate() {
        let z = normal(rng);
        inputs[(k, col)] = a * x + b * z;
        targets[(k, col)] = z;
    }
    inputs[(n, col)] = a;
    inputs[(n + 1, col)] = b;
}

struct OptState {
    m_w: Vec<DMatrix<f64>>,
    m_b: Vec<DVector<f64>>,
    v_w: Vec<DMatrix<f64>>,
    v_b: Vec<DVector<f64>>,
    t: i32,
}

impl OptState {
    fn new(model: &MlpScore) -> Self {
        let zw: Vec<_> = model.layers.iter().map(|l| DMatrix::zeros(l.weight.nrows(), l.weight.ncols())).collect();
        let zb: Vec<_> = model.layers.iter().map(|l| DVector::zeros(l.bias.len())).collect();
        Self { m_w: zw.clone(), m_b: zb.clone(), v_w: zw, v_b: zb, t: 0 }
    }
}

/// Trains with an optional held-out set whose loss is logged per epoch.
pub fn dsm_train_monitored(
    dataset: &[SignalGrid],
    heldout: &[SignalGrid],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let first = dataset.first().ok_or_else(|| Error::param("training dataset is empty"))?;
    let shape = first.shape().to_vec();
    if let Some(bad) = dataset.iter().chain(heldout).find(|x| x.shape() != shape.as_slice()) {
        return Err(Error::shape(format!("dataset mixes shapes {shape:?} and {:?}", bad.shape())));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::param("batch size and learning rate must be positive"));
    }

    let mut model = init_model(&shape, cfg)?;
    if cfg.gaussian_skip {
        model = model.with_skip(GaussianSkip::fit(dataset)?)?;
    }
    let n = first.len();
    let streams = Streams::new(cfg.seed);
    let held = (!heldout.is_empty()).then(|| HeldOut::new(heldout, sched, cfg.seed));
    let mut opt = OptState::new(&model);
    let mut loss_history = Vec::with_capacity(cfg.epochs);
    let mut heldout_history = Vec::new();
    let mut steps = 0usize;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut total = cfg.epochs * dataset.len().div_ceil(cfg.batch_size);
    if let Some(m) = cfg.max_steps {
        total = total.min(m);
    }
    let rate = |step: usize| {
        if cfg.cosine_decay && total > 0 {
            0.5 * cfg.learning_rate * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
        } else {
            cfg.learning_rate
        }
    };

    'epochs: for epoch in 0..cfg.epochs {
        let mut rng = streams.stream(Branch::TRAINING, epoch as u64);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let b = chunk.len();
            let mut inputs = DMatrix::zeros(n + TIME_FEATURES, b);
            let mut targets = DMatrix::zeros(n, b);
            for (col, &idx) in chunk.iter().enumerate() {
                let i = rng.random_range(1..=sched.n_steps());
                fill_column(&mut inputs, &mut targets, col, dataset[idx].data(), i, sched, &mut rng);
            }
            let (out, tape) = model.forward(inputs);
            let resid = out - targets;
            let loss = resid.norm_squared() / b as f64;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch, reason: format!("loss {loss} after {steps} steps") });
            }
            epoch_loss += loss * b as f64;
            seen += b;
            let d_out = resid * (2.0 / b as f64);
            let (_, grads) = model.backward(&tape, d_out, true);
            let mut grads = grads.expect("parameter gradients requested");
            if let Some(clip) = cfg.clip_norm {
                let norm = grads
                    .weight
                    .iter()
                    .map(|g| g.norm_squared())
                    .chain(grads.bias.iter().map(|g| g.norm_squared()))
                    .sum::<f64>()
                    .sqrt();
                if norm > clip {
                    let s = clip / norm;
                    grads.weight.iter_mut().for_each(|g| *g *= s);
                    grads.bias.iter_mut().for_each(|g| *g *= s);
                }
            }
            apply_update(&mut model, &mut opt, &grads, cfg, rate(steps));
            steps += 1;
        }
        if seen == 0 {
            break 'epochs;
        }
        loss_history.push(epoch_loss / seen as f64);
        if let Some(h) = &held {
            let l = h.loss(&model);
            if !l.is_finite() {
                return Err(Error::TrainingDiverged { epoch, reason: format!("held-out loss {l}") });
            }
            heldout_history.push(l);
        }
    }

    Ok(TrainReport { model, loss_history, heldout_history, steps })
}

fn apply_update(model: &mut MlpScore, opt: &mut OptState, grads: &super::mlp::Grads, cfg: &TrainConfig, lr: f64) {
    match cfg.optimizer {
        Optimizer::SgdMomentum => {
            let mu = cfg.momentum;
            for (k, layer) in model.layers.iter_mut().enumerate() {
                opt.m_w[k] *= mu;
                opt.m_w[k] += &grads.weight[k];
                opt.m_b[k] *= mu;
                opt.m_b[k] += &grads.bias[k];
                layer.weight -= &opt.m_w[k] * lr;
                layer.bias -= &opt.m_b[k] * lr;
            }
        }
        Optimizer::Adam => {
            let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
            opt.t += 1;
            let c1 = 1.0 - b1.powi(opt.t);
            let c2 = 1.0 - b2.powi(opt.t);
            for (k, layer) in model.layers.iter_mut().enumerate() {
                opt.m_w[k].zip_apply(&grads.weight[k], |m, g| *m = b1 * *m + (1.0 - b1) * g);
                opt.v_w[k].zip_apply(&grads.weight[k], |v, g| *v = b2 * *v + (1.0 - b2) * g * g);
                opt.m_b[k].zip_apply(&grads.bias[k], |m, g| *m = b1 * *m + (1.0 - b1) * g);
                opt.v_b[k].zip_apply(&grads.bias[k], |v, g| *v = b2 * *v + (1.0 - b2) * g * g);
                for (w, (m, v)) in layer.weight.iter_mut().zip(opt.m_w[k].iter().zip(opt.v_w[k].iter())) {
                    *w -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                }
                for (w, (m, v)) in layer.bias.iter_mut().zip(opt.m_b[k].iter().zip(opt.v_b[k].iter())) {
                    *w -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                }
            }
        }
    }
}
