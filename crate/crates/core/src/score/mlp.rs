//! Multilayer perceptron score network with hand-written reverse mode.
//!
//! The network sees the flattened signal with `sqrt(abar_i)` and
//! `sqrt(1 - abar_i)` appended and predicts the injected noise; the score is
//! `-eps / sqrt(1 - abar_i)`. Hidden layers use a smooth activation so the
//! input Jacobian exists everywhere.
//!
//! An optional [`GaussianSkip`] adds the exact noise predictor of a diagonal
//! Gaussian fitted to the training data and gates the network output by
//! `g = a s_d / sqrt(a^2 s_d^2 + b^2)` (`a = sqrt(abar)`, `b = sqrt(1 - abar)`,
//! `s_d^2` the mean data variance). The network then learns a residual whose
//! contribution to the Tweedie estimate stays bounded as `abar -> 0`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::SignalGrid;
use crate::rng::normal;
use crate::schedule::NoiseSchedule;

/// Number of time-conditioning features appended to the input.
pub const TIME_FEATURES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    pub fn tag(self) -> u32 {
        match self {
            Activation::Tanh => 0,
            Activation::Silu => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Silu),
            _ => None,
        }
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Silu => v / (1.0 + (-v).exp()),
        }
    }

    fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = v.tanh();
                1.0 - t * t
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-v).exp());
                s * (1.0 + v * (1.0 - s))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out × in`
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Per-coordinate data mean and variance defining the skip predictor
/// `eps = b (x - a m) / (a^2 v + b^2)` with `a = sqrt(abar)`, `b = sqrt(1 - abar)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSkip {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianSkip {
    /// Moments of a dataset of equally shaped grids.
    pub fn fit(data: &[SignalGrid]) -> Result<Self> {
        let first = data.first().ok_or_else(|| Error::param("cannot fit skip to no data"))?;
        let n = first.len();
        let count = data.len() as f64;
        let mut mean = vec![0.0; n];
        for x in data {
            mean.iter_mut().zip(x.data()).for_each(|(m, v)| *m += v / count);
        }
        let mut var = vec![0.0; n];
        for x in data {
            for ((s, v), m) in var.iter_mut().zip(x.data()).zip(&mean) {
                *s += (v - m) * (v - m) / count;
            }
        }
        Ok(Self { mean, var })
    }

    fn gain(&self, j: usize, a: f64, b: f64) -> f64 {
        b / (a * a * self.var[j] + b * b)
    }

    fn gate(&self, a: f64, b: f64) -> f64 {
        let sd2 = self.var.iter().sum::<f64>() / self.var.len() as f64;
        if sd2 <= 0.0 {
            return 1.0;
        }
        a * sd2.sqrt() / (a * a * sd2 + b * b).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpScore {
    pub shape: Vec<usize>,
    pub activation: Activation,
    pub layers: Vec<Layer>,
    pub skip: Option<GaussianSkip>,
}

/// Intermediate values of a batched forward pass.
pub(crate) struct Tape {
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
}

pub(crate) struct Grads {
    pub weight: Vec<DMatrix<f64>>,
    pub bias: Vec<DVector<f64>>,
}

impl MlpScore {
    /// Random initialization with `N(0, 1/fan_in)` weights and zero biases.
    /// `hidden` lists the hidden widths; input and output widths follow from
    /// `shape`.
    pub fn init<R: Rng + ?Sized>(
        shape: &[usize],
        hidden: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n == 0 || hidden.contains(&0) {
            return Err(Error::param("network widths must be positive"));
        }
        let mut widths = vec![n + TIME_FEATURES];
        widths.extend_from_slice(hidden);
        widths.push(n);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (1.0 / fan_in as f64).sqrt();
                let weight = DMatrix::from_fn(fan_out, fan_in, |_, _| std * normal(rng));
                Layer { weight, bias: DVector::zeros(fan_out) }
            })
            .collect();
        Ok(Self { shape: shape.to_vec(), activation, layers, skip: None })
    }

    pub fn with_skip(mut self, skip: GaussianSkip) -> Result<Self> {
        let n = self.dim();
        if skip.mean.len() != n || skip.var.len() != n {
            return Err(Error::shape("skip moments do not match domain"));
        }
        if skip.var.iter().chain(&skip.mean).any(|v| !v.is_finite()) || skip.var.iter().any(|v| *v < 0.0) {
            return Err(Error::param("skip moments must be finite with nonnegative variance"));
        }
        self.skip = Some(skip);
        Ok(self)
    }

    pub fn from_layers(shape: &[usize], activation: Activation, layers: Vec<Layer>) -> Result<Self> {
        let n: usize = shape.iter().product();
        let first = layers.first().ok_or_else(|| Error::param("network has no layers"))?;
        if first.weight.ncols() != n + TIME_FEATURES {
            return Err(Error::shape("first layer does not match domain"));
        }
        for pair in layers.windows(2) {
            if pair[0].weight.nrows() != pair[1].weight.ncols() {
                return Err(Error::shape("consecutive layer widths disagree"));
            }
        }
        for l in &layers {
            if l.bias.len() != l.weight.nrows() {
                return Err(Error::shape("bias length disagrees with layer width"));
            }
        }
        if layers.last().map(|l| l.weight.nrows()) != Some(n) {
            return Err(Error::shape("last layer does not match domain"));
        }
        Ok(Self { shape: shape.to_vec(), activation, layers, skip: None })
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].weight.ncols()];
        w.extend(self.layers.iter().map(|l| l.weight.nrows()));
        w
    }

    pub fn dim(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Column-major batch input: each column is `[x; sqrt(abar); sqrt(1-abar)]`.
    pub(crate) fn input_column(x: &[f64], alpha_bar: f64) -> impl Iterator<Item = f64> + '_ {
        x.iter().copied().chain([alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt()])
    }

    pub(crate) fn forward(&self, input: DMatrix<f64>) -> (DMatrix<f64>, Tape) {
        let mut tape =
            Tape { inputs: Vec::with_capacity(self.layers.len()), pre: Vec::with_capacity(self.layers.len()) };
        let last = self.layers.len() - 1;
        let mut h = input;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weight * &h;
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            tape.inputs.push(h);
            if k == last {
                h = z.clone();
            } else {
                h = z.map(|v| self.activation.apply(v));
            }
            tape.pre.push(z);
        }
        if let Some(skip) = &self.skip {
            let n = self.dim();
            let input = &tape.inputs[0];
            for col in 0..h.ncols() {
                let (a, b) = (input[(n, col)], input[(n + 1, col)]);
                let g = skip.gate(a, b);
                for j in 0..n {
                    h[(j, col)] = g * h[(j, col)] + skip.gain(j, a, b) * (input[(j, col)] - a * skip.mean[j]);
                }
            }
        }
        (h, tape)
    }

    /// Reverse pass. Returns the cotangent of the network input and, when
    /// requested, the parameter gradients.
    pub(crate) fn backward(
        &self,
        tape: &Tape,
        d_out: DMatrix<f64>,
        want_params: bool,
    ) -> (DMatrix<f64>, Option<Grads>) {
        let last = self.layers.len() - 1;
        let mut grads = want_params.then(|| Grads {
            weight: Vec::with_capacity(self.layers.len()),
            bias: Vec::with_capacity(self.layers.len()),
        });
        let skip_in = self.skip.as_ref().map(|skip| {
            let n = self.dim();
            let input = &tape.inputs[0];
            DMatrix::from_fn(n, d_out.ncols(), |j, col| {
                skip.gain(j, input[(n, col)], input[(n + 1, col)]) * d_out[(j, col)]
            })
        });
        let mut delta = d_out;
        if let Some(skip) = &self.skip {
            let n = self.dim();
            let input = &tape.inputs[0];
            for (col, mut c) in delta.column_iter_mut().enumerate() {
                c *= skip.gate(input[(n, col)], input[(n + 1, col)]);
            }
        }
        for k in (0..self.layers.len()).rev() {
            if k != last {
                let act = self.activation;
                delta.zip_apply(&tape.pre[k], |d, z| *d *= act.derivative(z));
            }
            if let Some(g) = grads.as_mut() {
                g.weight.push(&delta * tape.inputs[k].transpose());
                g.bias.push(delta.column_sum());
            }
            delta = self.layers[k].weight.transpose() * &delta;
        }
        if let Some(g) = grads.as_mut() {
            g.weight.reverse();
            g.bias.reverse();
        }
        // Time features are not differentiated through the skip.
        if let Some(extra) = skip_in {
            let n = extra.nrows();
            delta.rows_mut(0, n).zip_apply(&extra, |d, e| *d += e);
        }
        (delta, grads)
    }

    fn check(&self, x: &SignalGrid) -> Result<()> {
        if x.shape() != self.shape.as_slice() {
            return Err(Error::shape(format!("model domain {:?}, input {:?}", self.shape, x.shape())));
        }
        Ok(())
    }

    fn noise_scale(i: usize, sched: &NoiseSchedule) -> Result<(f64, f64)> {
        let ab = sched.alpha_bar(i);
        let s = (1.0 - ab).sqrt();
        if s <= 0.0 {
            return Err(Error::DegenerateStep {
                step: i,
                reason: "noise-prediction score undefined at alpha_bar = 1".into(),
            });
        }
        Ok((ab, s))
    }

    /// Raw network output (the noise estimate) for one signal.
    pub fn predict_noise(&self, x: &SignalGrid, i: usize, sched: &NoiseSchedule) -> Result<SignalGrid> {
        self.check(x)?;
        let ab = sched.alpha_bar(i);
        let n = self.dim();
        let input = DMatrix::from_iterator(n + TIME_FEATURES, 1, Self::input_column(x.data(), ab));
        let (out, _) = self.forward(input);
        SignalGrid::new(x.shape(), out.iter().copied().collect())
    }

    pub fn score(&self, x: &SignalGrid, i: usize, sched: &NoiseSchedule) -> Result<SignalGrid> {
        let (_, s) = Self::noise_scale(i, sched)?;
        Ok(self.predict_noise(x, i, sched)?.scale(-1.0 / s))
    }

    pub fn score_vjp(
        &self,
        x: &SignalGrid,
        i: usize,
        sched: &NoiseSchedule,
        cotangent: &SignalGrid,
    ) -> Result<SignalGrid> {
        self.check(x)?;
        x.check_same_shape(cotangent, "score_vjp cotangent")?;
        let (ab, s) = Self::noise_scale(i, sched)?;
        let n = self.dim();
        let input = DMatrix::from_iterator(n + TIME_FEATURES, 1, Self::input_column(x.data(), ab));
        let (_, tape) = self.forward(input);
        let d_out = DMatrix::from_iterator(n, 1, cotangent.data().iter().map(|c| -c / s));
        let (d_in, _) = self.backward(&tape, d_out, false);
        SignalGrid::new(x.shape(), d_in.iter().take(n).copied().collect())
    }
}
