//! Closed-form priors whose diffused marginals stay in the same family.
//!
//! Under the VP forward process a coordinate with prior `N(m, v)` has
//! marginal `N(sqrt(abar) m, abar v + 1 - abar)` at step `i`, and a mixture
//! diffuses component-wise. Scores and their Jacobians are therefore exact.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::SignalGrid;
use crate::rng::normal;
use crate::schedule::NoiseSchedule;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Diagonal Gaussian prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub shape: Vec<usize>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianPrior {
    pub fn new(shape: &[usize], mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if mean.len() != n || var.len() != n {
            return Err(Error::shape(format!("gaussian prior over {shape:?} needs {n} means and variances")));
        }
        if var.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::param("prior variances must be positive"));
        }
        Ok(Self { shape: shape.to_vec(), mean, var })
    }

    pub fn standard(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), mean: vec![0.0; n], var: vec![1.0; n] }
    }

    /// Per-coordinate mean and variance of the marginal at step `i`.
    pub fn diffused(&self, i: usize, sched: &NoiseSchedule) -> (Vec<f64>, Vec<f64>) {
        let ab = sched.alpha_bar(i);
        let a = ab.sqrt();
        let m = self.mean.iter().map(|m| a * m).collect();
        let v = self.var.iter().map(|v| ab * v + (1.0 - ab)).collect();
        (m, v)
    }

    pub fn log_density(&self, x: &SignalGrid, i: usize, sched: &NoiseSchedule) -> Result<f64> {
        check_shape(&self.shape, x)?;
        let (m, v) = self.diffused(i, sched);
        Ok(diag_log_normal(x.data(), &m, &v))
    }

    pub fn score(&self, x: &SignalGrid, i: usize, sched: &NoiseSchedule) -> Result<SignalGrid> {
        check_shape(&self.shape, x)?;
        let (m, v) = self.diffused(i, sched);
        let data = x.data().iter().zip(m.iter().zip(&v)).map(|(x, (m, v))| -(x - m) / v).collect();
        SignalGrid::new(x.shape(), data)
    }

    pub fn score_vjp(
        &self,
        x: &SignalGrid,
        i: usize,
        sched: &NoiseSchedule,
        cotangent: &SignalGrid,
    ) -> Result<SignalGrid> {
        check_shape(&self.shape, x)?;
        x.check_same_shape(cotangent, "score_vjp cotangent")?;
        let (_, v) = self.diffused(i, sched);
        let data = cotangent.data().iter().zip(&v).map(|(c, v)| -c / v).collect();
        SignalGrid::new(x.shape(), data)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SignalGrid {
        let data = self.mean.iter().zip(&self.var).map(|(m, v)| m + v.sqrt() * normal(rng)).collect();
        SignalGrid::new(&self.shape, data).expect("prior shape is consistent")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Mixture of diagonal Gaussians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmPrior {
    pub shape: Vec<usize>,
    pub components: Vec<GmmComponent>,
}

impl GmmPrior {
    pub fn new(shape: &[usize], components: Vec<GmmComponent>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if components.is_empty() {
            return Err(Error::param("mixture needs at least one component"));
        }
        for c in &components {
            if c.mean.len() != n || c.var.len() != n {
                return Err(Error::shape(format!("mixture component over {shape:?}")));
            }
            if !(c.weight > 0.0) || c.var.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::param("mixture weights and variances must be positive"));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::param(format!("mixture weights sum to {total}")));
        }
        Ok(Self { shape: shape.to_vec(), components })
    }

    /// Responsibilities and per-component (score, variance) at step `i`.
    #[allow(clippy::type_complexity)]
    fn parts(&self, x: &[f64], i: usize, sched: &NoiseSchedule) -> (Vec<f64>, Vec<(Vec<f64>, Vec<f64>)>) {
        let ab = sched.alpha_bar(i);
        let a = ab.sqrt();
        let mut logs = Vec::with_capacity(self.components.len());
        let mut parts = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let m: Vec<f64> = c.mean.iter().map(|m| a * m).collect();
            let v: Vec<f64> = c.var.iter().map(|v| ab * v + (1.0 - ab)).collect();
            logs.push(c.weight.ln() + diag_log_normal(x, &m, &v));
            let s = x.iter().zip(m.iter().zip(&v)).map(|(x, (m, v))| -(x - m) / v).collect();
            parts.push((s, v));
        }
        let lse = log_sum_exp(&logs);
        let resp = logs.iter().map(|l| (l - lse).exp()).collect();
        (resp, parts)
    }

    pub fn log_density(&self, x: &SignalGrid, i: usize, sched: &NoiseSchedule) -> Result<f64> {
        check_shape(&self.shape, x)?;
        let ab = sched.alpha_bar(i);
        let a = ab.sqrt();
        let logs: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                let m: Vec<f64> = c.mean.iter().map(|m| a * m).collect();
                let v: Vec<f64> = c.var.iter().map(|v| ab * v + (1.0 - ab)).collect();
                c.weight.ln() + diag_log_normal(x.data(), &m, &v)
            })
            .collect();
        Ok(log_sum_exp(&logs))
    }

    pub fn score(&self, x: &SignalGrid, i: usize, sched: &NoiseSchedule) -> Result<SignalGrid> {
        check_shape(&self.shape, x)?;
        let (resp, parts) = self.parts(x.data(), i, sched);
        let mut out = vec![0.0; x.len()];
        for (r, (s, _)) in resp.iter().zip(&parts) {
            for (o, s) in out.iter_mut().zip(s) {
                *o += r * s;
            }
        }
        SignalGrid::new(x.shape(), out)
    }

    /// The Hessian of a mixture log-density is
    /// `sum_j r_j (s_j s_j^T - diag(1/v_j)) - sbar sbar^T`, which is symmetric,
    /// so the VJP equals the JVP.
    pub fn score_vjp(
        &self,
        x: &SignalGrid,
        i: usize,
        sched: &NoiseSchedule,
        cotangent: &SignalGrid,
    ) -> Result<SignalGrid> {
        check_shape(&self.shape, x)?;
        x.check_same_shape(cotangent, "score_vjp cotangent")?;
        let c = cotangent.data();
        let (resp, parts) = self.parts(x.data(), i, sched);
        let n = x.len();
        let mut sbar = vec![0.0; n];
        let mut out = vec![0.0; n];
        for (r, (s, v)) in resp.iter().zip(&parts) {
            let sc: f64 = s.iter().zip(c).map(|(a, b)| a * b).sum();
            for k in 0..n {
                sbar[k] += r * s[k];
                out[k] += r * (s[k] * sc - c[k] / v[k]);
            }
        }
        let sbc: f64 = sbar.iter().zip(c).map(|(a, b)| a * b).sum();
        for k in 0..n {
            out[k] -= sbar[k] * sbc;
        }
        SignalGrid::new(x.shape(), out)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SignalGrid {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (j, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                pick = j;
                break;
            }
        }
        let c = &self.components[pick];
        let data = c.mean.iter().zip(&c.var).map(|(m, v)| m + v.sqrt() * normal(rng)).collect();
        SignalGrid::new(&self.shape, data).expect("prior shape is consistent")
    }
}

fn check_shape(shape: &[usize], x: &SignalGrid) -> Result<()> {
    if x.shape() != shape {
        return Err(Error::shape(format!("model domain {shape:?}, input {:?}", x.shape())));
    }
    Ok(())
}

pub(crate) fn diag_log_normal(x: &[f64], m: &[f64], v: &[f64]) -> f64 {
    x.iter().zip(m.iter().zip(v)).map(|(x, (m, v))| -0.5 * (LN_2PI + v.ln() + (x - m) * (x - m) / v)).sum()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
