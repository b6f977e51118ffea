//! Discrete variance-preserving (DDPM) noise schedule.
//!
//! Steps are indexed `1..=N`; `alpha_bar(0) == 1` by convention so the
//! ancestral coefficients at the last reverse step need no special casing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::SignalGrid;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    post_vars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_min` to `beta_max`.
    pub fn linear(n_steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::param("schedule needs at least one step"));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::param(format!("need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")));
        }
        let betas = if n_steps == 1 {
            vec![beta_min]
        } else {
            let span = (beta_max - beta_min) / (n_steps - 1) as f64;
            (0..n_steps).map(|j| beta_min + span * j as f64).collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::param("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::param(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        let post_vars =
            betas.iter().enumerate().map(|(j, b)| b * (1.0 - alpha_bars[j]) / (1.0 - alpha_bars[j + 1])).collect();
        Ok(Self { betas, alpha_bars, post_vars })
    }

    pub fn n_steps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, i: usize) {
        assert!((1..=self.n_steps()).contains(&i), "step {i} outside 1..={}", self.n_steps());
    }

    pub fn beta(&self, i: usize) -> f64 {
        self.check(i);
        self.betas[i - 1]
    }

    pub fn alpha(&self, i: usize) -> f64 {
        1.0 - self.beta(i)
    }

    /// Cumulative product of alphas; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, i: usize) -> f64 {
        assert!(i <= self.n_steps(), "step {i} outside 0..={}", self.n_steps());
        self.alpha_bars[i]
    }

    /// Ancestral posterior variance `beta_i (1 - abar_{i-1}) / (1 - abar_i)`.
    pub fn post_var(&self, i: usize) -> f64 {
        self.check(i);
        self.post_vars[i - 1]
    }

    pub fn post_std(&self, i: usize) -> f64 {
        self.post_var(i).sqrt()
    }

    /// Continuous time `i / N` used only for reporting.
    pub fn time(&self, i: usize) -> f64 {
        i as f64 / self.n_steps() as f64
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX).expect("default schedule is valid")
    }
}

/// Forward noising `sqrt(abar_i) x0 + sqrt(1 - abar_i) z`.
pub fn diffuse(x0: &SignalGrid, i: usize, z: &SignalGrid, sched: &NoiseSchedule) -> Result<SignalGrid> {
    let ab = sched.alpha_bar(i);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(z, |x, n| a * x + b * n)
}

/// Exact score of `p(x_i | x0)`, the denoising score matching target.
pub fn true_conditional_score(
    x_i: &SignalGrid,
    x0: &SignalGrid,
    i: usize,
    sched: &NoiseSchedule,
) -> Result<SignalGrid> {
    let ab = sched.alpha_bar(i);
    let var = 1.0 - ab;
    if var <= 0.0 {
        return Err(Error::DegenerateStep { step: i, reason: "alpha_bar = 1 leaves no noise".into() });
    }
    let a = ab.sqrt();
    x_i.zip_map(x0, |x, m| -(x - a * m) / var)
}
