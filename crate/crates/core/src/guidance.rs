//! Tweedie denoising, the kernel constraint projection, sparsity
//! regularizers, and the measurement-guidance gradients that couple the
//! parallel reverse chains.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{
    convolve, convolve_adjoint, convolve_adjoint_kernel, tilt_warp, tilt_warp_adjoint, tilt_warp_vjp_field, Measurement,
};
use crate::grid::SignalGrid;
use crate::schedule::NoiseSchedule;
use crate::score::Score;

/// Residual norms below this are treated as an exact fit (zero gradient).
pub const RESIDUAL_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegKind {
    None,
    L1,
    L0,
}

/// How gradients pass through the kernel projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionGradient {
    /// The projection is treated as the identity.
    StraightThrough,
    /// Exact Jacobian of the projection away from its kinks.
    Exact,
}

/// Data-fidelity term differentiated for guidance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fidelity {
    /// `||y - A(x0)||`
    Norm,
    /// `||y - A(x0)||^2`
    SquaredNorm,
}

/// Affine map from a chain variable `u` to the physical quantity
/// `scale * u + offset`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineRepr {
    pub scale: f64,
    pub offset: f64,
}

impl AffineRepr {
    pub const IDENTITY: AffineRepr = AffineRepr { scale: 1.0, offset: 0.0 };

    /// Maps `[-1, 1]` onto `[0, peak]`.
    pub fn unit_range(peak: f64) -> Self {
        Self { scale: peak / 2.0, offset: peak / 2.0 }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    pub fn to_physical(&self, u: &SignalGrid) -> SignalGrid {
        if self.is_identity() {
            return u.clone();
        }
        u.map(|v| self.scale * v + self.offset)
    }

    pub fn to_chain(&self, k: &SignalGrid) -> SignalGrid {
        if self.is_identity() {
            return k.clone();
        }
        k.map(|v| (v - self.offset) / self.scale)
    }

    fn validate(&self) -> Result<()> {
        if !(self.scale != 0.0 && self.scale.is_finite() && self.offset.is_finite()) {
            return Err(Error::param(format!("invalid kernel representation {self:?}")));
        }
        Ok(())
    }
}

impl Default for AffineRepr {
    fn default() -> Self {
        Self::IDENTITY
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Image step size; also the kernel and tilt step size unless overridden.
    pub step_size: f64,
    pub kernel_step_size: Option<f64>,
    pub tilt_step_size: Option<f64>,
    pub reg_kind: RegKind,
    pub reg_weight: f64,
    /// Base of the hard threshold `l0_threshold * reg_weight`.
    pub l0_threshold: f64,
    pub project_kernel: bool,
    pub projection_gradient: ProjectionGradient,
    pub fidelity: Fidelity,
    /// Map from the kernel chain variable to kernel values.
    pub kernel_repr: AffineRepr,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            step_size: 0.3,
            kernel_step_size: None,
            tilt_step_size: None,
            reg_kind: RegKind::L1,
            reg_weight: 1.0,
            l0_threshold: 1e-3,
            project_kernel: true,
            projection_gradient: ProjectionGradient::StraightThrough,
            fidelity: Fidelity::Norm,
            kernel_repr: AffineRepr::IDENTITY,
        }
    }
}

impl GuidanceConfig {
    pub fn kernel_step(&self) -> f64 {
        self.kernel_step_size.unwrap_or(self.step_size)
    }

    pub fn tilt_step(&self) -> f64 {
        self.tilt_step_size.unwrap_or(self.step_size)
    }

    pub fn validate(&self) -> Result<()> {
        let steps = [self.step_size, self.kernel_step(), self.tilt_step()];
        if steps.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::param(format!("step sizes must be finite and >= 0, got {steps:?}")));
        }
        if !(self.reg_weight >= 0.0) || !self.reg_weight.is_finite() {
            return Err(Error::param(format!("regularization weight {} < 0", self.reg_weight)));
        }
        if !(self.l0_threshold > 0.0) {
            return Err(Error::param(format!("l0 threshold {} must be positive", self.l0_threshold)));
        }
        self.kernel_repr.validate()
    }
}

/// `(v + (1 - abar_i) s(v)) / sqrt(abar_i)`, the posterior mean of the clean
/// signal given the diffused state.
pub fn tweedie_denoise(model: &dyn Score, v: &SignalGrid, i: usize, sched: &NoiseSchedule) -> Result<SignalGrid> {
    let ab = sched.alpha_bar(i);
    if !(ab > 0.0) {
        return Err(Error::DegenerateStep { step: i, reason: "alpha_bar = 0".into() });
    }
    let s = model.score_eval(v, i, sched)?;
    let (c, inv) = (1.0 - ab, 1.0 / ab.sqrt());
    v.zip_map(&s, |v, s| (v + c * s) * inv)
}

/// Pulls a cotangent on the Tweedie estimate back to the diffused state.
pub fn tweedie_vjp(
    model: &dyn Score,
    v: &SignalGrid,
    i: usize,
    sched: &NoiseSchedule,
    cotangent: &SignalGrid,
) -> Result<SignalGrid> {
    let ab = sched.alpha_bar(i);
    let js = model.score_vjp(v, i, sched, cotangent)?;
    let (c, inv) = (1.0 - ab, 1.0 / ab.sqrt());
    cotangent.zip_map(&js, |g, j| (g + c * j) * inv)
}

/// Euclidean projection onto `{k : sum k = 1, k >= 0}` by sort and threshold.
///
/// Points already in the set, up to summation round-off, are returned
/// unchanged so that the projection is exactly idempotent.
pub fn project_simplex(k: &SignalGrid) -> Result<SignalGrid> {
    if k.is_empty() {
        return Err(Error::shape("cannot project an empty kernel"));
    }
    if !k.is_finite() {
        return Err(Error::NonFinite("kernel passed to the simplex projection".into()));
    }
    let tol = 4.0 * k.len() as f64 * f64::EPSILON;
    if k.data().iter().all(|v| *v >= 0.0) && (k.sum() - 1.0).abs() <= tol {
        return Ok(k.clone());
    }
    let mut u = k.data().to_vec();
    u.sort_unstable_by(|a, b| b.total_cmp(a));
    let (mut acc, mut theta) = (0.0, 0.0);
    for (j, uj) in u.iter().enumerate() {
        acc += uj;
        let t = (acc - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    Ok(k.map(|v| (v - theta).max(0.0)))
}

/// Applies the exact Jacobian of the projection at a point whose image is
/// `projected`: mean removal on the support, zero elsewhere.
pub fn projection_vjp(projected: &SignalGrid, g: &SignalGrid) -> Result<SignalGrid> {
    projected.check_same_shape(g, "projection_vjp")?;
    let support: Vec<bool> = projected.data().iter().map(|v| *v > 0.0).collect();
    let n = support.iter().filter(|s| **s).count().max(1);
    let mean = g.data().iter().zip(&support).filter(|(_, s)| **s).map(|(v, _)| v).sum::<f64>() / n as f64;
    let data = g.data().iter().zip(&support).map(|(v, s)| if *s { v - mean } else { 0.0 }).collect();
    SignalGrid::new(g.shape(), data)
}

/// Value and descent term of `lambda * R(k)`.
///
/// For `L0` the descent term is zero; sparsity is enforced by [`l0_prox`].
pub fn regularizer(kind: RegKind, k: &SignalGrid, lambda: f64, tau: f64) -> Result<(f64, SignalGrid)> {
    if !(lambda >= 0.0) {
        return Err(Error::param(format!("regularization weight {lambda} < 0")));
    }
    if lambda == 0.0 || kind == RegKind::None {
        return Ok((0.0, SignalGrid::zeros_like(k)));
    }
    Ok(match kind {
        RegKind::L1 => {
            let value = lambda * k.data().iter().map(|v| v.abs()).sum::<f64>();
            let term = k.map(|v| if v == 0.0 { 0.0 } else { lambda * v.signum() });
            (value, term)
        }
        RegKind::L0 => {
            let count = k.data().iter().filter(|v| v.abs() > tau).count();
            (lambda * count as f64, SignalGrid::zeros_like(k))
        }
        RegKind::None => unreachable!(),
    })
}

/// Hard threshold: zeroes entries with `|k_j| <= threshold`.
pub fn l0_prox(k: &SignalGrid, threshold: f64) -> SignalGrid {
    k.map(|v| if v.abs() <= threshold { 0.0 } else { v })
}

/// Rescales to unit sum when the mass is positive.
fn renormalize(k: SignalGrid) -> SignalGrid {
    let s = k.sum();
    if s > 0.0 {
        k.scale(1.0 / s)
    } else {
        k
    }
}

/// `k * T_phi(x)`, or `k * x` without a field.
pub fn forward_model(x: &SignalGrid, k: &SignalGrid, phi: Option<&SignalGrid>) -> Result<SignalGrid> {
    match phi {
        Some(phi) => convolve(&tilt_warp(x, phi)?, k),
        None => convolve(x, k),
    }
}

/// Unsquared measurement residual `||y - k * T_phi(x)||`.
pub fn residual(y: &Measurement, x0: &SignalGrid, k0: &SignalGrid, phi0: Option<&SignalGrid>) -> Result<f64> {
    let fit = forward_model(x0, k0, phi0)?;
    y.grid.check_same_shape(&fit, "residual")?;
    Ok(y.grid.sub(&fit)?.norm())
}

/// One guided variable.
#[derive(Clone, Copy)]
pub enum Operand<'a> {
    /// A reverse-diffusion state; the clean estimate comes from Tweedie.
    Diffused { model: &'a dyn Score, state: &'a SignalGrid },
    /// Used as its own clean estimate (a fixed or directly optimized value).
    Plain(&'a SignalGrid),
}

impl<'a> Operand<'a> {
    pub fn state(&self) -> &'a SignalGrid {
        match self {
            Operand::Diffused { state, .. } => state,
            Operand::Plain(s) => s,
        }
    }

    fn estimate(&self, i: usize, sched: &NoiseSchedule) -> Result<SignalGrid> {
        match self {
            Operand::Diffused { model, state } => tweedie_denoise(*model, state, i, sched),
            Operand::Plain(s) => Ok((*s).clone()),
        }
    }

    fn pull_back(&self, i: usize, sched: &NoiseSchedule, g: &SignalGrid) -> Result<SignalGrid> {
        match self {
            Operand::Diffused { model, state } => tweedie_vjp(*model, state, i, sched, g),
            Operand::Plain(_) => Ok(g.clone()),
        }
    }
}

/// Clean estimates and guidance gradients at one reverse step.
#[derive(Clone, Debug)]
pub struct Guided {
    pub x0: SignalGrid,
    /// Kernel estimate as used in the forward model (projected and
    /// thresholded as configured).
    pub k0: SignalGrid,
    /// `k0` mapped back to the kernel chain variable.
    pub k0_chain: SignalGrid,
    pub phi0: Option<SignalGrid>,
    pub residual: f64,
    pub reg_value: f64,
    /// Gradients with respect to the chain states.
    pub grad_x: SignalGrid,
    pub grad_k: SignalGrid,
    pub grad_phi: Option<SignalGrid>,
}

/// Clean estimates and gradients of the fidelity term (plus the kernel
/// regularizer for `grad_k`) with respect to each chain state.
///
/// The kernel representation map applies to a diffused kernel only.
pub fn guidance_gradients(
    y: &Measurement,
    x: Operand<'_>,
    k: Operand<'_>,
    phi: Option<Operand<'_>>,
    i: usize,
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
) -> Result<Guided> {
    let repr = match k {
        Operand::Diffused { .. } => cfg.kernel_repr,
        Operand::Plain(_) => AffineRepr::IDENTITY,
    };
    let ((x0, k_raw), phi0) = rayon::join(
        || rayon::join(|| x.estimate(i, sched), || k.estimate(i, sched)),
        || phi.map(|p| p.estimate(i, sched)).transpose(),
    );
    let (x0, k_raw, phi0) = (x0?, repr.to_physical(&k_raw?), phi0?);

    let mut k0 = if cfg.project_kernel { project_simplex(&k_raw)? } else { k_raw.clone() };
    if cfg.reg_kind == RegKind::L0 && cfg.reg_weight > 0.0 {
        k0 = l0_prox(&k0, cfg.l0_threshold * cfg.reg_weight);
        if cfg.project_kernel {
            k0 = renormalize(k0);
        }
    }
    let (reg_value, reg_term) = regularizer(cfg.reg_kind, &k0, cfg.reg_weight, cfg.l0_threshold)?;

    let warped = match &phi0 {
        Some(p) => Some(tilt_warp(&x0, p)?),
        None => None,
    };
    let src = warped.as_ref().unwrap_or(&x0);
    let fit = convolve(src, &k0)?;
    y.grid.check_same_shape(&fit, "measurement vs. forward model")?;
    let diff = y.grid.sub(&fit)?;
    let r = diff.norm();
    if !r.is_finite() {
        return Err(Error::Divergence { step: i, reason: "non-finite residual".into() });
    }

    // Cotangent on the forward-model output.
    let d_fit = if r < RESIDUAL_FLOOR {
        SignalGrid::zeros_like(&diff)
    } else {
        match cfg.fidelity {
            Fidelity::Norm => diff.scale(-1.0 / r),
            Fidelity::SquaredNorm => diff.scale(-2.0),
        }
    };

    let kshape = k0.shape().to_vec();
    let d_src = convolve_adjoint(&d_fit, &k0)?;
    let mut d_k0 = convolve_adjoint_kernel(&d_fit, src, &kshape)?;
    d_k0.axpy(1.0, &reg_term)?;
    let d_x0 = match &phi0 {
        Some(p) => tilt_warp_adjoint(&d_src, p)?,
        None => d_src.clone(),
    };
    let d_phi0 = match &phi0 {
        Some(p) => Some(tilt_warp_vjp_field(&x0, p, &d_src)?),
        None => None,
    };

    let mut d_kraw = if cfg.project_kernel && cfg.projection_gradient == ProjectionGradient::Exact {
        projection_vjp(&k0, &d_k0)?
    } else {
        d_k0
    };
    if !repr.is_identity() {
        d_kraw = d_kraw.scale(repr.scale);
    }

    let ((grad_x, grad_k), grad_phi) = rayon::join(
        || rayon::join(|| x.pull_back(i, sched, &d_x0), || k.pull_back(i, sched, &d_kraw)),
        || match (phi, &d_phi0) {
            (Some(p), Some(g)) => p.pull_back(i, sched, g).map(Some),
            _ => Ok(None),
        },
    );
    let (grad_x, grad_k, grad_phi) = (grad_x?, grad_k?, grad_phi?);
    let finite = grad_x.is_finite() && grad_k.is_finite() && grad_phi.as_ref().is_none_or(|g| g.is_finite());
    if !finite {
        return Err(Error::Divergence { step: i, reason: "non-finite guidance gradient".into() });
    }

    Ok(Guided { k0_chain: repr.to_chain(&k0), x0, k0, phi0, residual: r, reg_value, grad_x, grad_k, grad_phi })
}
