//! Reverse-diffusion engines: unconditional ancestral sampling, non-blind
//! DPS, blind deblurring with parallel image/kernel chains, the
//! three-chain turbulence variant, and a uniform-kernel-prior baseline.
//!
//! All variants share one engine. Chain noise comes from per-branch
//! streams: index 0 initializes a chain, index `i` drives reverse step `i`,
//! so results do not depend on evaluation order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{gen_gaussian_kernel, Measurement};
use crate::grid::SignalGrid;
use crate::guidance::{
    guidance_gradients, l0_prox, project_simplex, regularizer, tweedie_denoise, GuidanceConfig, Operand, RegKind,
};
use crate::metrics::mse;
use crate::rng::{normal_grid, Branch, Streams};
use crate::schedule::NoiseSchedule;
use crate::score::Score;

/// Number of snapshots kept along a run when no stride is given.
pub const DEFAULT_SNAPSHOTS: usize = 50;

/// DDPM ancestral update from `v_i` and a clean estimate `v0`.
///
/// `sigma_tilde_1 == 0` because `alpha_bar(0) == 1`, so the last step is
/// deterministic.
pub fn ancestral_step(
    v: &SignalGrid,
    v0: &SignalGrid,
    i: usize,
    sched: &NoiseSchedule,
    z: &SignalGrid,
) -> Result<SignalGrid> {
    if i == 0 {
        return Err(Error::param("ancestral step index must be >= 1"));
    }
    let (ab, ab_prev) = (sched.alpha_bar(i), sched.alpha_bar(i - 1));
    let denom = 1.0 - ab;
    let cv = sched.alpha(i).sqrt() * (1.0 - ab_prev) / denom;
    let c0 = ab_prev.sqrt() * sched.beta(i) / denom;
    let s = sched.post_std(i);
    let mut out = v.zip_map(v0, |a, b| cv * a + c0 * b)?;
    if s > 0.0 {
        out.axpy(s, z)?;
    }
    Ok(out)
}

fn noise(streams: &Streams, branch: Branch, i: usize, shape: &[usize]) -> SignalGrid {
    normal_grid(&mut streams.stream(branch, i as u64), shape)
}

/// Unguided reverse chain from `N(0, I)` on the given branch's streams.
pub fn sample_prior(model: &dyn Score, sched: &NoiseSchedule, streams: &Streams, branch: Branch) -> Result<SignalGrid> {
    let shape = model.domain().to_vec();
    let mut v = noise(streams, branch, 0, &shape);
    for i in (1..=sched.n_steps()).rev() {
        let v0 = tweedie_denoise(model, &v, i, sched)?;
        v = ancestral_step(&v, &v0, i, sched, &noise(streams, branch, i, &shape))?;
        if !v.is_finite() {
            return Err(Error::Divergence { step: i, reason: "non-finite prior chain state".into() });
        }
    }
    Ok(v)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub seed: u64,
    /// Snapshot spacing in steps; `None` keeps about [`DEFAULT_SNAPSHOTS`].
    pub snapshot_stride: Option<usize>,
    pub guidance: GuidanceConfig,
}

/// Settings of the uniform-kernel-prior baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UniformConfig {
    pub alpha_x: f64,
    pub alpha_k: f64,
    /// Weight of the l0 penalty (hard threshold `l0_threshold * lambda`).
    pub lambda: f64,
    pub l0_threshold: f64,
    /// Std of the Gaussian kernel the estimate starts from.
    pub sigma_init: f64,
    pub kernel_size: usize,
}

impl Default for UniformConfig {
    fn default() -> Self {
        Self { alpha_x: 0.3, alpha_k: 0.3, lambda: 5.0, l0_threshold: 1e-3, sigma_init: 1.0, kernel_size: 5 }
    }
}

/// Known signals, used only for logging estimation error.
#[derive(Clone, Debug, Default)]
pub struct GroundTruth {
    pub x: Option<SignalGrid>,
    pub k: Option<SignalGrid>,
    pub phi: Option<SignalGrid>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Dps,
    BlindDeblur,
    BlindTurbulence,
    UniformBaseline,
}

/// Per-step scalars.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub residual: f64,
    pub reg_value: f64,
    pub mse_x: Option<f64>,
    pub mse_k: Option<f64>,
    pub mse_phi: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    pub x0: SignalGrid,
    pub k0: SignalGrid,
    pub phi0: Option<SignalGrid>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// One entry per reverse step, from step `N` down to 1.
    pub trace: Vec<TraceStep>,
    pub snapshots: Vec<Snapshot>,
}

impl Trajectory {
    /// Step with the smallest kernel error, if logged.
    pub fn argmin_kernel_mse(&self) -> Option<usize> {
        self.trace
            .iter()
            .filter_map(|t| t.mse_k.map(|m| (t.step, m)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(s, _)| s)
    }

    pub fn final_residual(&self) -> Option<f64> {
        self.trace.last().map(|t| t.residual)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub method: Method,
    /// Image chain end state.
    pub x0: SignalGrid,
    /// Tweedie estimate of the image at the last step.
    pub x0_hat: SignalGrid,
    /// Kernel estimate at the last step, on the constraint set when
    /// projection is enabled.
    pub k0: SignalGrid,
    pub phi0: Option<SignalGrid>,
    pub trajectory: Trajectory,
    pub seed: u64,
    pub guidance: GuidanceConfig,
}

enum KernelChain<'a> {
    Diffusion(&'a dyn Score),
    Fixed(&'a SignalGrid),
    Uniform(&'a UniformConfig),
}

/// How the tilt field is handled in the turbulence model.
#[derive(Clone, Copy)]
pub enum TiltChain<'a> {
    Diffusion(&'a dyn Score),
    /// Held at the given field throughout.
    Fixed(&'a SignalGrid),
}

struct Engine<'a> {
    y: &'a Measurement,
    image: &'a dyn Score,
    kernel: KernelChain<'a>,
    tilt: Option<TiltChain<'a>>,
    sched: &'a NoiseSchedule,
    cfg: &'a SamplerConfig,
    truth: Option<&'a GroundTruth>,
    method: Method,
}

fn check_finite(g: &SignalGrid, what: &str, step: usize) -> Result<()> {
    if g.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { step, reason: format!("non-finite {what} state") })
    }
}

impl Engine<'_> {
    fn run(&self) -> Result<SolveResult> {
        let sched = self.sched;
        let n = sched.n_steps();
        let streams = Streams::new(self.cfg.seed);
        let x_shape = self.image.domain().to_vec();
        if self.y.grid.shape() != x_shape.as_slice() {
            return Err(Error::shape(format!(
                "measurement {:?} does not match image model domain {x_shape:?}",
                self.y.grid.shape()
            )));
        }
        let mut gcfg = self.cfg.guidance.clone();
        gcfg.validate()?;
        let (alpha_x, alpha_k) = match &self.kernel {
            KernelChain::Uniform(u) => (u.alpha_x, u.alpha_k),
            _ => (gcfg.step_size, gcfg.kernel_step()),
        };
        let alpha_t = gcfg.tilt_step();

        let mut x = noise(&streams, Branch::IMAGE, 0, &x_shape);
        let mut k = match &self.kernel {
            KernelChain::Diffusion(m) => noise(&streams, Branch::KERNEL, 0, m.domain()),
            KernelChain::Fixed(k) => (*k).clone(),
            KernelChain::Uniform(u) => {
                if !(u.alpha_x >= 0.0 && u.alpha_k >= 0.0 && u.lambda >= 0.0) {
                    return Err(Error::param("uniform baseline step sizes and lambda must be >= 0"));
                }
                gen_gaussian_kernel(u.sigma_init, u.kernel_size)?
            }
        };
        match &self.kernel {
            KernelChain::Fixed(_) => {
                gcfg.project_kernel = false;
                gcfg.reg_kind = RegKind::None;
            }
            KernelChain::Uniform(_) => {
                // The state is projected before use; l0 acts after the step.
                gcfg.project_kernel = false;
                gcfg.reg_kind = RegKind::None;
            }
            KernelChain::Diffusion(_) => {}
        }
        let mut phi = match self.tilt {
            Some(TiltChain::Diffusion(m)) => Some(noise(&streams, Branch::TILT, 0, m.domain())),
            Some(TiltChain::Fixed(p)) => Some(p.clone()),
            None => None,
        };

        let stride = self.cfg.snapshot_stride.unwrap_or(n.div_ceil(DEFAULT_SNAPSHOTS)).max(1);
        let mut traj = Trajectory::default();
        let mut last = None;

        for i in (1..=n).rev() {
            if let KernelChain::Uniform(_) = self.kernel {
                k = project_simplex(&k)?;
            }
            let x_op = Operand::Diffused { model: self.image, state: &x };
            let k_op = match &self.kernel {
                KernelChain::Diffusion(m) => Operand::Diffused { model: *m, state: &k },
                _ => Operand::Plain(&k),
            };
            let phi_op = match (self.tilt, &phi) {
                (Some(TiltChain::Diffusion(m)), Some(p)) => Some(Operand::Diffused { model: m, state: p }),
                (Some(TiltChain::Fixed(_)), Some(p)) => Some(Operand::Plain(p)),
                _ => None,
            };
            let g = guidance_gradients(self.y, x_op, k_op, phi_op, i, sched, &gcfg)?;

            let mut reg_value = g.reg_value;
            let mut x_next = ancestral_step(&x, &g.x0, i, sched, &noise(&streams, Branch::IMAGE, i, &x_shape))?;
            x_next.axpy(-alpha_x, &g.grad_x)?;
            let k_next = match &self.kernel {
                KernelChain::Diffusion(_) => {
                    let z = noise(&streams, Branch::KERNEL, i, k.shape());
                    let mut kn = ancestral_step(&k, &g.k0_chain, i, sched, &z)?;
                    kn.axpy(-alpha_k, &g.grad_k)?;
                    kn
                }
                KernelChain::Fixed(_) => k.clone(),
                KernelChain::Uniform(u) => {
                    let mut kn = k.clone();
                    kn.axpy(-alpha_k, &g.grad_k)?;
                    if u.lambda > 0.0 {
                        reg_value = regularizer(RegKind::L0, &k, u.lambda, u.l0_threshold)?.0;
                        kn = l0_prox(&kn, u.l0_threshold * u.lambda);
                    }
                    kn
                }
            };
            let phi_next = match (self.tilt, &phi, &g.grad_phi, &g.phi0) {
                (Some(TiltChain::Diffusion(_)), Some(p), Some(gp), Some(p0)) => {
                    let z = noise(&streams, Branch::TILT, i, p.shape());
                    let mut pn = ancestral_step(p, p0, i, sched, &z)?;
                    pn.axpy(-alpha_t, gp)?;
                    Some(pn)
                }
                (Some(TiltChain::Fixed(_)), Some(p), _, _) => Some(p.clone()),
                _ => None,
            };

            check_finite(&x_next, "image", i)?;
            check_finite(&k_next, "kernel", i)?;
            if let Some(p) = &phi_next {
                check_finite(p, "tilt", i)?;
            }

            let truth = self.truth;
            let err = |est: &SignalGrid, t: Option<&SignalGrid>| t.and_then(|t| mse(est, t).ok());
            traj.trace.push(TraceStep {
                step: i,
                residual: g.residual,
                reg_value,
                mse_x: err(&g.x0, truth.and_then(|t| t.x.as_ref())),
                mse_k: err(&g.k0, truth.and_then(|t| t.k.as_ref())),
                mse_phi: g.phi0.as_ref().and_then(|p| err(p, truth.and_then(|t| t.phi.as_ref()))),
            });
            if i % stride == 0 || i == 1 {
                traj.snapshots.push(Snapshot { step: i, x0: g.x0.clone(), k0: g.k0.clone(), phi0: g.phi0.clone() });
            }

            x = x_next;
            k = k_next;
            phi = phi_next;
            last = Some(g);
        }

        let g = last.expect("schedule has at least one step");
        let k0 = match &self.kernel {
            KernelChain::Uniform(_) => project_simplex(&k)?,
            _ => g.k0,
        };
        Ok(SolveResult {
            method: self.method,
            x0: x,
            x0_hat: g.x0,
            k0,
            phi0: g.phi0,
            trajectory: traj,
            seed: self.cfg.seed,
            guidance: self.cfg.guidance.clone(),
        })
    }
}

/// Posterior sampling with a known kernel.
pub fn dps_nonblind(
    y: &Measurement,
    k: &SignalGrid,
    image: &dyn Score,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    truth: Option<&GroundTruth>,
) -> Result<SolveResult> {
    Engine { y, image, kernel: KernelChain::Fixed(k), tilt: None, sched, cfg, truth, method: Method::Dps }.run()
}

/// Joint image and kernel estimation with parallel guided reverse chains.
pub fn blind_dps_deblur(
    y: &Measurement,
    image: &dyn Score,
    kernel: &dyn Score,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    truth: Option<&GroundTruth>,
) -> Result<SolveResult> {
    Engine {
        y,
        image,
        kernel: KernelChain::Diffusion(kernel),
        tilt: None,
        sched,
        cfg,
        truth,
        method: Method::BlindDeblur,
    }
    .run()
}

/// Image, kernel and tilt-field chains for `y = k * T_phi(x) + n`.
pub fn blind_dps_turbulence(
    y: &Measurement,
    image: &dyn Score,
    kernel: &dyn Score,
    tilt: TiltChain<'_>,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    truth: Option<&GroundTruth>,
) -> Result<SolveResult> {
    if let TiltChain::Fixed(p) = tilt {
        let (h, w, _) = y.grid.dims()?;
        if p.shape() != [h, w, 2] {
            return Err(Error::shape(format!("tilt field {:?} does not match measurement", p.shape())));
        }
    }
    Engine {
        y,
        image,
        kernel: KernelChain::Diffusion(kernel),
        tilt: Some(tilt),
        sched,
        cfg,
        truth,
        method: Method::BlindTurbulence,
    }
    .run()
}

/// Image chain with DPS guidance; the kernel has no prior and is updated
/// by projected gradient steps with an l0 hard threshold.
///
/// Only `cfg.seed`, `cfg.snapshot_stride` and the fidelity choice in
/// `cfg.guidance` are used; step sizes come from `uniform`.
pub fn uniform_prior_baseline(
    y: &Measurement,
    image: &dyn Score,
    sched: &NoiseSchedule,
    uniform: &UniformConfig,
    cfg: &SamplerConfig,
    truth: Option<&GroundTruth>,
) -> Result<SolveResult> {
    Engine {
        y,
        image,
        kernel: KernelChain::Uniform(uniform),
        tilt: None,
        sched,
        cfg,
        truth,
        method: Method::UniformBaseline,
    }
    .run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::convolve;
    use crate::score::{GaussianPrior, ScoreModel};

    #[test]
    fn ancestral_coefficients_match_direct_formula() {
        let sched = NoiseSchedule::linear(20, 1e-3, 0.1).unwrap();
        let v = SignalGrid::from_vec(vec![1.0]);
        let zero = SignalGrid::from_vec(vec![0.0]);
        for i in 1..=20 {
            let ab = sched.alpha_bar(i);
            let abp = if i == 1 { 1.0 } else { sched.alpha_bar(i - 1) };
            let b = sched.beta(i);
            let cv = (1.0 - b).sqrt() * (1.0 - abp) / (1.0 - ab);
            let c0 = abp.sqrt() * b / (1.0 - ab);
            let a = ancestral_step(&v, &zero, i, &sched, &zero).unwrap().data()[0];
            let c = ancestral_step(&zero, &v, i, &sched, &zero).unwrap().data()[0];
            assert!((a - cv).abs() < 1e-14 && (c - c0).abs() < 1e-14);
            let sum = ((1.0 - b).sqrt() * (1.0 - abp) + abp.sqrt() * b) / (1.0 - ab);
            assert!((a + c - sum).abs() < 1e-14);
        }
        // Final step returns the clean estimate exactly.
        let out = ancestral_step(&SignalGrid::from_vec(vec![3.0]), &v, 1, &sched, &v).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-15);
        assert!(ancestral_step(&v, &v, 0, &sched, &v).is_err());
        assert_eq!(ancestral_step(&zero, &zero, 5, &sched, &zero).unwrap().data(), &[0.0]);
    }

    #[test]
    fn prior_sampling_is_deterministic() {
        let sched = NoiseSchedule::linear(30, 1e-3, 0.2).unwrap();
        let m = ScoreModel::from(GaussianPrior::standard(&[3, 3]));
        let a = sample_prior(&m, &sched, &Streams::new(4), Branch::IMAGE).unwrap();
        let b = sample_prior(&m, &sched, &Streams::new(4), Branch::IMAGE).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unguided_blind_run_reduces_to_prior_samples() {
        let sched = NoiseSchedule::linear(25, 1e-3, 0.2).unwrap();
        let img = ScoreModel::from(GaussianPrior::standard(&[4, 4]));
        let ker = ScoreModel::from(GaussianPrior::new(&[3, 3], vec![0.1; 9], vec![0.5; 9]).unwrap());
        let y = Measurement { grid: SignalGrid::filled(&[4, 4], 0.3), noise_std: 0.0 };
        let cfg = SamplerConfig {
            seed: 11,
            snapshot_stride: None,
            guidance: GuidanceConfig { step_size: 0.0, reg_weight: 0.0, project_kernel: false, ..Default::default() },
        };
        let res = blind_dps_deblur(&y, &img, &ker, &sched, &cfg, None).unwrap();
        let s = Streams::new(11);
        assert_eq!(res.x0, sample_prior(&img, &sched, &s, Branch::IMAGE).unwrap());
        assert_eq!(res.trajectory.trace.len(), 25);
        // The last kernel estimate feeds the deterministic final step.
        let k_prior = sample_prior(&ker, &sched, &s, Branch::KERNEL).unwrap();
        let last = res.trajectory.snapshots.last().unwrap();
        assert_eq!(last.step, 1);
        for (a, b) in last.k0.data().iter().zip(k_prior.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fixed_kernel_blind_engine_equals_nonblind() {
        let sched = NoiseSchedule::linear(20, 1e-3, 0.2).unwrap();
        let img = ScoreModel::from(GaussianPrior::standard(&[5, 5]));
        let k = gen_gaussian_kernel(0.7, 3).unwrap();
        let x = SignalGrid::new(&[5, 5], (0..25).map(|v| (v as f64 * 0.4).sin()).collect()).unwrap();
        let y = Measurement { grid: convolve(&x, &k).unwrap(), noise_std: 0.0 };
        let cfg = SamplerConfig { seed: 3, ..Default::default() };
        let a = dps_nonblind(&y, &k, &img, &sched, &cfg, None).unwrap();
        let b = dps_nonblind(&y, &k, &img, &sched, &cfg, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.k0, k);
    }

    #[test]
    fn uniform_baseline_without_kernel_step_keeps_initialization() {
        let sched = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let img = ScoreModel::from(GaussianPrior::standard(&[6, 6]));
        let y = Measurement { grid: SignalGrid::filled(&[6, 6], 0.1), noise_std: 0.0 };
        let u = UniformConfig { alpha_k: 0.0, lambda: 0.0, sigma_init: 1.2, kernel_size: 3, ..Default::default() };
        let res = uniform_prior_baseline(&y, &img, &sched, &u, &SamplerConfig::default(), None).unwrap();
        let init = project_simplex(&gen_gaussian_kernel(1.2, 3).unwrap()).unwrap();
        for (a, b) in res.k0.data().iter().zip(init.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn divergence_reports_the_step() {
        let sched = NoiseSchedule::linear(10, 1e-3, 0.2).unwrap();
        let img = ScoreModel::from(GaussianPrior::standard(&[4, 4]));
        let k = gen_gaussian_kernel(0.7, 3).unwrap();
        let y = Measurement { grid: SignalGrid::filled(&[4, 4], 1e300), noise_std: 0.0 };
        let cfg = SamplerConfig {
            guidance: GuidanceConfig {
                fidelity: crate::guidance::Fidelity::SquaredNorm,
                step_size: 1e10,
                ..Default::default()
            },
            ..Default::default()
        };
        match dps_nonblind(&y, &k, &img, &sched, &cfg, None) {
            Err(Error::Divergence { step, .. }) => assert!((1..=10).contains(&step)),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn zero_fixed_tilt_matches_blind_deblur_bitwise() {
        let sched = NoiseSchedule::linear(30, 1e-3, 0.2).unwrap();
        let img = ScoreModel::from(GaussianPrior::standard(&[6, 6]));
        let ker = ScoreModel::from(GaussianPrior::new(&[3, 3], vec![1.0 / 9.0; 9], vec![0.05; 9]).unwrap());
        let y = Measurement {
            grid: crate::rng::normal_grid(&mut Streams::new(9).stream(Branch::PROBE, 0), &[6, 6]),
            noise_std: 0.1,
        };
        let zero = SignalGrid::zeros(&[6, 6, 2]);
        for seed in 0..3 {
            let cfg = SamplerConfig { seed, ..Default::default() };
            let a = blind_dps_deblur(&y, &img, &ker, &sched, &cfg, None).unwrap();
            let b = blind_dps_turbulence(&y, &img, &ker, TiltChain::Fixed(&zero), &sched, &cfg, None).unwrap();
            assert_eq!(a.x0, b.x0);
            assert_eq!(a.k0, b.k0);
            assert_eq!(b.phi0.as_ref(), Some(&zero));
        }
    }

    fn delta() -> SignalGrid {
        SignalGrid::new(&[1, 1], vec![1.0]).unwrap()
    }

    #[test]
    fn noiseless_delta_kernel_run_fits_the_data() {
        let sched = NoiseSchedule::linear(200, 5e-4, 0.1).unwrap();
        let img = ScoreModel::from(GaussianPrior::standard(&[8, 8]));
        for seed in 0..5 {
            let x = crate::rng::normal_grid(&mut Streams::new(seed).stream(Branch::GENERATOR, 0), &[8, 8]);
            let y = Measurement { grid: x, noise_std: 0.0 };
            let cfg = SamplerConfig { seed, ..Default::default() };
            let res = dps_nonblind(&y, &delta(), &img, &sched, &cfg, None).unwrap();
            let r = res.trajectory.final_residual().unwrap();
            assert!(r <= 0.05 * y.grid.norm(), "seed {seed}: residual {r} vs |y| {}", y.grid.norm());
        }
    }

    #[test]
    fn conjugate_trajectory_approaches_posterior_mean() {
        // Standard normal prior, identity blur, noise std s: the posterior
        // mean is y / (1 + s^2).
        let sched = NoiseSchedule::linear(200, 5e-4, 0.1).unwrap();
        let img = ScoreModel::from(GaussianPrior::standard(&[4, 4]));
        let s = 0.5;
        let mut hits = 0;
        for seed in 0..20 {
            let st = Streams::new(seed);
            let x = crate::rng::normal_grid(&mut st.stream(Branch::GENERATOR, 0), &[4, 4]);
            let y = crate::forward::degrade(&x, &delta(), None, s, &mut st.stream(Branch::MEASUREMENT, 0)).unwrap();
            let post = y.grid.scale(1.0 / (1.0 + s * s));
            let cfg = SamplerConfig { seed, snapshot_stride: Some(1), ..Default::default() };
            let res = dps_nonblind(&y, &delta(), &img, &sched, &cfg, None).unwrap();
            let snaps = &res.trajectory.snapshots;
            let first = crate::metrics::mse(&snaps.first().unwrap().x0, &post).unwrap();
            let last = crate::metrics::mse(&snaps.last().unwrap().x0, &post).unwrap();
            hits += usize::from(last < first);
        }
        assert!(hits >= 18, "{hits}/20");
    }
}
