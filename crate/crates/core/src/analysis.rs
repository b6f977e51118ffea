//! Linear-Gaussian toy problems: exact posteriors, the Jensen gap of the
//! factorized likelihood and its closed-form upper bound, and Lipschitz
//! constants of the Gaussian density.
//!
//! Convolutions are circular and centered exactly as in [`crate::forward`],
//! so the dense matrices here and the FFT operators agree entrywise.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::kernel_center;
use crate::grid::SignalGrid;
use crate::rng::normal;
use crate::schedule::NoiseSchedule;
use crate::score::{GaussianPrior, ScoreModel};

/// Dense `hw × hw` matrix of `x -> k * x` on an `h × w` grid.
pub fn kernel_operator(k: &SignalGrid, h: usize, w: usize) -> Result<DMatrix<f64>> {
    let (kh, kw, kc) = k.dims()?;
    if kc != 1 || kh > h || kw > w {
        return Err(Error::shape(format!("kernel {:?} on a {h}x{w} grid", k.shape())));
    }
    let (cr, cc) = kernel_center(kh, kw);
    let mut m = DMatrix::zeros(h * w, h * w);
    for pr in 0..h {
        for pc in 0..w {
            for r in 0..kh {
                for c in 0..kw {
                    let sr = (pr + h + cr - r) % h;
                    let sc = (pc + w + cc - c) % w;
                    m[(pr * w + pc, sr * w + sc)] += k.data()[r * kw + c];
                }
            }
        }
    }
    Ok(m)
}

/// Dense `hw × (kh kw)` matrix of `k -> k * x` for a fixed `h × w` image.
pub fn image_operator(x: &SignalGrid, kh: usize, kw: usize) -> Result<DMatrix<f64>> {
    let (h, w, c) = x.dims()?;
    if c != 1 || kh > h || kw > w || kh == 0 || kw == 0 {
        return Err(Error::shape(format!("{kh}x{kw} kernel on image {:?}", x.shape())));
    }
    let (cr, cc) = kernel_center(kh, kw);
    let mut m = DMatrix::zeros(h * w, kh * kw);
    for pr in 0..h {
        for pc in 0..w {
            for r in 0..kh {
                for c in 0..kw {
                    let sr = (pr + h + cr - r) % h;
                    let sc = (pc + w + cc - c) % w;
                    m[(pr * w + pc, r * kw + c)] = x.data()[sr * w + sc];
                }
            }
        }
    }
    Ok(m)
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().iter().copied().fold(0.0, f64::max)
}

/// Conjugate posterior of `x ~ N(mu, diag(var))` given `y = A x + N(0, sigma^2 I)`.
pub fn exact_posterior_gaussian(
    y: &[f64],
    prior: &GaussianPrior,
    a: &DMatrix<f64>,
    sigma: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = prior.mean.len();
    if a.ncols() != n || a.nrows() != y.len() {
        return Err(Error::shape(format!(
            "operator {}x{} with {} unknowns and {} measurements",
            a.nrows(),
            a.ncols(),
            n,
            y.len()
        )));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::param(format!("noise std must be positive, got {sigma}")));
    }
    let s2 = sigma * sigma;
    let mut precision = a.transpose() * a / s2;
    for j in 0..n {
        precision[(j, j)] += 1.0 / prior.var[j];
    }
    let rhs =
        DVector::from_fn(n, |j, _| prior.mean[j] / prior.var[j]) + a.transpose() * DVector::from_column_slice(y) / s2;
    let chol =
        precision.cholesky().ok_or_else(|| Error::Singular("posterior precision is not positive definite".into()))?;
    Ok((chol.solve(&rhs), chol.inverse()))
}

/// Lipschitz constant of the isotropic Gaussian density in `d` dimensions
/// as stated by the appendix lemma: `d / sqrt(2 pi sigma^2) exp(-1 / (2 sigma^2))`.
pub fn lipschitz_constant(d: usize, sigma: f64) -> Result<f64> {
    check_lipschitz_args(d, sigma)?;
    let s2 = sigma * sigma;
    Ok(d as f64 / (2.0 * std::f64::consts::PI * s2).sqrt() * (-0.5 / s2).exp())
}

/// Supremum of the gradient norm of the same density,
/// `(2 pi sigma^2)^(-d/2) e^(-1/2) / sigma`, attained at radius `sigma`.
pub fn lipschitz_constant_exact(d: usize, sigma: f64) -> Result<f64> {
    check_lipschitz_args(d, sigma)?;
    let s2 = sigma * sigma;
    Ok((2.0 * std::f64::consts::PI * s2).powf(-(d as f64) / 2.0) * (-0.5f64).exp() / sigma)
}

fn check_lipschitz_args(d: usize, sigma: f64) -> Result<()> {
    if d == 0 {
        return Err(Error::param("dimension must be at least 1"));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::param(format!("sigma must be positive, got {sigma}")));
    }
    Ok(())
}

/// Density of `N(center, sigma^2 I)` at `u`.
pub fn gaussian_density(u: &[f64], center: &[f64], sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    let r2: f64 = u.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
    (2.0 * std::f64::consts::PI * s2).powf(-(u.len() as f64) / 2.0) * (-r2 / (2.0 * s2)).exp()
}

/// Blind linear-Gaussian toy: `y = k * x + N(0, sigma^2 I)` with independent
/// diagonal Gaussian priors on the image and the kernel coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyProblem {
    pub image_prior: GaussianPrior,
    pub kernel_prior: GaussianPrior,
    pub sigma: f64,
    pub y: Vec<f64>,
}

/// Exact reverse conditional `p(x_0 | x_i)` of a diagonal Gaussian prior,
/// returned as per-coordinate mean and variance. At `i = 0` it is the point
/// mass at `x_i`.
pub fn reverse_conditional(
    prior: &GaussianPrior,
    x_i: &[f64],
    i: usize,
    sched: &NoiseSchedule,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if x_i.len() != prior.mean.len() {
        return Err(Error::shape("state does not match prior"));
    }
    let ab = sched.alpha_bar(i);
    if ab >= 1.0 {
        return Ok((x_i.to_vec(), vec![0.0; x_i.len()]));
    }
    let a = ab.sqrt();
    let nv = 1.0 - ab;
    let mut mean = Vec::with_capacity(x_i.len());
    let mut var = Vec::with_capacity(x_i.len());
    for ((m, v), x) in prior.mean.iter().zip(&prior.var).zip(x_i) {
        let precision = 1.0 / v + ab / nv;
        mean.push((m / v + a * x / nv) / precision);
        var.push(1.0 / precision);
    }
    Ok((mean, var))
}

/// The diagonal Gaussian inside `model`, or a capability error.
pub fn require_gaussian(model: &ScoreModel) -> Result<&GaussianPrior> {
    match model {
        ScoreModel::Gaussian(g) => Ok(g),
        _ => Err(Error::Capability("exact reverse conditionals need a diagonal Gaussian prior".into())),
    }
}

impl ToyProblem {
    /// Accepts any score model and rejects non-Gaussian ones.
    pub fn from_models(image: &ScoreModel, kernel: &ScoreModel, sigma: f64, y: Vec<f64>) -> Result<Self> {
        let p = Self {
            image_prior: require_gaussian(image)?.clone(),
            kernel_prior: require_gaussian(kernel)?.clone(),
            sigma,
            y,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_hw()?;
        let (kh, kw) = self.kernel_hw()?;
        if kh > h || kw > w {
            return Err(Error::shape("kernel larger than image"));
        }
        if self.y.len() != h * w {
            return Err(Error::shape(format!("measurement has {} entries, image {}", self.y.len(), h * w)));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::param(format!("noise std must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    fn image_hw(&self) -> Result<(usize, usize)> {
        let s = &self.image_prior.shape;
        match s.as_slice() {
            [h, w] => Ok((*h, *w)),
            _ => Err(Error::shape(format!("toy images are 2-D, got {s:?}"))),
        }
    }

    fn kernel_hw(&self) -> Result<(usize, usize)> {
        let s = &self.kernel_prior.shape;
        match s.as_slice() {
            [h, w] => Ok((*h, *w)),
            _ => Err(Error::shape(format!("toy kernels are 2-D, got {s:?}"))),
        }
    }

    /// Measurement dimension `d`.
    pub fn dim(&self) -> usize {
        self.y.len()
    }

    /// Random instance: prior means `N(0, 1)`, variances `U(0.2, 1.5)`, a
    /// ground truth drawn from the priors and a measurement at noise `sigma`.
    pub fn random<R: Rng + ?Sized>(
        image_hw: (usize, usize),
        kernel_hw: (usize, usize),
        sigma: f64,
        rng: &mut R,
    ) -> Result<(Self, SignalGrid, SignalGrid)> {
        let mut prior = |shape: &[usize]| {
            let n = shape.iter().product::<usize>();
            let mean = (0..n).map(|_| normal(rng)).collect();
            let var = (0..n).map(|_| rng.random_range(0.2..1.5)).collect();
            GaussianPrior::new(shape, mean, var)
        };
        let image_prior = prior(&[image_hw.0, image_hw.1])?;
        let kernel_prior = prior(&[kernel_hw.0, kernel_hw.1])?;
        let x = image_prior.sample(rng);
        let k = kernel_prior.sample(rng);
        let clean = kernel_operator(&k, image_hw.0, image_hw.1)? * DVector::from_column_slice(x.data());
        let y = clean.iter().map(|v| v + sigma * normal(rng)).collect();
        let p = Self { image_prior, kernel_prior, sigma, y };
        p.validate()?;
        Ok((p, x, k))
    }

    /// `h(k * x)`: the Gaussian likelihood of `y` at the predicted measurement.
    pub fn likelihood(&self, x: &SignalGrid, k: &SignalGrid) -> Result<f64> {
        let (h, w) = self.image_hw()?;
        let pred = kernel_operator(k, h, w)? * DVector::from_column_slice(x.data());
        Ok(gaussian_density(pred.as_slice(), &self.y, self.sigma))
    }

    /// Same problem at a different noise level, keeping the measurement.
    pub fn with_sigma(&self, sigma: f64) -> Result<Self> {
        let p = Self { sigma, ..self.clone() };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    pub gap: f64,
    /// Standard error of the Monte Carlo mean of the likelihood.
    pub se: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapBound {
    pub bound: f64,
    pub lipschitz: f64,
    pub m1_x: f64,
    pub m1_k: f64,
    /// `max(E|K_0|, |E K_0|)` in spectral norm.
    pub norm_k: f64,
    /// `max(E|X_0|, |E X_0|)` in spectral norm.
    pub norm_x: f64,
    pub norm_k_expected: f64,
    pub norm_k_of_mean: f64,
    pub norm_x_expected: f64,
    pub norm_x_of_mean: f64,
    /// The same bound with [`lipschitz_constant_exact`].
    pub bound_exact_lipschitz: f64,
}

struct Conditionals {
    x_mean: Vec<f64>,
    x_std: Vec<f64>,
    k_mean: Vec<f64>,
    k_std: Vec<f64>,
}

impl Conditionals {
    fn new(prob: &ToyProblem, x_i: &SignalGrid, k_i: &SignalGrid, i: usize, sched: &NoiseSchedule) -> Result<Self> {
        if x_i.shape() != prob.image_prior.shape.as_slice() || k_i.shape() != prob.kernel_prior.shape.as_slice() {
            return Err(Error::shape("chain states do not match the toy priors"));
        }
        let (x_mean, xv) = reverse_conditional(&prob.image_prior, x_i.data(), i, sched)?;
        let (k_mean, kv) = reverse_conditional(&prob.kernel_prior, k_i.data(), i, sched)?;
        Ok(Self {
            x_mean,
            x_std: xv.iter().map(|v| v.sqrt()).collect(),
            k_mean,
            k_std: kv.iter().map(|v| v.sqrt()).collect(),
        })
    }

    fn draw<R: Rng + ?Sized>(mean: &[f64], std: &[f64], shape: &[usize], rng: &mut R) -> SignalGrid {
        let data = mean.iter().zip(std).map(|(m, s)| m + s * normal(rng)).collect();
        SignalGrid::new(shape, data).expect("conditional matches prior shape")
    }
}

fn check_mc(n_mc: usize) -> Result<()> {
    if n_mc < 2 {
        return Err(Error::param("Monte Carlo needs at least two draws"));
    }
    Ok(())
}

/// `|E h(k_0 * x_0) - h(E k_0 * E x_0)|` over the exact reverse conditionals,
/// estimated from `n_mc` independent draws.
pub fn jensen_gap_empirical<R: Rng + ?Sized>(
    prob: &ToyProblem,
    x_i: &SignalGrid,
    k_i: &SignalGrid,
    i: usize,
    sched: &NoiseSchedule,
    n_mc: usize,
    rng: &mut R,
) -> Result<GapEstimate> {
    check_mc(n_mc)?;
    let c = Conditionals::new(prob, x_i, k_i, i, sched)?;
    let xs = &prob.image_prior.shape;
    let ks = &prob.kernel_prior.shape;
    let mut values = Vec::with_capacity(n_mc);
    for _ in 0..n_mc {
        let x = Conditionals::draw(&c.x_mean, &c.x_std, xs, rng);
        let k = Conditionals::draw(&c.k_mean, &c.k_std, ks, rng);
        values.push(prob.likelihood(&x, &k)?);
    }
    let n = n_mc as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let at_mean = prob.likelihood(&SignalGrid::new(xs, c.x_mean.clone())?, &SignalGrid::new(ks, c.k_mean.clone())?)?;
    Ok(GapEstimate { gap: (mean - at_mean).abs(), se: (var / n).sqrt() })
}

/// `L (|K_0| m1_x + |X_0| m1_k)` with first absolute centered moments and
/// operator norms estimated from `n_mc` draws of the exact conditionals.
pub fn jensen_gap_bound<R: Rng + ?Sized>(
    prob: &ToyProblem,
    x_i: &SignalGrid,
    k_i: &SignalGrid,
    i: usize,
    sched: &NoiseSchedule,
    n_mc: usize,
    rng: &mut R,
) -> Result<GapBound> {
    check_mc(n_mc)?;
    let c = Conditionals::new(prob, x_i, k_i, i, sched)?;
    let (h, w) = prob.image_hw()?;
    let (kh, kw) = prob.kernel_hw()?;
    let xs = &prob.image_prior.shape;
    let ks = &prob.kernel_prior.shape;
    let (mut m1_x, mut m1_k, mut nk, mut nx) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..n_mc {
        let x = Conditionals::draw(&c.x_mean, &c.x_std, xs, rng);
        let k = Conditionals::draw(&c.k_mean, &c.k_std, ks, rng);
        m1_x += dist(x.data(), &c.x_mean);
        m1_k += dist(k.data(), &c.k_mean);
        nk += spectral_norm(&kernel_operator(&k, h, w)?);
        nx += spectral_norm(&image_operator(&x, kh, kw)?);
    }
    let n = n_mc as f64;
    let (m1_x, m1_k, nk, nx) = (m1_x / n, m1_k / n, nk / n, nx / n);
    let nk_mean = spectral_norm(&kernel_operator(&SignalGrid::new(ks, c.k_mean.clone())?, h, w)?);
    let nx_mean = spectral_norm(&image_operator(&SignalGrid::new(xs, c.x_mean.clone())?, kh, kw)?);
    let (norm_k, norm_x) = (nk.max(nk_mean), nx.max(nx_mean));
    let d = prob.dim();
    let lipschitz = lipschitz_constant(d, prob.sigma)?;
    let core = norm_k * m1_x + norm_x * m1_k;
    Ok(GapBound {
        bound: lipschitz * core,
        lipschitz,
        m1_x,
        m1_k,
        norm_k,
        norm_x,
        norm_k_expected: nk,
        norm_k_of_mean: nk_mean,
        norm_x_expected: nx,
        norm_x_of_mean: nx_mean,
        bound_exact_lipschitz: lipschitz_constant_exact(d, prob.sigma)? * core,
    })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// One row of the `analyze-gap` table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub sigma: f64,
    pub step: usize,
    pub gap_estimate: f64,
    pub gap_se: f64,
    pub bound: f64,
    #[serde(rename = "L")]
    pub lipschitz: f64,
    pub m1_x: f64,
    pub m1_k: f64,
    pub norm_k: f64,
    pub norm_x: f64,
}

pub const GAP_CSV_HEADER: &str = "sigma,step,gap_estimate,gap_se,bound,L,m1_x,m1_k,norm_K,norm_X";

impl GapRow {
    pub fn new(sigma: f64, step: usize, est: &GapEstimate, bound: &GapBound) -> Self {
        Self {
            sigma,
            step,
            gap_estimate: est.gap,
            gap_se: est.se,
            bound: bound.bound,
            lipschitz: bound.lipschitz,
            m1_x: bound.m1_x,
            m1_k: bound.m1_k,
            norm_k: bound.norm_k,
            norm_x: bound.norm_x,
        }
    }

    pub fn csv(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.sigma,
            self.step,
            self.gap_estimate,
            self.gap_se,
            self.bound,
            self.lipschitz,
            self.m1_x,
            self.m1_k,
            self.norm_k,
            self.norm_x
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::convolve;
    use crate::rng::{normal_grid, Branch, Streams};

    fn basis(shape: &[usize], j: usize) -> SignalGrid {
        let mut g = SignalGrid::zeros(shape);
        g.data_mut()[j] = 1.0;
        g
    }

    #[test]
    fn dense_operators_agree_with_fft_convolution_on_basis_vectors() {
        let s = Streams::new(1);
        for (t, (h, w, kh, kw)) in
            [(4, 4, 3, 3), (5, 3, 2, 3), (2, 2, 2, 2), (6, 6, 3, 3), (3, 5, 1, 4)].into_iter().enumerate()
        {
            let k = normal_grid(&mut s.stream(Branch::PROBE, 2 * t as u64), &[kh, kw]);
            let x = normal_grid(&mut s.stream(Branch::PROBE, 2 * t as u64 + 1), &[h, w]);
            let km = kernel_operator(&k, h, w).unwrap();
            for j in 0..h * w {
                let e = convolve(&basis(&[h, w], j), &k).unwrap();
                for (r, v) in e.data().iter().enumerate() {
                    assert!((km[(r, j)] - v).abs() < 1e-12);
                }
            }
            let xm = image_operator(&x, kh, kw).unwrap();
            for j in 0..kh * kw {
                let e = convolve(&x, &basis(&[kh, kw], j)).unwrap();
                for (r, v) in e.data().iter().enumerate() {
                    assert!((xm[(r, j)] - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn posterior_limits() {
        let prior = GaussianPrior::new(&[1, 3], vec![0.5, -1.0, 2.0], vec![0.7, 1.3, 0.2]).unwrap();
        let a = DMatrix::identity(3, 3);
        let y = [3.0, 1.0, -2.0];
        let (m, c) = exact_posterior_gaussian(&y, &prior, &a, 1e6).unwrap();
        for j in 0..3 {
            assert!((m[j] - prior.mean[j]).abs() < 1e-9);
            assert!((c[(j, j)] - prior.var[j]).abs() < 1e-9);
        }
        let unit = GaussianPrior::standard(&[1, 3]);
        let (m, _) = exact_posterior_gaussian(&y, &unit, &a, 1e-6).unwrap();
        for j in 0..3 {
            assert!((m[j] - y[j]).abs() < 1e-9);
        }
        assert!(exact_posterior_gaussian(&y, &unit, &a, 0.0).is_err());
        assert!(exact_posterior_gaussian(&y[..2], &unit, &a, 1.0).is_err());
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn posterior_matches_grid_quadrature() {
        let mut rng = Streams::new(7).stream(Branch::PROBE, 0);
        let prior = GaussianPrior::new(&[1, 4], vec![0.3, -0.2, 0.5, 0.0], vec![0.8, 1.2, 0.6, 1.0]).unwrap();
        let a = DMatrix::from_fn(4, 4, |_, _| 0.6 * normal(&mut rng));
        let sigma = 0.8;
        let y: Vec<f64> = (0..4).map(|_| normal(&mut rng)).collect();
        let (mean, _) = exact_posterior_gaussian(&y, &prior, &a, sigma).unwrap();

        let pts = 36;
        let axes: Vec<Vec<f64>> = (0..4)
            .map(|j| {
                let sd = prior.var[j].sqrt();
                (0..pts).map(|t| prior.mean[j] - 6.0 * sd + 12.0 * sd * t as f64 / (pts - 1) as f64).collect()
            })
            .collect();
        let (mut z, mut acc) = (0.0, [0.0; 4]);
        let mut x = [0.0; 4];
        for i0 in 0..pts {
            x[0] = axes[0][i0];
            for i1 in 0..pts {
                x[1] = axes[1][i1];
                for i2 in 0..pts {
                    x[2] = axes[2][i2];
                    for i3 in 0..pts {
                        x[3] = axes[3][i3];
                        let mut e = 0.0;
                        for j in 0..4 {
                            e += (x[j] - prior.mean[j]).powi(2) / (2.0 * prior.var[j]);
                            let pred: f64 = (0..4).map(|c| a[(j, c)] * x[c]).sum();
                            e += (y[j] - pred).powi(2) / (2.0 * sigma * sigma);
                        }
                        let p = (-e).exp();
                        z += p;
                        for j in 0..4 {
                            acc[j] += p * x[j];
                        }
                    }
                }
            }
        }
        let quad = DVector::from_iterator(4, acc.iter().map(|v| v / z));
        assert!((&quad - &mean).norm() / mean.norm() < 1e-3, "{quad} vs {mean}");
    }

    #[test]
    fn lipschitz_examples() {
        let l = lipschitz_constant(1, 1.0).unwrap();
        assert!((l - 0.24197).abs() < 1e-5);
        assert!((lipschitz_constant(2, 0.7).unwrap() - 2.0 * lipschitz_constant(1, 0.7).unwrap()).abs() < 1e-15);
        let expect = (2.0 * std::f64::consts::PI * 0.25f64).sqrt().recip() * (-2.0f64).exp();
        assert!((lipschitz_constant(1, 0.5).unwrap() - expect).abs() < 1e-15);
        assert!(lipschitz_constant(1, 0.0).is_err());
        assert!(lipschitz_constant(0, 1.0).is_err());
    }

    #[test]
    fn exact_constant_is_the_gradient_supremum() {
        for (d, sigma) in [(1, 0.5), (2, 1.0), (3, 2.0)] {
            let l = lipschitz_constant_exact(d, sigma).unwrap();
            // Gradient norm along a ray is r / sigma^2 * h(r).
            let best = (1..4000)
                .map(|t| {
                    let r = t as f64 * 1e-3 * sigma;
                    let mut u = vec![0.0; d];
                    u[0] = r;
                    r / (sigma * sigma) * gaussian_density(&u, &vec![0.0; d], sigma)
                })
                .fold(0.0, f64::max);
            assert!(best <= l * (1.0 + 1e-12));
            assert!(best >= l * (1.0 - 1e-6));
        }
    }

    #[test]
    fn point_mass_conditionals_have_zero_gap_and_bound() {
        let sched = NoiseSchedule::linear(20, 1e-3, 0.2).unwrap();
        let mut rng = Streams::new(2).stream(Branch::MONTE_CARLO, 0);
        let (prob, x, k) = ToyProblem::random((2, 2), (2, 2), 0.5, &mut rng).unwrap();
        let est = jensen_gap_empirical(&prob, &x, &k, 0, &sched, 100, &mut rng).unwrap();
        let h = prob.likelihood(&x, &k).unwrap();
        assert!(est.gap <= 1e-14 * h && est.se <= 1e-14 * h, "{est:?}");
        let b = jensen_gap_bound(&prob, &x, &k, 0, &sched, 100, &mut rng).unwrap();
        assert_eq!(b.bound, 0.0);
        assert_eq!((b.m1_x, b.m1_k), (0.0, 0.0));
    }

    #[test]
    fn reverse_conditional_matches_bayes() {
        let sched = NoiseSchedule::linear(20, 1e-3, 0.2).unwrap();
        let prior = GaussianPrior::new(&[1, 1], vec![0.4], vec![0.9]).unwrap();
        let i = 7;
        let ab = sched.alpha_bar(i);
        let (m, v) = reverse_conditional(&prior, &[1.3], i, &sched).unwrap();
        // Joint Gaussian of (x0, x_i): cov = sqrt(ab) var, var_i = ab var + 1 - ab.
        let vi = ab * 0.9 + 1.0 - ab;
        let expect_m = 0.4 + ab.sqrt() * 0.9 / vi * (1.3 - ab.sqrt() * 0.4);
        let expect_v = 0.9 - ab * 0.81 / vi;
        assert!((m[0] - expect_m).abs() < 1e-12);
        assert!((v[0] - expect_v).abs() < 1e-12);
    }

    #[test]
    fn gap_is_reproducible_and_rejects_non_gaussian_priors() {
        let sched = NoiseSchedule::linear(20, 1e-3, 0.2).unwrap();
        let s = Streams::new(5);
        let (prob, x, k) = ToyProblem::random((2, 2), (2, 2), 1.0, &mut s.stream(Branch::GENERATOR, 0)).unwrap();
        let run =
            || jensen_gap_empirical(&prob, &x, &k, 10, &sched, 1000, &mut s.stream(Branch::MONTE_CARLO, 0)).unwrap();
        assert_eq!(run(), run());
        let gmm = crate::score::GmmPrior::new(
            &[2, 2],
            vec![crate::score::GmmComponent { weight: 1.0, mean: vec![0.0; 4], var: vec![1.0; 4] }],
        )
        .unwrap();
        let r = ToyProblem::from_models(
            &ScoreModel::Gmm(gmm),
            &ScoreModel::Gaussian(prob.kernel_prior.clone()),
            1.0,
            prob.y.clone(),
        );
        assert!(matches!(r, Err(Error::Capability(_))));
    }

    #[test]
    fn csv_row_has_ten_columns() {
        let est = GapEstimate { gap: 1e-3, se: 1e-4 };
        let b = GapBound {
            bound: 0.1,
            lipschitz: 0.2,
            m1_x: 0.3,
            m1_k: 0.4,
            norm_k: 1.0,
            norm_x: 2.0,
            norm_k_expected: 1.0,
            norm_k_of_mean: 0.9,
            norm_x_expected: 2.0,
            norm_x_of_mean: 1.5,
            bound_exact_lipschitz: 0.3,
        };
        let row = GapRow::new(0.5, 10, &est, &b).csv();
        assert_eq!(row.split(',').count(), GAP_CSV_HEADER.split(',').count());
        assert!(row.starts_with("0.5,10,"));
    }
}
