//! Image and kernel quality measures.

use num_complex::Complex64;
use rustfft::FftDirection;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::fft2;
use crate::grid::SignalGrid;

/// Peak-to-peak range of images stored in `[-1, 1]`.
pub const DEFAULT_PEAK: f64 = 2.0;

pub fn mse(a: &SignalGrid, b: &SignalGrid) -> Result<f64> {
    a.check_same_shape(b, "mse")?;
    if a.is_empty() {
        return Err(Error::shape("mse of empty grids"));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.len() as f64)
}

/// `10 log10(peak^2 / mse)`; `+inf` for identical inputs.
pub fn psnr(x_est: &SignalGrid, x_true: &SignalGrid, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::param(format!("psnr peak must be positive, got {peak}")));
    }
    let m = mse(x_est, x_true)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Embeds `k` centered in a zero `h × w` grid.
pub fn pad_centered(k: &SignalGrid, h: usize, w: usize) -> Result<SignalGrid> {
    let (kh, kw, kc) = k.dims()?;
    if kc != 1 || kh > h || kw > w {
        return Err(Error::shape(format!("cannot pad {:?} to {h}x{w}", k.shape())));
    }
    let (r0, c0) = ((h - kh) / 2, (w - kw) / 2);
    let mut out = SignalGrid::zeros(&[h, w]);
    for r in 0..kh {
        let dst = (r0 + r) * w + c0;
        out.data_mut()[dst..dst + kw].copy_from_slice(&k.data()[r * kw..(r + 1) * kw]);
    }
    Ok(out)
}

/// Brings two kernels to a common shape by centered zero padding; the flag
/// reports whether padding was needed.
pub fn align_kernels(a: &SignalGrid, b: &SignalGrid) -> Result<(SignalGrid, SignalGrid, bool)> {
    let (ah, aw, _) = a.dims()?;
    let (bh, bw, _) = b.dims()?;
    if (ah, aw) == (bh, bw) {
        return Ok((a.clone().reshaped(&[ah, aw])?, b.clone().reshaped(&[bh, bw])?, false));
    }
    let (h, w) = (ah.max(bh), aw.max(bw));
    Ok((pad_centered(a, h, w)?, pad_centered(b, h, w)?, true))
}

/// Maximum over circular shifts of the normalized cross-correlation.
pub fn mnc(k_est: &SignalGrid, k_true: &SignalGrid) -> Result<f64> {
    let (a, b, _) = align_kernels(k_est, k_true)?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::param("mnc of a zero kernel"));
    }
    let (h, w) = (a.shape()[0], a.shape()[1]);
    let spec = |g: &SignalGrid| {
        let mut buf: Vec<Complex64> = g.data().iter().map(|v| Complex64::new(*v, 0.0)).collect();
        fft2(&mut buf, h, w, FftDirection::Forward);
        buf
    };
    let (fa, fb) = (spec(&a), spec(&b));
    let mut corr: Vec<Complex64> = fa.iter().zip(&fb).map(|(x, y)| x.conj() * y).collect();
    fft2(&mut corr, h, w, FftDirection::Inverse);
    let peak = corr.iter().map(|c| c.re).fold(f64::NEG_INFINITY, f64::max) / (h * w) as f64;
    Ok(peak / (na * nb))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: Option<f64>,
    pub psnr_peak: f64,
    pub mse_image: Option<f64>,
    pub mse_kernel: Option<f64>,
    pub mnc: Option<f64>,
    /// Kernels had different shapes and were zero-padded for comparison.
    pub kernel_padded: bool,
    pub argmin_kernel_mse_step: Option<usize>,
    pub final_residual: Option<f64>,
    pub config_hash: Option<String>,
}

impl MetricReport {
    pub fn empty(peak: f64) -> Self {
        Self {
            psnr: None,
            psnr_peak: peak,
            mse_image: None,
            mse_kernel: None,
            mnc: None,
            kernel_padded: false,
            argmin_kernel_mse_step: None,
            final_residual: None,
            config_hash: None,
        }
    }

    pub fn with_image(mut self, est: &SignalGrid, truth: &SignalGrid) -> Result<Self> {
        self.mse_image = Some(mse(est, truth)?);
        self.psnr = Some(psnr(est, truth, self.psnr_peak)?);
        Ok(self)
    }

    pub fn with_kernel(mut self, est: &SignalGrid, truth: &SignalGrid) -> Result<Self> {
        let (a, b, padded) = align_kernels(est, truth)?;
        self.mse_kernel = Some(mse(&a, &b)?);
        self.mnc = Some(mnc(&a, &b)?);
        self.kernel_padded = padded;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_grid, Branch, Streams};

    /// Direct scan over every circular shift.
    fn mnc_scan(a: &SignalGrid, b: &SignalGrid) -> f64 {
        let (h, w) = (a.shape()[0], a.shape()[1]);
        let mut best = f64::NEG_INFINITY;
        for sr in 0..h {
            for sc in 0..w {
                let mut acc = 0.0;
                for r in 0..h {
                    for c in 0..w {
                        acc += a.data()[r * w + c] * b.data()[((r + sr) % h) * w + (c + sc) % w];
                    }
                }
                best = best.max(acc);
            }
        }
        best / (a.norm() * b.norm())
    }

    fn shift(k: &SignalGrid, dr: usize, dc: usize) -> SignalGrid {
        let (h, w) = (k.shape()[0], k.shape()[1]);
        let mut out = SignalGrid::zeros(&[h, w]);
        for r in 0..h {
            for c in 0..w {
                out.data_mut()[((r + dr) % h) * w + (c + dc) % w] = k.data()[r * w + c];
            }
        }
        out
    }

    #[test]
    fn fft_mnc_matches_scan() {
        let s = Streams::new(1);
        for t in 0..30u64 {
            let h = 1 + (t as usize % 8);
            let w = 1 + (t as usize * 3 % 8);
            let a = normal_grid(&mut s.stream(Branch::PROBE, 2 * t), &[h, w]);
            let b = normal_grid(&mut s.stream(Branch::PROBE, 2 * t + 1), &[h, w]);
            let (f, d) = (mnc(&a, &b).unwrap(), mnc_scan(&a, &b));
            assert!((f - d).abs() <= 1e-10 * d.abs().max(1e-3), "{f} vs {d}");
        }
    }

    #[test]
    fn mnc_identities() {
        let k = normal_grid(&mut Streams::new(2).stream(Branch::PROBE, 0), &[5, 5]).map(f64::abs);
        assert!((mnc(&k, &k).unwrap() - 1.0).abs() < 1e-12);
        assert!((mnc(&k, &shift(&k, 2, 3)).unwrap() - 1.0).abs() < 1e-12);
        assert!((mnc(&k.scale(7.0), &k).unwrap() - 1.0).abs() < 1e-12);
        let mut d1 = SignalGrid::zeros(&[4, 4]);
        d1.data_mut()[0] = 1.0;
        let d2 = shift(&d1, 1, 2);
        assert!((mnc(&d1, &d2).unwrap() - 1.0).abs() < 1e-12);
        assert!(mnc(&SignalGrid::zeros(&[3, 3]), &k).is_err());
    }

    #[test]
    fn mismatched_sizes_are_padded() {
        let k = normal_grid(&mut Streams::new(3).stream(Branch::PROBE, 0), &[3, 3]).map(f64::abs);
        let big = pad_centered(&k, 5, 5).unwrap();
        assert!((mnc(&k, &big).unwrap() - 1.0).abs() < 1e-12);
        let r = MetricReport::empty(DEFAULT_PEAK).with_kernel(&k, &big).unwrap();
        assert!(r.kernel_padded);
        assert_eq!(r.mse_kernel, Some(0.0));
    }

    #[test]
    fn psnr_examples() {
        let x = normal_grid(&mut Streams::new(4).stream(Branch::PROBE, 0), &[8, 8]).map(|v| v.clamp(-1.0, 1.0));
        assert_eq!(mse(&x, &x).unwrap(), 0.0);
        assert_eq!(psnr(&x, &x, 2.0).unwrap(), f64::INFINITY);
        let off = x.map(|v| v + 0.1);
        assert!((mse(&off, &x).unwrap() - 0.01).abs() < 1e-12);
        assert!((psnr(&off, &x, 2.0).unwrap() - 10.0 * 400f64.log10()).abs() < 1e-9);
        assert_eq!(mse(&off, &x).unwrap(), mse(&x, &off).unwrap());
        assert!(psnr(&x, &x, 0.0).is_err());
    }
}
