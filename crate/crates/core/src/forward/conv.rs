//! Circular 2-D convolution and its adjoints, via FFT.
//!
//! The kernel is zero-padded to the image size with its center pixel
//! `((h+1)/2 - 1, (w+1)/2 - 1)` placed at the origin, so
//! `y(p) = sum_{r,c} k(r,c) x(p - (r - cr, c - cc))` with periodic indexing.
//! Multi-channel images are convolved channel by channel with one kernel.

use std::cell::RefCell;

use num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{Error, Result};
use crate::grid::SignalGrid;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// In-place 2-D FFT of a row-major `h × w` buffer. The inverse is unnormalized.
pub(crate) fn fft2(buf: &mut [Complex64], h: usize, w: usize, direction: FftDirection) {
    PLANNER.with(|p| {
        let mut planner = p.borrow_mut();
        let row = planner.plan_fft(w, direction);
        let col = planner.plan_fft(h, direction);
        for line in buf.chunks_exact_mut(w) {
            row.process(line);
        }
        let mut column = vec![Complex64::default(); h];
        for c in 0..w {
            for r in 0..h {
                column[r] = buf[r * w + c];
            }
            col.process(&mut column);
            for r in 0..h {
                buf[r * w + c] = column[r];
            }
        }
    });
}

pub(crate) fn kernel_center(kh: usize, kw: usize) -> (usize, usize) {
    (kh.div_ceil(2) - 1, kw.div_ceil(2) - 1)
}

fn check_kernel(img: (usize, usize), k: &SignalGrid) -> Result<(usize, usize)> {
    let (kh, kw, kc) = k.dims()?;
    if kc != 1 {
        return Err(Error::shape(format!("kernel must be 2-D, got {:?}", k.shape())));
    }
    if kh > img.0 || kw > img.1 {
        return Err(Error::shape(format!("kernel {kh}x{kw} larger than image {}x{}", img.0, img.1)));
    }
    Ok((kh, kw))
}

/// Spectrum of the kernel embedded at image size.
fn kernel_spectrum(k: &SignalGrid, h: usize, w: usize) -> Result<Vec<Complex64>> {
    let (kh, kw) = check_kernel((h, w), k)?;
    let (cr, cc) = kernel_center(kh, kw);
    let mut buf = vec![Complex64::default(); h * w];
    for r in 0..kh {
        for c in 0..kw {
            let rr = (r + h - cr) % h;
            let cc2 = (c + w - cc) % w;
            buf[rr * w + cc2].re += k.data()[r * kw + c];
        }
    }
    fft2(&mut buf, h, w, FftDirection::Forward);
    Ok(buf)
}

fn plane_spectrum(x: &SignalGrid, ch: usize, h: usize, w: usize, nc: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = (0..h * w).map(|p| Complex64::new(x.data()[p * nc + ch], 0.0)).collect();
    fft2(&mut buf, h, w, FftDirection::Forward);
    buf
}

fn filter(x: &SignalGrid, k: &SignalGrid, conjugate: bool) -> Result<SignalGrid> {
    let (h, w, nc) = x.dims()?;
    let spec = kernel_spectrum(k, h, w)?;
    let scale = 1.0 / (h * w) as f64;
    let mut out = vec![0.0; x.len()];
    for ch in 0..nc {
        let mut buf = plane_spectrum(x, ch, h, w, nc);
        for (b, s) in buf.iter_mut().zip(&spec) {
            *b *= if conjugate { s.conj() } else { *s };
        }
        fft2(&mut buf, h, w, FftDirection::Inverse);
        for (p, v) in buf.iter().enumerate() {
            out[p * nc + ch] = v.re * scale;
        }
    }
    SignalGrid::new(x.shape(), out)
}

/// `k * x` with periodic boundary.
pub fn convolve(x: &SignalGrid, k: &SignalGrid) -> Result<SignalGrid> {
    filter(x, k, false)
}

/// Adjoint of `x -> k * x`.
pub fn convolve_adjoint(v: &SignalGrid, k: &SignalGrid) -> Result<SignalGrid> {
    filter(v, k, true)
}

/// Adjoint of `k -> k * x`, returned at `kernel_shape`.
pub fn convolve_adjoint_kernel(v: &SignalGrid, x: &SignalGrid, kernel_shape: &[usize]) -> Result<SignalGrid> {
    v.check_same_shape(x, "convolve_adjoint_kernel")?;
    let (h, w, nc) = x.dims()?;
    let probe = SignalGrid::zeros(kernel_shape);
    let (kh, kw) = check_kernel((h, w), &probe)?;
    let (cr, cc) = kernel_center(kh, kw);
    let mut corr = vec![Complex64::default(); h * w];
    for ch in 0..nc {
        let vs = plane_spectrum(v, ch, h, w, nc);
        let xs = plane_spectrum(x, ch, h, w, nc);
        for (acc, (a, b)) in corr.iter_mut().zip(vs.iter().zip(&xs)) {
            *acc += a * b.conj();
        }
    }
    fft2(&mut corr, h, w, FftDirection::Inverse);
    let scale = 1.0 / (h * w) as f64;
    let mut out = vec![0.0; kh * kw];
    for r in 0..kh {
        for c in 0..kw {
            let rr = (r + h - cr) % h;
            let cc2 = (c + w - cc) % w;
            out[r * kw + c] = corr[rr * w + cc2].re * scale;
        }
    }
    SignalGrid::new(&[kh, kw], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn delta(h: usize, w: usize) -> SignalGrid {
        let mut k = SignalGrid::zeros(&[h, w]);
        let (cr, cc) = kernel_center(h, w);
        k.data_mut()[cr * w + cc] = 1.0;
        k
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = SignalGrid::new(&[3, 4], (0..12).map(|v| v as f64 * 0.3 - 1.0).collect()).unwrap();
        for (h, w) in [(1, 1), (3, 3), (2, 2), (3, 4)] {
            let y = convolve(&x, &delta(h, w)).unwrap();
            for (a, b) in y.data().iter().zip(x.data()) {
                assert!((a - b).abs() < 1e-12);
            }
            let z = convolve_adjoint(&x, &delta(h, w)).unwrap();
            for (a, b) in z.data().iter().zip(x.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_image_keeps_dc() {
        let x = SignalGrid::filled(&[5, 6], 0.7);
        let k = SignalGrid::new(&[3, 3], vec![0.1, 0.05, 0.1, 0.1, 0.3, 0.05, 0.1, 0.1, 0.1]).unwrap();
        let y = convolve(&x, &k).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let x = SignalGrid::zeros(&[3, 3]);
        assert!(matches!(convolve(&x, &SignalGrid::zeros(&[4, 1])), Err(Error::Shape(_))));
        assert!(convolve_adjoint_kernel(&x, &x, &[1, 4]).is_err());
    }

    #[test]
    fn multichannel_matches_per_channel() {
        let a = SignalGrid::new(&[4, 4], (0..16).map(|v| (v as f64).sin()).collect()).unwrap();
        let b = SignalGrid::new(&[4, 4], (0..16).map(|v| (v as f64).cos()).collect()).unwrap();
        let k = SignalGrid::new(&[2, 2], vec![0.4, 0.3, 0.2, 0.1]).unwrap();
        let stacked = SignalGrid::stack_channels(&[a.clone(), b.clone()]).unwrap();
        let y = convolve(&stacked, &k).unwrap();
        let ya = convolve(&a, &k).unwrap();
        let yb = convolve(&b, &k).unwrap();
        assert_eq!(y.channel(0).unwrap().data().len(), 16);
        for (p, q) in y.channel(0).unwrap().data().iter().zip(ya.data()) {
            assert!((p - q).abs() < 1e-12);
        }
        for (p, q) in y.channel(1).unwrap().data().iter().zip(yb.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
