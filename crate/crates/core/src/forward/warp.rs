//! Per-pixel tilt warp with bilinear sampling and edge clamping.
//!
//! `out(r, c) = x(r + dy(r, c), c + dx(r, c))`, where channel 0 of the field
//! is `dx` (columns) and channel 1 is `dy` (rows). Out-of-range neighbour
//! indices are clamped to the border.

use crate::error::{Error, Result};
use crate::grid::SignalGrid;

/// Neighbour indices and bilinear weights of one sample location.
#[derive(Clone, Copy)]
struct Tap {
    r0: usize,
    r1: usize,
    c0: usize,
    c1: usize,
    fr: f64,
    fc: f64,
}

fn tap(r: usize, c: usize, dx: f64, dy: f64, h: usize, w: usize) -> Tap {
    let u = c as f64 + dx;
    let v = r as f64 + dy;
    let cf = u.floor();
    let rf = v.floor();
    let clamp = |i: f64, n: usize| i.max(0.0).min((n - 1) as f64) as usize;
    Tap { r0: clamp(rf, h), r1: clamp(rf + 1.0, h), c0: clamp(cf, w), c1: clamp(cf + 1.0, w), fr: v - rf, fc: u - cf }
}

fn check(x: &SignalGrid, phi: &SignalGrid) -> Result<(usize, usize, usize)> {
    let (h, w, nc) = x.dims()?;
    if phi.shape() != [h, w, 2] {
        return Err(Error::shape(format!("tilt field {:?} does not match image {:?}", phi.shape(), x.shape())));
    }
    if !phi.is_finite() {
        return Err(Error::NonFinite("tilt field displacement".into()));
    }
    Ok((h, w, nc))
}

pub fn tilt_warp(x: &SignalGrid, phi: &SignalGrid) -> Result<SignalGrid> {
    let (h, w, nc) = check(x, phi)?;
    let xd = x.data();
    let pd = phi.data();
    let mut out = vec![0.0; x.len()];
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            let t = tap(r, c, pd[2 * p], pd[2 * p + 1], h, w);
            for ch in 0..nc {
                let at = |rr: usize, cc: usize| xd[(rr * w + cc) * nc + ch];
                let top = (1.0 - t.fc) * at(t.r0, t.c0) + t.fc * at(t.r0, t.c1);
                let bot = (1.0 - t.fc) * at(t.r1, t.c0) + t.fc * at(t.r1, t.c1);
                out[p * nc + ch] = (1.0 - t.fr) * top + t.fr * bot;
            }
        }
    }
    SignalGrid::new(x.shape(), out)
}

/// Adjoint of `x -> tilt_warp(x, phi)` (bilinear splatting).
pub fn tilt_warp_adjoint(v: &SignalGrid, phi: &SignalGrid) -> Result<SignalGrid> {
    let (h, w, nc) = check(v, phi)?;
    let vd = v.data();
    let pd = phi.data();
    let mut out = vec![0.0; v.len()];
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            let t = tap(r, c, pd[2 * p], pd[2 * p + 1], h, w);
            for ch in 0..nc {
                let g = vd[p * nc + ch];
                out[(t.r0 * w + t.c0) * nc + ch] += (1.0 - t.fr) * (1.0 - t.fc) * g;
                out[(t.r0 * w + t.c1) * nc + ch] += (1.0 - t.fr) * t.fc * g;
                out[(t.r1 * w + t.c0) * nc + ch] += t.fr * (1.0 - t.fc) * g;
                out[(t.r1 * w + t.c1) * nc + ch] += t.fr * t.fc * g;
            }
        }
    }
    SignalGrid::new(v.shape(), out)
}

/// `cotangent^T (d tilt_warp(x, phi) / d phi)`, shaped like `phi`.
///
/// Piecewise smooth: at integer sample coordinates the one-sided slope of
/// the cell above/right is used.
pub fn tilt_warp_vjp_field(x: &SignalGrid, phi: &SignalGrid, cotangent: &SignalGrid) -> Result<SignalGrid> {
    let (h, w, nc) = check(x, phi)?;
    x.check_same_shape(cotangent, "tilt_warp_vjp_field cotangent")?;
    let xd = x.data();
    let pd = phi.data();
    let gd = cotangent.data();
    let mut out = vec![0.0; phi.len()];
    for r in 0..h {
        for c in 0..w {
            let p = r * w + c;
            let t = tap(r, c, pd[2 * p], pd[2 * p + 1], h, w);
            let (mut gx, mut gy) = (0.0, 0.0);
            for ch in 0..nc {
                let at = |rr: usize, cc: usize| xd[(rr * w + cc) * nc + ch];
                let (a, b, cq, d) = (at(t.r0, t.c0), at(t.r0, t.c1), at(t.r1, t.c0), at(t.r1, t.c1));
                let g = gd[p * nc + ch];
                gx += g * ((1.0 - t.fr) * (b - a) + t.fr * (d - cq));
                gy += g * ((1.0 - t.fc) * (cq - a) + t.fc * (d - b));
            }
            out[2 * p] = gx;
            out[2 * p + 1] = gy;
        }
    }
    SignalGrid::new(phi.shape(), out)
}
