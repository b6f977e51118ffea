//! Random blur kernels and tilt fields.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::SignalGrid;
use crate::rng::normal;

/// Isotropic Gaussian on a `size × size` grid centered at `(size-1)/2`,
/// normalized to unit sum.
pub fn gen_gaussian_kernel(std: f64, size: usize) -> Result<SignalGrid> {
    if !(std > 0.0) || !std.is_finite() {
        return Err(Error::param(format!("gaussian kernel std must be positive, got {std}")));
    }
    if size == 0 {
        return Err(Error::param("kernel size must be at least 1"));
    }
    let center = (size as f64 - 1.0) / 2.0;
    let mut data = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let dr = r as f64 - center;
            let dc = c as f64 - center;
            data.push((-(dr * dr + dc * dc) / (2.0 * std * std)).exp());
        }
    }
    normalize(SignalGrid::new(&[size, size], data)?)
}

fn normalize(mut k: SignalGrid) -> Result<SignalGrid> {
    let s = k.sum();
    if !(s > 0.0) {
        return Err(Error::param("kernel has no mass"));
    }
    k.data_mut().iter_mut().for_each(|v| *v /= s);
    Ok(k)
}

const CONTROL_POINTS: usize = 8;
const SAMPLES_PER_SEGMENT: usize = 16;
const STAMP_SPACING: f64 = 0.25;

fn catmull_rom(p0: [f64; 2], p1: [f64; 2], p2: [f64; 2], p3: [f64; 2], t: f64) -> [f64; 2] {
    let t2 = t * t;
    let t3 = t2 * t;
    let f = |a: f64, b: f64, c: f64, d: f64| {
        0.5 * (2.0 * b + (-a + c) * t + (2.0 * a - 5.0 * b + 4.0 * c - d) * t2 + (-a + 3.0 * b - 3.0 * c + d) * t3)
    };
    [f(p0[0], p1[0], p2[0], p3[0]), f(p0[1], p1[1], p2[1], p3[1])]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Random motion-blur kernel.
///
/// A heading random walk through `CONTROL_POINTS` points (turn and step
/// jitter both proportional to `intensity`) is interpolated with a
/// Catmull-Rom spline, rescaled to a path length growing with intensity,
/// fitted inside the grid, stamped with bilinear splats and normalized.
pub fn gen_motion_kernel<R: Rng + ?Sized>(intensity: f64, size: usize, rng: &mut R) -> Result<SignalGrid> {
    if !(0.0..=1.0).contains(&intensity) {
        return Err(Error::param(format!("motion intensity {intensity} outside [0, 1]")));
    }
    if size == 0 {
        return Err(Error::param("kernel size must be at least 1"));
    }
    if size == 1 {
        return SignalGrid::new(&[1, 1], vec![1.0]);
    }

    let mut heading = rng.random_range(0.0..2.0 * PI);
    let mut ctrl = vec![[0.0, 0.0]];
    for _ in 1..CONTROL_POINTS {
        heading += intensity * (PI / 3.0) * normal(rng);
        let step = (1.0 + 0.5 * intensity * normal(rng)).max(0.2);
        let last = *ctrl.last().unwrap();
        ctrl.push([last[0] + step * heading.cos(), last[1] + step * heading.sin()]);
    }

    let mut curve = Vec::with_capacity(CONTROL_POINTS * SAMPLES_PER_SEGMENT);
    for j in 0..CONTROL_POINTS - 1 {
        let p0 = ctrl[j.saturating_sub(1)];
        let p3 = ctrl[(j + 2).min(CONTROL_POINTS - 1)];
        for s in 0..SAMPLES_PER_SEGMENT {
            let t = s as f64 / SAMPLES_PER_SEGMENT as f64;
            curve.push(catmull_rom(p0, ctrl[j], ctrl[j + 1], p3, t));
        }
    }
    curve.push(ctrl[CONTROL_POINTS - 1]);

    let arc: f64 = curve.windows(2).map(|w| dist(w[0], w[1])).sum();
    let extent = (size - 1) as f64;
    let target = extent * (0.25 + 0.75 * intensity);
    let mut scale = if arc > 0.0 { target / arc } else { 0.0 };
    let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
    for p in &curve {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]) * scale;
    if span > extent {
        scale *= extent / span;
    }
    let mid = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    let center = extent / 2.0;
    let place = |p: [f64; 2]| [center + (p[0] - mid[0]) * scale, center + (p[1] - mid[1]) * scale];

    let mut grid = vec![0.0; size * size];
    let mut splat = |p: [f64; 2]| {
        // p = [column, row]
        let (c0, r0) = (p[0].floor(), p[1].floor());
        let (fc, fr) = (p[0] - c0, p[1] - r0);
        for (dr, wr) in [(0, 1.0 - fr), (1, fr)] {
            for (dc, wc) in [(0, 1.0 - fc), (1, fc)] {
                let r = (r0 as i64 + dr).clamp(0, size as i64 - 1) as usize;
                let c = (c0 as i64 + dc).clamp(0, size as i64 - 1) as usize;
                grid[r * size + c] += wr * wc;
            }
        }
    };
    for w in curve.windows(2) {
        let (a, b) = (place(w[0]), place(w[1]));
        let n = ((dist(a, b) / STAMP_SPACING).ceil() as usize).max(1);
        for s in 0..n {
            let t = s as f64 / n as f64;
            splat([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
    }
    splat(place(*curve.last().unwrap()));
    normalize(SignalGrid::new(&[size, size], grid)?)
}

fn smooth_1d(line: &[f64], taps: &[f64]) -> Vec<f64> {
    let radius = taps.len() / 2;
    let n = line.len() as i64;
    (0..line.len())
        .map(|i| {
            taps.iter()
                .enumerate()
                .map(|(t, w)| {
                    let j = (i as i64 + t as i64 - radius as i64).clamp(0, n - 1);
                    w * line[j as usize]
                })
                .sum()
        })
        .collect()
}

/// Smooth random tilt field: iid standard normal 2-vectors on a
/// `grid_n × grid_n` lattice, Gaussian-smoothed (std in lattice units),
/// bilinearly upsampled to `out_shape` and scaled so the largest
/// displacement magnitude equals `amplitude` pixels.
pub fn gen_tilt_field<R: Rng + ?Sized>(
    grid_n: usize,
    smooth_std: f64,
    amplitude: f64,
    out_shape: (usize, usize),
    rng: &mut R,
) -> Result<SignalGrid> {
    if grid_n < 2 {
        return Err(Error::param("tilt lattice needs grid_n >= 2"));
    }
    if smooth_std < 0.0 || amplitude < 0.0 {
        return Err(Error::param("tilt smoothing and amplitude must be nonnegative"));
    }
    let (h, w) = out_shape;
    if h == 0 || w == 0 {
        return Err(Error::shape("empty tilt field"));
    }
    let g = grid_n;
    let mut planes: [Vec<f64>; 2] = [Vec::with_capacity(g * g), Vec::with_capacity(g * g)];
    for _ in 0..g * g {
        planes[0].push(normal(rng));
        planes[1].push(normal(rng));
    }
    if smooth_std > 0.0 {
        let radius = (3.0 * smooth_std).ceil() as i64;
        let mut taps: Vec<f64> =
            (-radius..=radius).map(|t| (-(t * t) as f64 / (2.0 * smooth_std * smooth_std)).exp()).collect();
        let s: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= s);
        for plane in planes.iter_mut() {
            let rows: Vec<f64> = plane.chunks(g).flat_map(|row| smooth_1d(row, &taps)).collect();
            let mut out = rows.clone();
            for c in 0..g {
                let col: Vec<f64> = (0..g).map(|r| rows[r * g + c]).collect();
                for (r, v) in smooth_1d(&col, &taps).into_iter().enumerate() {
                    out[r * g + c] = v;
                }
            }
            *plane = out;
        }
    }

    let coord = |i: usize, n: usize| {
        if n == 1 {
            0.0
        } else {
            i as f64 * (g - 1) as f64 / (n - 1) as f64
        }
    };
    let mut data = vec![0.0; h * w * 2];
    for r in 0..h {
        let v = coord(r, h);
        let r0 = (v.floor() as usize).min(g - 2);
        let fr = v - r0 as f64;
        for c in 0..w {
            let u = coord(c, w);
            let c0 = (u.floor() as usize).min(g - 2);
            let fc = u - c0 as f64;
            for (ch, plane) in planes.iter().enumerate() {
                let at = |rr: usize, cc: usize| plane[rr * g + cc];
                let top = (1.0 - fc) * at(r0, c0) + fc * at(r0, c0 + 1);
                let bot = (1.0 - fc) * at(r0 + 1, c0) + fc * at(r0 + 1, c0 + 1);
                data[(r * w + c) * 2 + ch] = (1.0 - fr) * top + fr * bot;
            }
        }
    }
    let max_norm = data.chunks_exact(2).map(|v| (v[0] * v[0] + v[1] * v[1]).sqrt()).fold(0.0, f64::max);
    let s = if max_norm > 0.0 { amplitude / max_norm } else { 0.0 };
    data.iter_mut().for_each(|v| *v *= s);
    SignalGrid::new(&[h, w, 2], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Branch, Streams};

    fn rng(seed: u64) -> crate::rng::StreamRng {
        Streams::new(seed).stream(Branch::GENERATOR, 0)
    }

    #[test]
    fn gaussian_kernel_construction() {
        for (std, size) in [(0.3, 1), (0.5, 3), (1.0, 5), (3.0, 64), (10.0, 4)] {
            let k = gen_gaussian_kernel(std, size).unwrap();
            assert!(k.data().iter().all(|v| *v >= 0.0));
            assert!((k.sum() - 1.0).abs() < 1e-12);
        }
        assert_eq!(gen_gaussian_kernel(2.0, 1).unwrap().data(), &[1.0]);
        assert!(gen_gaussian_kernel(0.0, 3).is_err());
        assert!(gen_gaussian_kernel(-1.0, 3).is_err());
    }

    #[test]
    fn gaussian_kernel_peak_matches_formula() {
        // Peak of a 64x64 grid centered at 31.5 is at the four central pixels,
        // each at squared distance 0.5 from the center.
        let std: f64 = 3.0;
        let k = gen_gaussian_kernel(std, 64).unwrap();
        let mut z = 0.0;
        for r in 0..64 {
            for c in 0..64 {
                let d2 = (r as f64 - 31.5).powi(2) + (c as f64 - 31.5).powi(2);
                z += (-d2 / (2.0 * std * std)).exp();
            }
        }
        let peak = (-0.5 / (2.0 * std * std)).exp() / z;
        assert!((k.data()[31 * 64 + 31] - peak).abs() < 1e-15);
        assert!((k.max_abs() - peak).abs() < 1e-15);
    }

    #[test]
    fn motion_kernels_are_normalized_and_deterministic() {
        for seed in 0..20 {
            for &intensity in &[0.0, 0.3, 0.5, 1.0] {
                let k = gen_motion_kernel(intensity, 9, &mut rng(seed)).unwrap();
                assert!(k.data().iter().all(|v| *v >= 0.0));
                assert!((k.sum() - 1.0).abs() < 1e-12);
                assert_eq!(k, gen_motion_kernel(intensity, 9, &mut rng(seed)).unwrap());
            }
        }
        assert!(gen_motion_kernel(1.5, 5, &mut rng(0)).is_err());
        assert_eq!(gen_motion_kernel(0.5, 1, &mut rng(0)).unwrap().data(), &[1.0]);
    }

    #[test]
    fn zero_intensity_gives_a_straight_segment() {
        for seed in 0..10 {
            let k = gen_motion_kernel(0.0, 17, &mut rng(seed)).unwrap();
            // All mass lies within one pixel of a line through the support.
            let pts: Vec<(f64, f64, f64)> = (0..17 * 17)
                .filter(|&p| k.data()[p] > 1e-12)
                .map(|p| ((p / 17) as f64, (p % 17) as f64, k.data()[p]))
                .collect();
            let (mr, mc) = pts.iter().fold((0.0, 0.0), |(a, b), (r, c, w)| (a + r * w, b + c * w));
            let (mut srr, mut scc, mut src) = (0.0, 0.0, 0.0);
            for (r, c, w) in &pts {
                srr += w * (r - mr) * (r - mr);
                scc += w * (c - mc) * (c - mc);
                src += w * (r - mr) * (c - mc);
            }
            // Smallest eigenvalue of the weighted covariance: spread across the line.
            let tr = srr + scc;
            let det = srr * scc - src * src;
            let minor = tr / 2.0 - ((tr * tr / 4.0 - det).max(0.0)).sqrt();
            assert!(minor < 0.25, "seed {seed}: cross-line variance {minor}");
            assert!(pts.len() <= 20, "seed {seed}: {} pixels for a short segment", pts.len());
        }
    }

    #[test]
    fn support_grows_with_intensity() {
        let support = |intensity: f64| {
            (0..50)
                .map(|seed| {
                    gen_motion_kernel(intensity, 15, &mut rng(seed))
                        .unwrap()
                        .data()
                        .iter()
                        .filter(|v| **v > 1e-12)
                        .count() as f64
                })
                .sum::<f64>()
                / 50.0
        };
        assert!(support(0.9) > support(0.1));
    }

    #[test]
    fn tilt_field_scaling_and_determinism() {
        let zero = gen_tilt_field(8, 1.0, 0.0, (16, 16), &mut rng(1)).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
        let a = gen_tilt_field(8, 1.0, 1.5, (16, 12), &mut rng(2)).unwrap();
        let b = gen_tilt_field(8, 1.0, 1.5, (16, 12), &mut rng(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[16, 12, 2]);
        let max_norm = a.data().chunks_exact(2).map(|v| (v[0] * v[0] + v[1] * v[1]).sqrt()).fold(0.0, f64::max);
        assert!((max_norm - 1.5).abs() < 1e-12);
        assert!(gen_tilt_field(1, 1.0, 1.0, (4, 4), &mut rng(0)).is_err());
    }

    fn lag1_autocorrelation(f: &SignalGrid) -> f64 {
        let (h, w, _) = f.dims().unwrap();
        let d = f.data();
        let (mut num, mut den) = (0.0, 0.0);
        for r in 0..h {
            for c in 0..w {
                let p = (r * w + c) * 2;
                den += d[p] * d[p];
                if c + 1 < w {
                    num += d[p] * d[p + 2];
                }
            }
        }
        num / den
    }

    #[test]
    fn smoothing_lengthens_correlation() {
        let (mut raw, mut smooth) = (0.0, 0.0);
        for seed in 0..10 {
            raw += lag1_autocorrelation(&gen_tilt_field(32, 0.0, 1.0, (32, 32), &mut rng(seed)).unwrap());
            smooth += lag1_autocorrelation(&gen_tilt_field(32, 1.0, 1.0, (32, 32), &mut rng(seed)).unwrap());
        }
        assert!(smooth > raw + 1.0, "smoothed {smooth} vs raw {raw}");
    }
}
