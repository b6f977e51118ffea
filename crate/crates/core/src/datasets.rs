//! Synthetic training and test data: toy images, kernels and tilt fields.
//!
//! Item `j` of every dataset is drawn from its own stream
//! `(seed, GENERATOR, j)`, so datasets are reproducible item by item.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{gen_gaussian_kernel, gen_motion_kernel, gen_tilt_field};
use crate::grid::SignalGrid;
use crate::rng::{Branch, Streams};
use crate::score::GmmPrior;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageKind {
    /// Axis-aligned bright bars on a dark background.
    Bars,
    /// Smooth bright Gaussian blobs on a dark background.
    Blobs,
    /// Bars or blobs with equal probability.
    Mixed,
}

/// A `size × size` toy image with values in `[-1, 1]`.
pub fn toy_image<R: Rng + ?Sized>(kind: ImageKind, size: usize, rng: &mut R) -> SignalGrid {
    let kind = match kind {
        ImageKind::Mixed if rng.random_bool(0.5) => ImageKind::Bars,
        ImageKind::Mixed => ImageKind::Blobs,
        k => k,
    };
    let n = size as f64;
    let background = rng.random_range(-1.0..-0.7);
    let mut img = vec![background; size * size];
    let count = rng.random_range(1..=3);
    match kind {
        ImageKind::Bars => {
            for _ in 0..count {
                let width = rng.random_range(1..=(size / 5).max(1));
                let start = rng.random_range(0..size);
                let lo = rng.random_range(0..size / 2);
                let hi = rng.random_range(size / 2..=size);
                let value = rng.random_range(0.2..1.0);
                let vertical = rng.random_bool(0.5);
                for a in start..(start + width).min(size) {
                    for b in lo..hi {
                        let (r, c) = if vertical { (b, a) } else { (a, b) };
                        img[r * size + c] = value;
                    }
                }
            }
        }
        ImageKind::Blobs => {
            for _ in 0..count {
                let (cr, cc) = (rng.random_range(0.0..n), rng.random_range(0.0..n));
                let radius = rng.random_range(0.1 * n..0.22 * n);
                let amp = rng.random_range(1.0..2.0);
                for r in 0..size {
                    for c in 0..size {
                        let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
                        img[r * size + c] += amp * (-d2 / (2.0 * radius * radius)).exp();
                    }
                }
            }
            img.iter_mut().for_each(|v| *v = v.min(1.0));
        }
        ImageKind::Mixed => unreachable!(),
    }
    SignalGrid::new(&[size, size], img).expect("square buffer")
}

pub fn toy_images(kind: ImageKind, size: usize, count: usize, seed: u64) -> Vec<SignalGrid> {
    let streams = Streams::new(seed);
    (0..count).map(|j| toy_image(kind, size, &mut streams.stream(Branch::GENERATOR, j as u64))).collect()
}

pub fn gmm_draws(prior: &GmmPrior, count: usize, seed: u64) -> Vec<SignalGrid> {
    let streams = Streams::new(seed);
    (0..count).map(|j| prior.sample(&mut streams.stream(Branch::GENERATOR, j as u64))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelKind {
    /// Motion kernels with intensity drawn uniformly from the range.
    Motion { intensity: (f64, f64) },
    /// Isotropic Gaussians with std drawn uniformly from the range.
    Gaussian { std: (f64, f64) },
}

fn uniform_in<R: Rng + ?Sized>(range: (f64, f64), rng: &mut R) -> Result<f64> {
    if !(range.0 <= range.1) {
        return Err(Error::param(format!("empty range {range:?}")));
    }
    Ok(if range.0 == range.1 { range.0 } else { rng.random_range(range.0..range.1) })
}

pub fn toy_kernel<R: Rng + ?Sized>(kind: KernelKind, size: usize, rng: &mut R) -> Result<SignalGrid> {
    match kind {
        KernelKind::Motion { intensity } => {
            let i = uniform_in(intensity, rng)?;
            gen_motion_kernel(i, size, rng)
        }
        KernelKind::Gaussian { std } => gen_gaussian_kernel(uniform_in(std, rng)?, size),
    }
}

pub fn toy_kernels(kind: KernelKind, size: usize, count: usize, seed: u64) -> Result<Vec<SignalGrid>> {
    let streams = Streams::new(seed);
    (0..count).map(|j| toy_kernel(kind, size, &mut streams.stream(Branch::GENERATOR, j as u64))).collect()
}

pub fn toy_tilts(
    grid_n: usize,
    smooth_std: f64,
    amplitude: f64,
    shape: (usize, usize),
    count: usize,
    seed: u64,
) -> Result<Vec<SignalGrid>> {
    let streams = Streams::new(seed);
    (0..count)
        .map(|j| gen_tilt_field(grid_n, smooth_std, amplitude, shape, &mut streams.stream(Branch::GENERATOR, j as u64)))
        .collect()
}
