//! Dense real-valued tensors with shape metadata.
//!
//! Every signal the engine touches (images, kernels, tilt fields, toy
//! vectors) is a [`SignalGrid`]: row-major storage with the last axis
//! varying fastest. Images are `[H, W]` or `[H, W, C]`, kernels `[h, w]`,
//! tilt fields `[H, W, 2]` with channel 0 = column displacement and
//! channel 1 = row displacement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalGrid {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl SignalGrid {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || n == 0 {
            return Err(Error::shape(format!("empty shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    /// A `1 × n` grid, the layout used for one-dimensional toy signals.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { shape: vec![1, data.len()], data }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// `(rows, cols, channels)` for 2-D and 3-D grids.
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[h, w] => Ok((h, w, 1)),
            &[h, w, c] => Ok((h, w, c)),
            s => Err(Error::shape(format!("expected a 2-D or 3-D grid, got {s:?}"))),
        }
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{what}: {:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other, "elementwise op")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &Self) -> Result<()> {
        self.check_same_shape(x, "axpy")?;
        for (s, &v) in self.data.iter_mut().zip(&x.data) {
            *s += a * v;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel `c` of an `[H, W, C]` grid as an `[H, W]` grid.
    pub fn channel(&self, c: usize) -> Result<Self> {
        let (h, w, nc) = self.dims()?;
        if c >= nc {
            return Err(Error::shape(format!("channel {c} of {nc}")));
        }
        let data = (0..h * w).map(|p| self.data[p * nc + c]).collect();
        Self::new(&[h, w], data)
    }

    /// Interleaves equally-shaped `[H, W]` planes into an `[H, W, C]` grid.
    pub fn stack_channels(planes: &[Self]) -> Result<Self> {
        let first = planes.first().ok_or_else(|| Error::shape("no channels to stack"))?;
        let (h, w, c0) = first.dims()?;
        if c0 != 1 {
            return Err(Error::shape("stack_channels expects single-channel planes"));
        }
        let nc = planes.len();
        let mut data = vec![0.0; h * w * nc];
        for (c, p) in planes.iter().enumerate() {
            first.check_same_shape(p, "stack_channels")?;
            for (i, &v) in p.data.iter().enumerate() {
                data[i * nc + c] = v;
            }
        }
        Self::new(&[h, w, nc], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_data() {
        assert!(SignalGrid::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(SignalGrid::new(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn channel_round_trip() {
        let g = SignalGrid::new(&[2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        let a = g.channel(0).unwrap();
        let b = g.channel(1).unwrap();
        assert_eq!(a.data(), &[0.0, 2.0, 4.0, 6.0]);
        assert_eq!(SignalGrid::stack_channels(&[a, b]).unwrap(), g);
    }

    #[test]
    fn axpy_and_dot() {
        let mut a = SignalGrid::from_vec(vec![1.0, 2.0]);
        let b = SignalGrid::from_vec(vec![3.0, -1.0]);
        a.axpy(2.0, &b).unwrap();
        assert_eq!(a.data(), &[7.0, 0.0]);
        assert_eq!(a.dot(&b).unwrap(), 21.0);
        assert!(a.axpy(1.0, &SignalGrid::zeros(&[3])).is_err());
    }
}
