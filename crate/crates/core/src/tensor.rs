//! Dense row-major `f64` tensors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape("shape must have at least one dimension".into()));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape(format!("zero dimension in {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        })
    }

    /// Gaussian samples, bit-identical for a given `(shape, seed, stddev)`.
    pub fn randn(shape: &[usize], seed: u64, stddev: f64) -> Result<Self> {
        let n = check_shape(shape)?;
        if !(stddev > 0.0 && stddev.is_finite()) {
            return Err(Error::InvalidInput(format!("stddev must be positive, got {stddev}")));
        }
        let normal = Normal::new(0.0, stddev).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidShape("ragged rows".into()));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::InvalidInput(format!("item() on tensor of shape {:?}", self.shape)))
        }
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::InvalidShape(format!("expected 2-D tensor, got {s:?}"))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = *self.shape.last().unwrap();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn zeros(shape: &[usize]) -> Result<Tensor> {
    Tensor::zeros(shape)
}

pub fn randn(shape: &[usize], seed: u64, stddev: f64) -> Result<Tensor> {
    Tensor::randn(shape, seed, stddev)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_2x2() {
        let t = zeros(&[2, 2]).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.data(), &[0.0; 4]);
    }

    #[test]
    fn invalid_shapes() {
        assert!(matches!(zeros(&[]), Err(Error::InvalidShape(_))));
        assert!(matches!(zeros(&[3, 0]), Err(Error::InvalidShape(_))));
        assert!(matches!(randn(&[0], 1, 1.0), Err(Error::InvalidShape(_))));
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn randn_is_deterministic() {
        let a = randn(&[4], 7, 1.0).unwrap();
        let b = randn(&[4], 7, 1.0).unwrap();
        assert_eq!(a.data(), b.data());
        let c = randn(&[4], 8, 1.0).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn randn_mean_near_zero() {
        let t = randn(&[100_000], 1, 1.0).unwrap();
        let mean = t.data().iter().sum::<f64>() / t.len() as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / t.len() as f64;
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn randn_rejects_bad_stddev() {
        assert!(randn(&[3], 1, 0.0).is_err());
        assert!(randn(&[3], 1, -1.0).is_err());
    }
}
