//! Dense row-major tensors used throughout the crate.
//!
//! Two storage kinds only: real `f64` and complex `Complex64`. Images are
//! shaped `[ny, nx]`, multi-coil stacks `[ncoils, ny, nx]`, channel stacks
//! `[ch, ny, nx]`. The last axis is fastest.

use num_complex::Complex64;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CTensor {
    pub shape: Vec<usize>,
    pub data: Vec<Complex64>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl RTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        RTensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel(shape)],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(numel(shape), data.len(), "shape/data mismatch");
        RTensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        RTensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row-major index for a 2-D tensor.
    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn at2_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.shape[1] + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::numerical(format!("{what} contains non-finite values")))
        }
    }

    pub fn scale(&self, s: f64) -> RTensor {
        RTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &RTensor) -> RTensor {
        assert_eq!(self.shape, other.shape);
        RTensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &RTensor) -> RTensor {
        assert_eq!(self.shape, other.shape);
        RTensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }
}

impl CTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        CTensor {
            shape: shape.to_vec(),
            data: vec![Complex64::new(0.0, 0.0); numel(shape)],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<Complex64>) -> Self {
        assert_eq!(numel(shape), data.len(), "shape/data mismatch");
        CTensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> Complex64 {
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn at2_mut(&mut self, i: usize, j: usize) -> &mut Complex64 {
        &mut self.data[i * self.shape[1] + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::numerical(format!("{what} contains non-finite values")))
        }
    }

    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn conj(&self) -> CTensor {
        CTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.conj()).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> CTensor {
        CTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &CTensor) -> CTensor {
        assert_eq!(self.shape, other.shape);
        CTensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &CTensor) -> CTensor {
        assert_eq!(self.shape, other.shape);
        CTensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    /// Hadamard product.
    pub fn mul(&self, other: &CTensor) -> CTensor {
        assert_eq!(self.shape, other.shape);
        CTensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a * b)
                .collect(),
        }
    }

    /// Inner product `sum(conj(self) * other)`.
    pub fn dot(&self, other: &CTensor) -> Complex64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    /// Real part of the inner product; the real Hilbert-space pairing.
    pub fn dot_re(&self, other: &CTensor) -> f64 {
        self.dot(other).re
    }

    pub fn magnitude(&self) -> RTensor {
        RTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.norm()).collect(),
        }
    }

    pub fn from_real(r: &RTensor) -> CTensor {
        CTensor {
            shape: r.shape.clone(),
            data: r.data.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        }
    }
}

/// Relative L2 distance `||a - b|| / max(||b||, eps)`; used all over the tests.
pub fn rel_err_c(a: &CTensor, b: &CTensor) -> f64 {
    let num = a.sub(b).norm2();
    let den = b.norm2().max(1e-300);
    num / den
}

pub fn rel_err_r(a: &RTensor, b: &RTensor) -> f64 {
    let num = a.sub(b).norm2();
    let den = b.norm2().max(1e-300);
    num / den
}
