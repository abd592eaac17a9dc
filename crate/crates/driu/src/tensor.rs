//! Dense row-major n-dimensional array, the value type shared by every
//! other module. Channel-first (C,H,W) convention for images.

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); shape.iter().product()],
        })
    }

    pub fn full(shape: &[usize], value: S) -> Result<Self> {
        let mut t = Self::zeros(shape)?;
        t.data.fill(value);
        Ok(t)
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        Self::check_shape(shape)?;
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?} (product {})",
                data.len(),
                shape,
                n
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// He-normal initialization: N(0, 2/fan_in), computed in f64 from the
    /// counter RNG keyed by (seed, name) and cast to storage precision.
    pub fn he_normal_init(shape: &[usize], fan_in: usize, seed: u64, name: &str) -> Result<Self> {
        if fan_in == 0 {
            return Err(Error::InvalidArgument("fan_in must be >= 1".into()));
        }
        Self::check_shape(shape)?;
        let std = (2.0 / fan_in as f64).sqrt();
        let mut rng = CounterRng::new(seed, name);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| S::from_f64(rng.normal() * std)).collect();
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    fn check_shape(shape: &[usize]) -> Result<()> {
        if shape.is_empty() {
            return Err(Error::shape("empty shape"));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::shape(format!("zero extent in shape {:?}", shape)));
        }
        Ok(())
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        Self::check_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} (len {}) into {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// (C,H,W) accessor.
    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> S {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    #[inline]
    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: S) {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x] = v;
    }

    /// (O,C,Kh,Kw) accessor for conv weights.
    #[inline]
    pub fn at4(&self, o: usize, c: usize, ky: usize, kx: usize) -> S {
        let (ci, kh, kw) = (self.shape[1], self.shape[2], self.shape[3]);
        self.data[((o * ci + c) * kh + ky) * kw + kx]
    }

    fn zip_with(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, k: S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&a| a * k).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&a| T::from_f64(a.to_f64_())).collect(),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, S> {
        self.data.iter()
    }
}
