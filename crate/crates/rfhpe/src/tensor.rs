//! Dense row-major tensors in `f64`.
//!
//! [`Tensor`] is the single value carrier for the whole crate: network
//! weights, activations, radar frames (one per I/Q branch), heatmaps.
//! [`ComplexTensor`] pairs two equally-shaped real tensors as the I and Q
//! branches of a complex-valued signal.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::dimension(
                "Tensor::from_vec",
                format!("{} elements for shape {:?}", len, shape),
                format!("{}", data.len()),
            ));
        }
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

    /// Reinterpret the same buffer under a new shape of equal length.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::dimension(
                "Tensor::reshaped",
                format!("total {} for shape {:?}", self.data.len(), self.shape),
                format!("total {} for shape {:?}", len, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, c: f64) {
        for a in self.data.iter_mut() {
            *a *= c;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Complex-valued tensor as paired I (real) and Q (imaginary) branches.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor {
    pub re: Tensor,
    pub im: Tensor,
}

impl ComplexTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        ComplexTensor {
            re: Tensor::zeros(shape),
            im: Tensor::zeros(shape),
        }
    }

    pub fn new(re: Tensor, im: Tensor) -> Result<Self> {
        if re.shape() != im.shape() {
            return Err(Error::dimension(
                "ComplexTensor::new",
                format!("{:?}", re.shape()),
                format!("{:?}", im.shape()),
            ));
        }
        Ok(ComplexTensor { re, im })
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.re.all_finite() && self.im.all_finite()
    }

    /// Swap the I and Q branches.
    pub fn branch_swap(&self) -> Self {
        ComplexTensor {
            re: self.im.clone(),
            im: self.re.clone(),
        }
    }

    /// Sum of squared magnitudes over all elements.
    pub fn power(&self) -> f64 {
        self.re
            .data()
            .iter()
            .zip(self.im.data().iter())
            .map(|(a, b)| a * a + b * b)
            .sum()
    }

    pub fn max_abs_diff(&self, other: &ComplexTensor) -> f64 {
        self.re
            .max_abs_diff(&other.re)
            .max(self.im.max_abs_diff(&other.im))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn complex_rejects_mismatched_branches() {
        let re = Tensor::zeros(&[2, 2]);
        let im = Tensor::zeros(&[2, 3]);
        assert!(ComplexTensor::new(re, im).is_err());
    }

    #[test]
    fn branch_swap_is_involutive() {
        let x = ComplexTensor::new(
            Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap(),
            Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap(),
        )
        .unwrap();
        assert_eq!(x.branch_swap().branch_swap(), x);
    }
}
