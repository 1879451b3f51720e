//! Dense row-major `f32` tensors with a tape-based reverse-mode autodiff.

mod adam;
pub mod kernels;
mod tape;

pub use adam::{clip_grad_norm, Adam, AdamConfig};
pub use tape::{concat, Gradients, Tape, Var};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("valid shape")
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("valid shape")
    }

    pub fn scalar(value: f32) -> Self {
        Self::new(&[1], vec![value]).expect("scalar")
    }

    /// 1-D tensor over `data`.
    pub fn vector(data: Vec<f32>) -> Self {
        let n = data.len().max(1);
        if data.is_empty() {
            return Self::zeros(&[1]);
        }
        Self::new(&[n], data).expect("vector")
    }

    /// I.i.d. standard normal entries.
    pub fn gaussian(rng: &mut Rng, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.normal_f32()).collect();
        Self::new(shape, data).expect("valid shape")
    }

    /// Normal entries with standard deviation `std`.
    pub fn randn(rng: &mut Rng, shape: &[usize], std: f32) -> Self {
        let mut t = Self::gaussian(rng, shape);
        t.data.iter_mut().for_each(|x| *x *= std);
        t
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f32>>) -> Result<()> {
        if let Some(g) = &grad {
            if g.len() != self.data.len() {
                return Err(Error::Dimension {
                    op: "set_grad",
                    lhs: self.shape.clone(),
                    rhs: vec![g.len()],
                });
            }
        }
        self.grad = grad;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }
}

pub(crate) fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Input(format!(
            "shape must be a nonempty list of positive extents, got {shape:?}"
        )));
    }
    Ok(())
}

pub fn l2_norm(v: &[f32]) -> f32 {
    v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt() as f32
}

pub fn l2_distance(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt() as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_contract() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
        assert!(Tensor::new(&[], vec![]).is_err());
    }

    #[test]
    fn gaussian_shape_and_determinism() {
        let a = Tensor::gaussian(&mut Rng::new(3), &[2, 3]);
        let b = Tensor::gaussian(&mut Rng::new(3), &[2, 3]);
        assert_eq!(a.len(), 6);
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_moments() {
        let t = Tensor::gaussian(&mut Rng::new(11), &[100_000]);
        let n = t.len() as f64;
        let mean = t.data().iter().map(|x| *x as f64).sum::<f64>() / n;
        let var = t
            .data()
            .iter()
            .map(|x| (*x as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn grad_length_checked() {
        let mut t = Tensor::zeros(&[3]);
        assert!(t.set_grad(Some(vec![0.0; 2])).is_err());
        assert!(t.set_grad(Some(vec![1.0; 3])).is_ok());
        assert_eq!(t.grad(), Some(&[1.0, 1.0, 1.0][..]));
    }
}
