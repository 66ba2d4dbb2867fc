use rand::Rng;

use crate::error::{Result, TensorError};

/// Dense row-major tensor of rank 1 to 4 in double precision.
///
/// The optional gradient buffer always has the same length as `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

pub const MAX_RANK: usize = 4;

fn check_shape(op: &'static str, shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(TensorError::shape(op, format!("rank must be 1..={MAX_RANK}, got {}", shape.len())));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel = check_shape("Tensor::new", &shape)?;
        if numel != data.len() {
            return Err(TensorError::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Result<Self> {
        let shape = shape.into();
        let numel = check_shape("Tensor::full", &shape)?;
        Ok(Tensor { shape, data: vec![value; numel], grad: None })
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let shape = shape.into();
        let numel = check_shape("Tensor::from_fn", &shape)?;
        Ok(Tensor { shape, data: (0..numel).map(&mut f).collect(), grad: None })
    }

    /// Uniform samples in `[low, high)`.
    pub fn uniform<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, low: f64, high: f64, rng: &mut R) -> Result<Self> {
        Self::from_fn(shape, |_| low + (high - low) * rng.random::<f64>())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel = check_shape("Tensor::reshape", &shape)?;
        if numel != self.data.len() {
            return Err(TensorError::shape("Tensor::reshape", format!("cannot view {:?} as {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first access.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(TensorError::shape(
                "Tensor::accumulate_grad",
                format!("gradient length {} vs {} values", g.len(), self.data.len()),
            ));
        }
        self.grad_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Element at a multi-index; panics on out-of-range indices.
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {i} out of range for extent {d}");
            acc * d + i
        })
    }
}

/// Splits a shape into `(batch, rest)` where `rest` has `base_rank` axes.
/// A shape of exactly `base_rank` axes is treated as a batch of one.
pub(crate) fn split_batch<'a>(op: &'static str, shape: &'a [usize], base_rank: usize) -> Result<(usize, &'a [usize])> {
    if shape.len() == base_rank {
        Ok((1, shape))
    } else if shape.len() == base_rank + 1 {
        Ok((shape[0], &shape[1..]))
    } else {
        Err(TensorError::shape(op, format!("expected rank {base_rank} or {}, got {shape:?}", base_rank + 1)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(Vec::<usize>::new(), vec![]).is_err());
        assert!(Tensor::zeros(vec![1, 1, 1, 1, 1]).is_err());
        assert!(Tensor::zeros(vec![2, 3]).unwrap().reshape(vec![7]).is_err());
    }

    #[test]
    fn grad_buffer_matches_shape() {
        let mut t = Tensor::zeros(vec![2, 2]).unwrap();
        assert!(t.grad().is_none());
        t.accumulate_grad(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        t.accumulate_grad(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 3.0, 4.0, 5.0]);
        assert!(t.accumulate_grad(&[1.0]).is_err());
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0; 4]);
    }

    #[test]
    fn offsets_are_row_major() {
        let t = Tensor::from_fn(vec![2, 3, 4], |i| i as f64).unwrap();
        assert_eq!(t.at(&[1, 2, 3]), 23.0);
        assert_eq!(t.at(&[0, 1, 0]), 4.0);
    }
}
