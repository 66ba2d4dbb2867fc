//! Tensor-level entry points for the standalone primitives.
//!
//! These accept unbatched (`[c, ...]`) or batched (`[n, c, ...]`) inputs; the tape in
//! [`crate::graph`] runs the same kernels with gradients.

use crate::error::{Result, TensorError};
use crate::kernels::conv::{self, Conv1dDims};
use crate::kernels::resample::{self, PoolMode, RowMap};
use crate::tensor::{split_batch, Tensor};

/// Kernel `[out, in, k]` (odd `k`) and bias `[out]` of a same-padded 1D convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams1D {
    kernel: Tensor,
    bias: Tensor,
}

impl ConvParams1D {
    pub fn new(kernel: Tensor, bias: Tensor) -> Result<Self> {
        let ks = kernel.shape();
        if ks.len() != 3 || ks[2] % 2 == 0 {
            return Err(TensorError::shape("ConvParams1D", format!("kernel {ks:?} must be [out, in, odd k]")));
        }
        if bias.shape() != [ks[0]] {
            return Err(TensorError::shape("ConvParams1D", format!("bias {:?} for kernel {ks:?}", bias.shape())));
        }
        Ok(ConvParams1D { kernel, bias })
    }

    pub fn kernel(&self) -> &Tensor {
        &self.kernel
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }
}

/// Same-padded 1D convolution of `[c_in, len]` or `[n, c_in, len]`.
pub fn conv1d(input: &Tensor, params: &ConvParams1D) -> Result<Tensor> {
    let (batch, rest) = split_batch("conv1d", input.shape(), 2)?;
    let ks = params.kernel.shape();
    if rest[0] != ks[1] {
        return Err(TensorError::shape("conv1d", format!("input has {} channels, kernel expects {}", rest[0], ks[1])));
    }
    if rest[1] == 0 {
        return Err(TensorError::shape("conv1d", "empty sequence"));
    }
    let dims = Conv1dDims { batch, in_channels: ks[1], out_channels: ks[0], len: rest[1], kernel: ks[2] };
    let y = conv::conv1d_forward(input.data(), params.kernel.data(), params.bias.data(), dims);
    let mut shape = input.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = ks[0];
    Tensor::new(shape, y)
}

/// Pools `[c, h, w]` (or `[n, c, h, w]`) over the width, keeping a trailing axis of 1.
pub fn pool_width(x: &Tensor, mode: PoolMode) -> Result<Tensor> {
    let (_, rest) = split_batch("pool_width", x.shape(), 3)?;
    if rest[2] == 0 {
        return Err(TensorError::shape("pool_width", "zero width"));
    }
    let (y, _) = resample::pool_rows(x.data(), rest[2], mode);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 3") = 1;
    Tensor::new(shape, y)
}

/// Resamples the height (last axis) of `[c, h]` or `[n, c, h]` to `target` rows.
pub fn resample_height(x: &Tensor, target: usize) -> Result<Tensor> {
    let (_, rest) = split_batch("resample_height", x.shape(), 2)?;
    let h = rest[1];
    if h == 0 || target == 0 {
        return Err(TensorError::invalid("resample_height", format!("{h} rows to {target}")));
    }
    if h == target {
        return Ok(x.clone());
    }
    let outer = x.numel() / h;
    let y = RowMap::resample(h, target).apply(x.data(), outer, 1);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 2") = target;
    Tensor::new(shape, y)
}
