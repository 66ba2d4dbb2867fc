//! Parameter handles for the layers the tape knows how to run.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

/// He-style uniform bound for a layer with `fan_in` inputs per output.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Same-padded 1D convolution: kernel `[out, in, k]` with odd `k`, bias `[out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel % 2 == 0 || in_channels == 0 || out_channels == 0 {
            return Err(TensorError::invalid(
                "Conv1d::new",
                format!("{name}: need odd kernel and nonzero channels, got {in_channels}->{out_channels} k={kernel}"),
            ));
        }
        let bound = fan_in_bound(in_channels * kernel);
        let w = Tensor::uniform(vec![out_channels, in_channels, kernel], -bound, bound, rng)?;
        let weight = store.add(format!("{name}.weight"), group, w)?;
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(vec![out_channels])?)?;
        Ok(Conv1d { weight, bias, in_channels, out_channels, kernel })
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel + self.out_channels
    }
}

/// Square-kernel 2D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub bias: bool,
}

impl Conv2dSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Conv2dSpec { in_channels, out_channels, kernel, stride: 1, dilation: 1, bias: true }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

impl Conv2d {
    /// Padding is chosen so stride-1 convolutions preserve the spatial size.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        spec: Conv2dSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let Conv2dSpec { in_channels, out_channels, kernel, stride, dilation, bias } = spec;
        if kernel % 2 == 0 || stride == 0 || dilation == 0 || in_channels == 0 || out_channels == 0 {
            return Err(TensorError::invalid("Conv2d::new", format!("{name}: invalid spec {spec:?}")));
        }
        let bound = fan_in_bound(in_channels * kernel * kernel);
        let w = Tensor::uniform(vec![out_channels, in_channels, kernel, kernel], -bound, bound, rng)?;
        let weight = store.add(format!("{name}.weight"), group, w)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), group, Tensor::zeros(vec![out_channels])?)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        })
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
            + if self.bias.is_some() { self.out_channels } else { 0 }
    }
}

/// Batch normalization with affine parameters (initialized to identity) and running
/// statistics stored as buffers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.add(format!("{name}.gamma"), group, Tensor::full(vec![channels], 1.0)?)?,
            beta: store.add(format!("{name}.beta"), group, Tensor::zeros(vec![channels])?)?,
            running_mean: store.add(
                format!("{name}.running_mean"),
                ParamGroup::Buffer,
                Tensor::zeros(vec![channels])?,
            )?,
            running_var: store.add(
                format!("{name}.running_var"),
                ParamGroup::Buffer,
                Tensor::full(vec![channels], 1.0)?,
            )?,
            channels,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    /// Trainable scalars only.
    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}
