//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation evaluates eagerly, stores its output on the tape together with
//! whatever the backward pass needs, and returns a [`Var`] handle. Calling
//! [`Graph::backward`] on a scalar walks the tape once in reverse.
//!
//! Batched layouts are channels-first: sequences are `[n, c, len]`, images
//! `[n, c, h, w]`.

use std::collections::HashMap;

use rand::RngCore;

use crate::error::{Result, TensorError};
use crate::kernels::conv::{self, Conv1dDims, Conv2dDims};
use crate::kernels::nn::{self, NormDims};
use crate::kernels::resample::{self, PoolMode, RowMap};
use crate::layers::{BatchNorm, Conv1d, Conv2d};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

/// Pending running-statistics update produced by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct StatUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub new_mean: Vec<f64>,
    pub new_var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d { x: Var, w: Var, b: Var, dims: Conv1dDims },
    Conv2d { x: Var, w: Var, b: Option<Var>, dims: Conv2dDims, cols: Vec<f64> },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    GateRows { gate: Var, x: Var, width: usize },
    AddPositional { q: Var, table: Var, channels: usize, len: usize, index: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool, dims: NormDims },
    Dropout { x: Var, mask: Vec<f64> },
    PoolWidth { x: Var, width: usize, argmax: Option<Vec<usize>> },
    Resample { x: Var, map: RowMap, outer: usize, inner: usize },
    Concat { parts: Vec<(Var, usize)>, batch: usize, spatial: usize },
    CrossEntropy { logits: Var, grad: Vec<f64> },
    Mse { x: Var, target: Vec<f64> },
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    stat_updates: Vec<StatUpdate>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter as a leaf. Repeated binds return the same handle.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let entry = store.entry(id);
        let mut value = entry.value.clone();
        value.clear_grad();
        let v = self.push(value, Op::Leaf, entry.group.is_trainable());
        self.nodes[v.0].param = Some(id);
        self.bound.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn stat_updates(&self) -> &[StatUpdate] {
        &self.stat_updates
    }

    /// Writes pending running statistics into the store.
    pub fn apply_stat_updates(&self, store: &mut ParamStore) -> Result<()> {
        for u in &self.stat_updates {
            store.set_data(u.mean, &u.new_mean)?;
            store.set_data(u.var, &u.new_var)?;
        }
        Ok(())
    }

    // ---- operations -------------------------------------------------------------

    pub fn conv1d(&mut self, x: Var, layer: &Conv1d, store: &ParamStore) -> Result<Var> {
        let w = self.param(store, layer.weight);
        let b = self.param(store, layer.bias);
        self.conv1d_with(x, w, b)
    }

    /// 1D convolution with explicit weight `[c_out, c_in, k]` and bias `[c_out]`.
    pub fn conv1d_with(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 3 || ws.len() != 3 {
            return Err(shape_err("conv1d", format!("input {xs:?}, kernel {ws:?}")));
        }
        let dims = Conv1dDims { batch: xs[0], in_channels: xs[1], len: xs[2], out_channels: ws[0], kernel: ws[2] };
        if ws[1] != dims.in_channels || self.value(b).numel() != dims.out_channels || dims.kernel % 2 == 0 {
            return Err(shape_err(
                "conv1d",
                format!("input {xs:?} incompatible with kernel {ws:?} / bias {:?}", self.shape(b)),
            ));
        }
        let y = conv::conv1d_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), dims);
        let t = Tensor::new(vec![dims.batch, dims.out_channels, dims.len], y)?;
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(t, Op::Conv1d { x, w, b, dims }, ng))
    }

    pub fn conv2d(&mut self, x: Var, layer: &Conv2d, store: &ParamStore) -> Result<Var> {
        let w = self.param(store, layer.weight);
        let b = layer.bias.map(|id| self.param(store, id));
        self.conv2d_with(x, w, b, layer.stride, layer.padding, layer.dilation)
    }

    /// 2D convolution with explicit weight `[c_out, c_in, k, k]` and optional bias.
    pub fn conv2d_with(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || stride == 0 || dilation == 0 {
            return Err(shape_err("conv2d", format!("input {xs:?}, kernel {ws:?}")));
        }
        if b.is_some_and(|b| self.value(b).numel() != ws[0]) {
            return Err(shape_err("conv2d", format!("bias does not match kernel {ws:?}")));
        }
        let dims = Conv2dDims {
            batch: xs[0],
            in_channels: xs[1],
            out_channels: ws[0],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            stride,
            padding,
            dilation,
        };
        let (ho, wo) = (dims.out_height(), dims.out_width());
        if ho == 0 || wo == 0 {
            return Err(shape_err("conv2d", format!("input {xs:?} too small for kernel")));
        }
        let bias = b.map(|b| self.value(b).data().to_vec());
        let (y, cols) = conv::conv2d_forward(self.value(x).data(), self.value(w).data(), bias.as_deref(), dims);
        let t = Tensor::new(vec![dims.batch, dims.out_channels, ho, wo], y)?;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let cols = if ng { cols } else { Vec::new() };
        Ok(self.push(t, Op::Conv2d { x, w, b, dims, cols }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let y = Tensor::new(t.shape().to_vec(), nn::relu(t.data())).expect("same shape");
        let ng = self.needs(x);
        self.push(y, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let y = Tensor::new(t.shape().to_vec(), nn::sigmoid(t.data())).expect("same shape");
        let ng = self.needs(x);
        self.push(y, Op::Sigmoid(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    /// `y[n,c,h,w] = gate[n,c,h] * x[n,c,h,w]`: one scaling factor per channel and row,
    /// shared across the width.
    pub fn gate_rows(&mut self, gate: Var, x: Var) -> Result<Var> {
        let gs = self.shape(gate).to_vec();
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || gs.len() != 3 || gs[..] != xs[..3] {
            return Err(shape_err("gate_rows", format!("gate {gs:?} vs features {xs:?}")));
        }
        let width = xs[3];
        let g = self.value(gate).data();
        let mut data = self.value(x).data().to_vec();
        for (row, &a) in data.chunks_mut(width).zip(g) {
            row.iter_mut().for_each(|v| *v *= a);
        }
        let t = Tensor::new(xs, data)?;
        let ng = self.needs(gate) || self.needs(x);
        Ok(self.push(t, Op::GateRows { gate, x, width }, ng))
    }

    /// `y[n,c,p] = q[n,c,p] + table[index[n*len + p], c]` for `q: [n, c, len]` and
    /// `table: [positions, c]`.
    pub fn add_positional(&mut self, q: Var, table: Var, index: Vec<usize>) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        let ts = self.shape(table).to_vec();
        if qs.len() != 3 || ts.len() != 2 || ts[1] != qs[1] {
            return Err(shape_err("add_positional", format!("features {qs:?} vs table {ts:?}")));
        }
        let (batch, channels, len) = (qs[0], qs[1], qs[2]);
        if index.len() != batch * len || index.iter().any(|&i| i >= ts[0]) {
            return Err(shape_err(
                "add_positional",
                format!("index of length {} out of range for {ts:?}", index.len()),
            ));
        }
        let tab = self.value(table).data();
        let mut data = self.value(q).data().to_vec();
        for n in 0..batch {
            for c in 0..channels {
                for p in 0..len {
                    data[(n * channels + c) * len + p] += tab[index[n * len + p] * channels + c];
                }
            }
        }
        let t = Tensor::new(qs, data)?;
        let ng = self.needs(q) || self.needs(table);
        Ok(self.push(t, Op::AddPositional { q, table, channels, len, index }, ng))
    }

    /// Batch norm over every axis except the channel axis (axis 1).
    pub fn batch_norm(&mut self, x: Var, layer: &BatchNorm, store: &ParamStore, mode: Mode) -> Result<Var> {
        let gamma = self.param(store, layer.gamma);
        let beta = self.param(store, layer.beta);
        self.batch_norm_with(x, gamma, beta, layer, store, mode)
    }

    /// Batch norm with explicit affine parameters; `layer` supplies the running
    /// statistics, `eps` and `momentum`.
    pub fn batch_norm_with(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        layer: &BatchNorm,
        store: &ParamStore,
        mode: Mode,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || xs[1] != layer.channels {
            return Err(shape_err("batch_norm", format!("input {xs:?} for {} channels", layer.channels)));
        }
        let dims = NormDims { batch: xs[0], channels: xs[1], spatial: xs[2..].iter().product() };
        let batch_stats = mode == Mode::Train;
        let (mean, var) = if batch_stats {
            let (mean, var) = nn::channel_moments(self.value(x).data(), dims);
            let m = (dims.batch * dims.spatial) as f64;
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            let mom = layer.momentum;
            let old_mean = store.get(layer.running_mean).data();
            let old_var = store.get(layer.running_var).data();
            self.stat_updates.push(StatUpdate {
                mean: layer.running_mean,
                var: layer.running_var,
                new_mean: old_mean.iter().zip(&mean).map(|(o, b)| (1.0 - mom) * o + mom * b).collect(),
                new_var: old_var.iter().zip(&var).map(|(o, b)| (1.0 - mom) * o + mom * b * unbias).collect(),
            });
            (mean, var)
        } else {
            (store.get(layer.running_mean).data().to_vec(), store.get(layer.running_var).data().to_vec())
        };
        let (y, xhat, inv_std) = nn::batch_norm_apply(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            &mean,
            &var,
            layer.eps,
            dims,
        );
        let t = Tensor::new(xs, y)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(t, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats, dims }, ng))
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, mode: Mode, rng: &mut dyn RngCore) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::invalid("dropout", format!("probability {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let mask = nn::dropout_mask(self.value(x).numel(), p, rng);
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let y = Tensor::new(t.shape().to_vec(), data)?;
        let ng = self.needs(x);
        Ok(self.push(y, Op::Dropout { x, mask }, ng))
    }

    /// `[n, c, h, w] -> [n, c, h]` by averaging or maximizing over the width.
    pub fn pool_width(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[3] == 0 {
            return Err(shape_err("pool_width", format!("expected [n, c, h, w>0], got {xs:?}")));
        }
        let width = xs[3];
        let (y, argmax) = resample::pool_rows(self.value(x).data(), width, mode);
        let t = Tensor::new(xs[..3].to_vec(), y)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::PoolWidth { x, width, argmax }, ng))
    }

    /// Resamples axis `axis` to `target` positions (adaptive average when shrinking,
    /// linear when growing).
    pub fn resample_axis(&mut self, x: Var, axis: usize, target: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || target == 0 || xs[axis] == 0 {
            return Err(shape_err("resample", format!("axis {axis} of {xs:?} to {target}")));
        }
        if xs[axis] == target {
            return Ok(x);
        }
        let map = RowMap::resample(xs[axis], target);
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let y = map.apply(self.value(x).data(), outer, inner);
        let mut shape = xs;
        shape[axis] = target;
        let t = Tensor::new(shape, y)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Resample { x, map, outer, inner }, ng))
    }

    /// Bilinear resize of `[n, c, h, w]` maps, separable over height then width.
    pub fn resize(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let h = self.resample_axis(x, 2, height)?;
        self.resample_axis(h, 3, width)
    }

    /// Concatenates `[n, c_i, ...]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?).to_vec();
        let batch = first[0];
        let spatial_shape = first[2..].to_vec();
        let mut list = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != batch || s[2..] != spatial_shape[..] {
                return Err(shape_err("concat", format!("{s:?} vs {first:?}")));
            }
            list.push((p, s[1]));
        }
        let spatial: usize = spatial_shape.iter().product();
        let total: usize = list.iter().map(|&(_, c)| c).sum();
        let mut data = Vec::with_capacity(batch * total * spatial);
        for n in 0..batch {
            for &(p, c) in &list {
                data.extend_from_slice(&self.value(p).data()[n * c * spatial..][..c * spatial]);
            }
        }
        let mut shape = first;
        shape[1] = total;
        let t = Tensor::new(shape, data)?;
        let ng = list.iter().any(|&(p, _)| self.needs(p));
        Ok(self.push(t, Op::Concat { parts: list, batch, spatial }, ng))
    }

    /// Mean softmax cross-entropy of `[n, k, h, w]` logits against `[n, h, w]` labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8], ignore: u8) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 4 {
            return Err(shape_err("cross_entropy", format!("logits {s:?}")));
        }
        let pixels = s[2] * s[3];
        if labels.len() != s[0] * pixels {
            return Err(shape_err("cross_entropy", format!("{} labels for logits {s:?}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != ignore && l as usize >= s[1]) {
            return Err(TensorError::invalid("cross_entropy", format!("label {bad} with {} classes", s[1])));
        }
        let (loss, grad, _) = nn::softmax_cross_entropy(self.value(logits).data(), labels, s[0], s[1], pixels, ignore);
        let ng = self.needs(logits);
        Ok(self.push(Tensor::new(vec![1], vec![loss])?, Op::CrossEntropy { logits, grad }, ng))
    }

    /// `mean((x - target)^2)`.
    pub fn mse(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        if self.shape(x) != target.shape() {
            return Err(shape_err("mse", format!("{:?} vs {:?}", self.shape(x), target.shape())));
        }
        let d = self.value(x).data();
        let loss = d.iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d.len() as f64;
        let ng = self.needs(x);
        Ok(self.push(Tensor::new(vec![1], vec![loss])?, Op::Mse { x, target: target.data().to_vec() }, ng))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.value(x).data();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let ng = self.needs(x);
        self.push(Tensor::new(vec![1], vec![m]).expect("scalar"), Op::Mean(x), ng)
    }

    // ---- backward ---------------------------------------------------------------

    /// Reverse sweep from a scalar node. Gradients of earlier sweeps are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(shape_err("backward", format!("loss must be scalar, got {:?}", lv.shape())));
        }
        if !lv.is_finite() {
            return Err(TensorError::NonFinite(format!("loss = {}", lv.data()[0])));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradients of all bound parameters into their store entries.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        for (&id, &v) in &self.bound {
            if let Some(g) = self.grad(v) {
                store.get_mut(id).accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, gv: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&gv).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(gv),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d { x, w, b, dims } => {
                let (gx, gw, gb) =
                    conv::conv1d_backward(self.value(*x).data(), self.value(*w).data(), g, *dims, self.needs(*x));
                if let Some(gx) = gx {
                    send(*x, gx);
                }
                send(*w, gw);
                send(*b, gb);
            }
            Op::Conv2d { x, w, b, dims, cols } => {
                let (gx, gw, gb) = conv::conv2d_backward(cols, self.value(*w).data(), g, *dims, self.needs(*x));
                if let Some(gx) = gx {
                    send(*x, gx);
                }
                send(*w, gw);
                if let Some(b) = b {
                    send(*b, gb);
                }
            }
            Op::Relu(x) => send(*x, nn::relu_backward(self.value(*x).data(), g)),
            Op::Sigmoid(x) => send(*x, nn::sigmoid_backward(node.value.data(), g)),
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::GateRows { gate, x, width } => {
                let gd = self.value(*gate).data();
                let xd = self.value(*x).data();
                if self.needs(*gate) {
                    let gg = g
                        .chunks(*width)
                        .zip(xd.chunks(*width))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>());
                    send(*gate, gg.collect());
                }
                if self.needs(*x) {
                    let mut gx = g.to_vec();
                    for (row, &a) in gx.chunks_mut(*width).zip(gd) {
                        row.iter_mut().for_each(|v| *v *= a);
                    }
                    send(*x, gx);
                }
            }
            Op::AddPositional { q, table, channels, len, index } => {
                send(*q, g.to_vec());
                if self.needs(*table) {
                    let mut gt = vec![0.0; self.value(*table).numel()];
                    let batch = index.len() / len;
                    for n in 0..batch {
                        for c in 0..*channels {
                            for p in 0..*len {
                                gt[index[n * len + p] * channels + c] += g[(n * channels + c) * len + p];
                            }
                        }
                    }
                    send(*table, gt);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats, dims } => {
                let (gx, gg, gb) =
                    nn::batch_norm_backward(g, xhat, self.value(*gamma).data(), inv_std, *batch_stats, *dims);
                send(*x, gx);
                send(*gamma, gg);
                send(*beta, gb);
            }
            Op::Dropout { x, mask } => send(*x, g.iter().zip(mask).map(|(a, m)| a * m).collect()),
            Op::PoolWidth { x, width, argmax } => send(*x, resample::pool_rows_backward(g, *width, argmax.as_deref())),
            Op::Resample { x, map, outer, inner } => send(*x, map.apply_transpose(g, *outer, *inner)),
            Op::Concat { parts, batch, spatial } => {
                let total: usize = parts.iter().map(|&(_, c)| c).sum();
                let mut offset = 0;
                for &(p, c) in parts {
                    let mut gp = Vec::with_capacity(batch * c * spatial);
                    for n in 0..*batch {
                        gp.extend_from_slice(&g[(n * total + offset) * spatial..][..c * spatial]);
                    }
                    send(p, gp);
                    offset += c;
                }
            }
            Op::CrossEntropy { logits, grad } => send(*logits, grad.iter().map(|v| v * g[0]).collect()),
            Op::Mse { x, target } => {
                let d = self.value(*x).data();
                let k = 2.0 * g[0] / d.len() as f64;
                send(*x, d.iter().zip(target).map(|(a, b)| k * (a - b)).collect());
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                send(*x, vec![g[0] / n as f64; n]);
            }
        }
    }
}
