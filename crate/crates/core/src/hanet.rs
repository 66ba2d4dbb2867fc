//! Height-driven attention: pool a lower-level map over its width, compress the
//! row profile to a coarse height, run a three-layer 1D conv stack to per-row
//! channel gates, stretch the gates back to the target height and multiply.
//!
//! The [`Hanet`] methods taking a [`Graph`] operate on batched maps and are what
//! the segmentation network uses; the free functions and [`Hanet::forward`] work
//! on single `[C, H, W]` maps.

use hanet_tensor::{BatchNorm, Conv1d, Graph, Mode, ParamGroup, ParamId, ParamStore, PoolMode, Tensor, Var};
use rand::RngCore;

use crate::error::{CoreError, Result};
use crate::posenc::{self, PeMode, PeTable};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HanetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub coarse_height: usize,
    pub reduction: usize,
    pub pool_mode: PoolMode,
    pub pe_mode: PeMode,
    pub pe_layer: usize,
    pub jitter_max: usize,
    pub dropout_p: f64,
    pub kernel: usize,
}

impl HanetConfig {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        HanetConfig {
            in_channels,
            out_channels,
            coarse_height: 16,
            reduction: 32,
            pool_mode: PoolMode::Avg,
            pe_mode: PeMode::Sinusoidal,
            pe_layer: 2,
            jitter_max: 2,
            dropout_p: 0.1,
            kernel: 3,
        }
    }

    /// Width of the first hidden layer, `C_l / r` rounded down.
    pub fn reduced(&self) -> usize {
        self.in_channels / self.reduction.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CoreError::Config(m));
        if self.in_channels == 0 || self.out_channels == 0 {
            return fail(format!("HANet channels {} -> {}", self.in_channels, self.out_channels));
        }
        if self.reduction == 0 || self.reduced() == 0 {
            return fail(format!(
                "reduction ratio {} leaves no channels from {} inputs",
                self.reduction, self.in_channels
            ));
        }
        if !(1..=3).contains(&self.pe_layer) {
            return fail(format!("pe_layer must be 1, 2 or 3, got {}", self.pe_layer));
        }
        if self.coarse_height == 0 {
            return fail("coarse height must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout probability {} outside [0, 1)", self.dropout_p));
        }
        if self.kernel % 2 == 0 {
            return fail(format!("kernel size {} must be odd", self.kernel));
        }
        Ok(())
    }

    /// Input channels of the conv layer that receives the positional encoding.
    pub fn pe_channels(&self) -> usize {
        match self.pe_layer {
            1 => self.in_channels,
            2 => self.reduced(),
            _ => 2 * self.reduced(),
        }
    }

    /// Trainable scalars of one module: three convs, two affine norms and an
    /// optional learnable table.
    pub fn param_count(&self) -> usize {
        let (k, cl, m, ch) = (self.kernel, self.in_channels, self.reduced(), self.out_channels);
        let convs = (k * cl * m + m) + (k * m * 2 * m + 2 * m) + (k * 2 * m * ch + ch);
        let norms = 2 * m + 2 * (2 * m);
        let table = if self.pe_mode == PeMode::Learnable { self.coarse_height * self.pe_channels() } else { 0 };
        convs + norms + table
    }

    /// Sum of the conv half-widths: how far a change in one coarse row can travel.
    pub fn receptive_radius(&self) -> usize {
        3 * (self.kernel - 1) / 2
    }
}

#[derive(Debug, Clone, PartialEq)]
enum PeSource {
    None,
    Fixed(PeTable),
    Learnable(ParamId),
}

/// Handles of one module's parameters inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Hanet {
    config: HanetConfig,
    pub conv1: Conv1d,
    pub norm1: BatchNorm,
    pub conv2: Conv1d,
    pub norm2: BatchNorm,
    pub conv3: Conv1d,
    pe: PeSource,
}

/// Graph handles produced by one module application.
#[derive(Debug, Clone, Copy)]
pub struct HanetVars {
    pub gated: Var,
    /// `[n, C_h, H_h]`
    pub attention: Var,
    /// `[n, C_h, Ĥ]`
    pub coarse: Var,
}

impl Hanet {
    pub fn new<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: HanetConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let g = ParamGroup::Attention;
        let (cl, m, k) = (config.in_channels, config.reduced(), config.kernel);
        let conv1 = Conv1d::new(store, &format!("{name}.conv1"), g, cl, m, k, rng)?;
        let norm1 = BatchNorm::new(store, &format!("{name}.norm1"), g, m)?;
        let conv2 = Conv1d::new(store, &format!("{name}.conv2"), g, m, 2 * m, k, rng)?;
        let norm2 = BatchNorm::new(store, &format!("{name}.norm2"), g, 2 * m)?;
        let conv3 = Conv1d::new(store, &format!("{name}.conv3"), g, 2 * m, config.out_channels, k, rng)?;
        let pe = match config.pe_mode {
            PeMode::None => PeSource::None,
            PeMode::Sinusoidal => {
                PeSource::Fixed(posenc::sinusoidal_table(config.coarse_height, config.pe_channels())?)
            }
            PeMode::Learnable => {
                let t = Tensor::uniform(vec![config.coarse_height, config.pe_channels()], -0.1, 0.1, rng)?;
                PeSource::Learnable(store.add(format!("{name}.pe"), g, t)?)
            }
        };
        Ok(Hanet { config, conv1, norm1, conv2, norm2, conv3, pe })
    }

    pub fn config(&self) -> &HanetConfig {
        &self.config
    }

    pub fn pe_param(&self) -> Option<ParamId> {
        match self.pe {
            PeSource::Learnable(id) => Some(id),
            _ => None,
        }
    }

    /// Current encoding table, if any.
    pub fn pe_table(&self, store: &ParamStore) -> Option<PeTable> {
        match &self.pe {
            PeSource::None => None,
            PeSource::Fixed(t) => Some(t.clone()),
            PeSource::Learnable(id) => PeTable::learnable(store.get(*id).clone()).ok(),
        }
    }

    /// Sets every conv kernel and bias to zero, making the gates exactly 0.5.
    pub fn zero_convs(&self, store: &mut ParamStore) {
        for conv in [&self.conv1, &self.conv2, &self.conv3] {
            store.get_mut(conv.weight).data_mut().fill(0.0);
            store.get_mut(conv.bias).data_mut().fill(0.0);
        }
    }

    fn inject_pe(&self, g: &mut Graph, store: &ParamStore, q: Var, mode: Mode, rng: &mut dyn RngCore) -> Result<Var> {
        let table = match &self.pe {
            PeSource::None => return Ok(q),
            PeSource::Fixed(t) => g.input(t.values().clone()),
            PeSource::Learnable(id) => g.param(store, *id),
        };
        let (batch, len) = (g.shape(q)[0], g.shape(q)[2]);
        let positions = g.shape(table)[0];
        if len != positions {
            return Err(CoreError::Config(format!(
                "PE table has {positions} rows but the attention stack runs at {len}"
            )));
        }
        let mut index = Vec::with_capacity(batch * len);
        for _ in 0..batch {
            if mode == Mode::Train {
                index.extend(posenc::jitter(len, self.config.jitter_max, rng));
            } else {
                index.extend(posenc::identity_index(len));
            }
        }
        Ok(g.add_positional(q, table, index)?)
    }

    /// Coarse attention `[n, C_h, Ĥ]` from the coarse context `[n, C_l, Ĥ]`.
    pub fn coarse_attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z_hat: Var,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        let s = g.shape(z_hat);
        if s.len() != 3 || s[1] != self.config.in_channels {
            return Err(CoreError::Config(format!(
                "context {s:?} does not match {} input channels",
                self.config.in_channels
            )));
        }
        let pe_at = self.config.pe_layer;
        let mut q = g.dropout(z_hat, self.config.dropout_p, mode, rng)?;
        if pe_at == 1 {
            q = self.inject_pe(g, store, q, mode, rng)?;
        }
        q = g.conv1d(q, &self.conv1, store)?;
        q = g.batch_norm(q, &self.norm1, store, mode)?;
        q = g.relu(q);
        if pe_at == 2 {
            q = self.inject_pe(g, store, q, mode, rng)?;
        }
        q = g.conv1d(q, &self.conv2, store)?;
        q = g.batch_norm(q, &self.norm2, store, mode)?;
        q = g.relu(q);
        if pe_at == 3 {
            q = self.inject_pe(g, store, q, mode, rng)?;
        }
        q = g.conv1d(q, &self.conv3, store)?;
        Ok(g.sigmoid(q))
    }

    /// Gates `x_h: [n, C_h, H_h, W_h]` with attention derived from `x_l: [n, C_l, H_l, W_l]`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_l: Var,
        x_h: Var,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<HanetVars> {
        let (ls, hs) = (g.shape(x_l).to_vec(), g.shape(x_h).to_vec());
        let c = &self.config;
        if ls.len() != 4 || hs.len() != 4 || ls[0] != hs[0] || ls[1] != c.in_channels || hs[1] != c.out_channels {
            return Err(CoreError::Config(format!(
                "HANet {}->{} cannot take x_l {ls:?} and x_h {hs:?}",
                c.in_channels, c.out_channels
            )));
        }
        check_coarse(ls[2], c.coarse_height)?;
        check_expand(c.coarse_height, hs[2])?;
        let z = g.pool_width(x_l, c.pool_mode)?;
        let z_hat = g.resample_axis(z, 2, c.coarse_height)?;
        let coarse = self.coarse_attention(g, store, z_hat, mode, rng)?;
        let attention = g.resample_axis(coarse, 2, hs[2])?;
        let gated = g.gate_rows(attention, x_h)?;
        Ok(HanetVars { gated, attention, coarse })
    }

    /// Coarse attention `[C_h, Ĥ]` for a single context matrix `[C_l, Ĥ]`.
    pub fn attention_from_context(
        &self,
        store: &ParamStore,
        z_hat: &Tensor,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<Tensor> {
        let s = z_hat.shape().to_vec();
        if s.len() != 2 {
            return Err(CoreError::Config(format!("context must be [C, Ĥ], got {s:?}")));
        }
        let mut g = Graph::new();
        let z = g.input(z_hat.clone().reshape(vec![1, s[0], s[1]])?);
        let a = self.coarse_attention(&mut g, store, z, mode, rng)?;
        let out = g.value(a).clone();
        let h = out.shape()[2];
        Ok(out.reshape(vec![self.config.out_channels, h])?)
    }

    /// Returns the gated map `[C_h, H_h, W_h]` and the attention map `[C_h, H_h]`.
    ///
    /// Running statistics are not updated; training goes through [`Hanet::forward_graph`].
    pub fn forward(
        &self,
        store: &ParamStore,
        x_l: &Tensor,
        x_h: &Tensor,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let l = g.input(batch_one(x_l)?);
        let h = g.input(batch_one(x_h)?);
        let out = self.forward_graph(&mut g, store, l, h, mode, rng)?;
        let gated = g.value(out.gated).clone();
        let a = g.value(out.attention).clone();
        let (gs, as_) = (gated.shape()[1..].to_vec(), a.shape()[1..].to_vec());
        Ok((gated.reshape(gs)?, a.reshape(as_)?))
    }
}

fn batch_one(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(CoreError::Config(format!("feature map must be [C, H, W], got {:?}", x.shape())));
    }
    let mut s = vec![1];
    s.extend_from_slice(x.shape());
    Ok(x.clone().reshape(s)?)
}

fn check_coarse(height: usize, coarse: usize) -> Result<()> {
    if coarse > height {
        return Err(CoreError::Config(format!("coarse height {coarse} exceeds feature height {height}")));
    }
    Ok(())
}

fn check_expand(coarse: usize, target: usize) -> Result<()> {
    if target < coarse {
        return Err(CoreError::Config(format!("attention of height {coarse} cannot expand to {target}")));
    }
    Ok(())
}

/// Row context `Z: [C, H]` of a `[C, H, W]` map.
pub fn width_pool(x_l: &Tensor, mode: PoolMode) -> Result<Tensor> {
    let p = hanet_tensor::pool_width(x_l, mode)?;
    let s = p.shape()[..p.rank() - 1].to_vec();
    Ok(p.reshape(s)?)
}

/// Adaptive-average compression of `Z: [C, H]` to `[C, Ĥ]`.
pub fn coarsen(z: &Tensor, coarse_height: usize) -> Result<Tensor> {
    if z.rank() != 2 {
        return Err(CoreError::Config(format!("context must be [C, H], got {:?}", z.shape())));
    }
    check_coarse(z.shape()[1], coarse_height)?;
    Ok(hanet_tensor::resample_height(z, coarse_height)?)
}

/// Linear stretch of coarse attention `[C, Ĥ]` to `[C, H_h]`.
pub fn expand_attention(a_hat: &Tensor, height: usize) -> Result<Tensor> {
    if a_hat.rank() != 2 {
        return Err(CoreError::Config(format!("attention must be [C, Ĥ], got {:?}", a_hat.shape())));
    }
    check_expand(a_hat.shape()[1], height)?;
    Ok(hanet_tensor::resample_height(a_hat, height)?)
}

/// `out[c, h, w] = a[c, h] * x_h[c, h, w]`.
pub fn apply(a: &Tensor, x_h: &Tensor) -> Result<Tensor> {
    let (as_, xs) = (a.shape(), x_h.shape());
    if as_.len() != 2 || xs.len() != 3 || as_[..] != xs[..2] {
        return Err(CoreError::Config(format!("attention {as_:?} does not fit features {xs:?}")));
    }
    let w = xs[2];
    let mut out = x_h.clone();
    for (row, &s) in out.data_mut().chunks_mut(w).zip(a.data()) {
        row.iter_mut().for_each(|v| *v *= s);
    }
    Ok(out)
}

pub fn parse_pool_mode(s: &str) -> Result<PoolMode> {
    match s {
        "avg" => Ok(PoolMode::Avg),
        "max" => Ok(PoolMode::Max),
        other => Err(CoreError::Config(format!("unknown pool_mode {other:?} (avg|max)"))),
    }
}

pub fn pool_mode_name(mode: PoolMode) -> &'static str {
    match mode {
        PoolMode::Avg => "avg",
        PoolMode::Max => "max",
    }
}
