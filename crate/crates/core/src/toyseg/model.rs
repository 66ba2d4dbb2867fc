//! Small encoder-decoder segmenter with five optional attention attachment points.
//!
//! ```text
//! image ─ e1 (s2) ─┬─ e2 (s2) ─ e3 ─[L1]─ context {d1,d2,d4} ─ proj ─[L2]─┐
//!                  │                                                      up x2
//!                  └──────────────────── skip ───────────────────── concat ─ d1 ─[L3]─ d2 ─[L4]─ cls ─[L5]─ resize
//! ```
//!
//! Each attachment gates one map using a lower-level map as context: L1 gates the
//! encoder output with itself, L2 the context block with the encoder output, L3 the
//! fused decoder map with the context block, L4 the pre-classifier map with the fused
//! map, L5 the logits with the pre-classifier map.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use hanet_tensor::{BatchNorm, Conv2d, Conv2dSpec, Graph, Mode, ParamGroup, ParamStore, Tensor, Var};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::hanet::{self, Hanet, HanetConfig};
use crate::kv;
use crate::posenc::PeMode;

/// Total downsampling of the encoder.
pub const STRIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Layer {
    L1,
    L2,
    L3,
    L4,
    L5,
}

impl Layer {
    pub const ALL: [Layer; 5] = [Layer::L1, Layer::L2, Layer::L3, Layer::L4, Layer::L5];

    fn key(self) -> &'static str {
        match self {
            Layer::L1 => "l1",
            Layer::L2 => "l2",
            Layer::L3 => "l3",
            Layer::L4 => "l4",
            Layer::L5 => "l5",
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self)
    }
}

impl FromStr for Layer {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Layer::ALL
            .into_iter()
            .find(|l| l.key().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| CoreError::Config(format!("unknown layer {s:?} (L1..L5)")))
    }
}

/// `"none"`, `"L1,L3"` or a range such as `"L1-L4"`.
pub fn parse_layers(s: &str) -> Result<BTreeSet<Layer>> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("none") {
        return Ok(BTreeSet::new());
    }
    let mut out = BTreeSet::new();
    for part in s.split(',') {
        if let Some((a, b)) = part.split_once('-') {
            let (a, b): (Layer, Layer) = (a.parse()?, b.parse()?);
            out.extend(Layer::ALL.into_iter().filter(|l| (a..=b).contains(l)));
        } else {
            out.insert(part.parse()?);
        }
    }
    Ok(out)
}

pub fn format_layers(layers: &BTreeSet<Layer>) -> String {
    if layers.is_empty() {
        "none".into()
    } else {
        layers.iter().map(Layer::to_string).collect::<Vec<_>>().join(",")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionInit {
    #[default]
    FanIn,
    /// Zero attention convs: every gate starts at exactly 0.5.
    Zero,
}

impl FromStr for AttentionInit {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fan_in" => Ok(AttentionInit::FanIn),
            "zero" => Ok(AttentionInit::Zero),
            other => Err(CoreError::Config(format!("unknown attention_init {other:?} (fan_in|zero)"))),
        }
    }
}

impl fmt::Display for AttentionInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionInit::FanIn => "fan_in",
            AttentionInit::Zero => "zero",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySegConfig {
    pub in_channels: usize,
    /// Stem, encoder and decoder widths.
    pub widths: [usize; 3],
    pub num_classes: usize,
    pub hanet_layers: BTreeSet<Layer>,
    /// Shared attention settings; channel counts are set per attachment point.
    pub hanet: HanetConfig,
    pub attention_init: AttentionInit,
    pub seed: u64,
}

impl Default for ToySegConfig {
    fn default() -> Self {
        let mut hanet = HanetConfig::new(0, 0);
        hanet.reduction = 4;
        ToySegConfig {
            in_channels: 3,
            widths: [8, 16, 16],
            num_classes: 6,
            hanet_layers: parse_layers("L1-L4").expect("valid"),
            hanet,
            attention_init: AttentionInit::FanIn,
            seed: 0,
        }
    }
}

pub const MODEL_KEYS: &[&str] = &[
    "in_channels",
    "widths",
    "num_classes",
    "hanet_layers",
    "coarse_height",
    "reduction",
    "pool_mode",
    "pe_mode",
    "pe_layer",
    "jitter_max",
    "dropout_p",
    "kernel",
    "attention_init",
    "seed",
];

impl ToySegConfig {
    /// `(context, gated)` channels of the module at `layer`.
    pub fn attachment_channels(&self, layer: Layer) -> (usize, usize) {
        let [_, enc, dec] = self.widths;
        match layer {
            Layer::L1 | Layer::L2 => (enc, enc),
            Layer::L3 => (enc, dec),
            Layer::L4 => (dec, dec),
            Layer::L5 => (dec, self.num_classes),
        }
    }

    pub fn hanet_config(&self, layer: Layer) -> HanetConfig {
        let (cl, ch) = self.attachment_channels(layer);
        HanetConfig { in_channels: cl, out_channels: ch, ..self.hanet }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.widths.contains(&0) {
            return Err(CoreError::Config(format!("widths {:?} and input channels must be positive", self.widths)));
        }
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(CoreError::Config(format!("num_classes {} outside 2..=255", self.num_classes)));
        }
        for &l in &self.hanet_layers {
            self.hanet_config(l).validate().map_err(|e| CoreError::Config(format!("{l}: {e}")))?;
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let h = &self.hanet;
        vec![
            ("in_channels", self.in_channels.to_string()),
            ("widths", self.widths.map(|w| w.to_string()).join(",")),
            ("num_classes", self.num_classes.to_string()),
            ("hanet_layers", format_layers(&self.hanet_layers)),
            ("coarse_height", h.coarse_height.to_string()),
            ("reduction", h.reduction.to_string()),
            ("pool_mode", hanet::pool_mode_name(h.pool_mode).into()),
            ("pe_mode", h.pe_mode.to_string()),
            ("pe_layer", h.pe_layer.to_string()),
            ("jitter_max", h.jitter_max.to_string()),
            ("dropout_p", h.dropout_p.to_string()),
            ("kernel", h.kernel.to_string()),
            ("attention_init", self.attention_init.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        kv::render(self.to_pairs())
    }

    /// Reads the model keys of `map`, ignoring others.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let d = ToySegConfig::default();
        let widths = match map.get("widths") {
            None => d.widths,
            Some(s) => {
                let v = s
                    .split(',')
                    .map(|t| t.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| CoreError::Config(format!("widths = {s:?}: {e}")))?;
                v.try_into().map_err(|_| CoreError::Config(format!("widths = {s:?}: need three values")))?
            }
        };
        let hanet_layers = match map.get("hanet_layers") {
            None => d.hanet_layers,
            Some(s) => parse_layers(s)?,
        };
        let pool_mode = match map.get("pool_mode") {
            None => d.hanet.pool_mode,
            Some(s) => hanet::parse_pool_mode(s)?,
        };
        let hanet = HanetConfig {
            coarse_height: kv::get(map, "coarse_height", d.hanet.coarse_height)?,
            reduction: kv::get(map, "reduction", d.hanet.reduction)?,
            pool_mode,
            pe_mode: kv::get::<PeMode>(map, "pe_mode", d.hanet.pe_mode)?,
            pe_layer: kv::get(map, "pe_layer", d.hanet.pe_layer)?,
            jitter_max: kv::get(map, "jitter_max", d.hanet.jitter_max)?,
            dropout_p: kv::get(map, "dropout_p", d.hanet.dropout_p)?,
            kernel: kv::get(map, "kernel", d.hanet.kernel)?,
            ..d.hanet
        };
        let cfg = ToySegConfig {
            in_channels: kv::get(map, "in_channels", d.in_channels)?,
            widths,
            num_classes: kv::get(map, "num_classes", d.num_classes)?,
            hanet_layers,
            hanet,
            attention_init: kv::get(map, "attention_init", d.attention_init)?,
            seed: kv::get(map, "seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let map = kv::parse(text)?;
        kv::reject_unknown(&map, MODEL_KEYS)?;
        Self::from_map(&map)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    conv: Conv2d,
    norm: BatchNorm,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, spec: Conv2dSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let conv = Conv2d::new(store, &format!("{name}.conv"), ParamGroup::Main, spec.no_bias(), rng)?;
        let norm = BatchNorm::new(store, &format!("{name}.norm"), ParamGroup::Main, spec.out_channels)?;
        Ok(Block { conv, norm })
    }

    fn run(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let y = g.conv2d(x, &self.conv, store)?;
        let y = g.batch_norm(y, &self.norm, store, mode)?;
        Ok(g.relu(y))
    }
}

/// Parameters live in [`ToySeg::store`]; the struct itself only holds handles.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySeg {
    config: ToySegConfig,
    pub store: ParamStore,
    e1: Block,
    e2: Block,
    e3: Block,
    branches: [Block; 3],
    proj: Block,
    d1: Block,
    d2: Block,
    cls: Conv2d,
    hanets: BTreeMap<Layer, Hanet>,
}

/// Graph handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[n, classes, H, W]`
    pub logits: Var,
    /// `[n, C_h, H_h]` per attached layer.
    pub attention: BTreeMap<Layer, Var>,
}

impl ToySeg {
    pub fn build(config: ToySegConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(kv::derive_seed(config.seed, "init"));
        let mut store = ParamStore::new();
        let [w0, w1, wd] = config.widths;
        let c3 = |i, o| Conv2dSpec::new(i, o, 3);
        let e1 = Block::new(&mut store, "enc1", c3(config.in_channels, w0).stride(2), &mut rng)?;
        let e2 = Block::new(&mut store, "enc2", c3(w0, w1).stride(2), &mut rng)?;
        let e3 = Block::new(&mut store, "enc3", c3(w1, w1), &mut rng)?;
        let branches = [
            Block::new(&mut store, "ctx.d1", c3(w1, w1), &mut rng)?,
            Block::new(&mut store, "ctx.d2", c3(w1, w1).dilation(2), &mut rng)?,
            Block::new(&mut store, "ctx.d4", c3(w1, w1).dilation(4), &mut rng)?,
        ];
        let proj = Block::new(&mut store, "ctx.proj", Conv2dSpec::new(3 * w1, w1, 1), &mut rng)?;
        let d1 = Block::new(&mut store, "dec1", c3(w1 + w0, wd), &mut rng)?;
        let d2 = Block::new(&mut store, "dec2", c3(wd, wd), &mut rng)?;
        let cls =
            Conv2d::new(&mut store, "cls", ParamGroup::Main, Conv2dSpec::new(wd, config.num_classes, 1), &mut rng)?;
        let mut hanets = BTreeMap::new();
        for &l in &config.hanet_layers {
            let h = Hanet::new(&mut store, &format!("hanet.{}", l.key()), config.hanet_config(l), &mut rng)?;
            if config.attention_init == AttentionInit::Zero {
                h.zero_convs(&mut store);
            }
            hanets.insert(l, h);
        }
        Ok(ToySeg { config, store, e1, e2, e3, branches, proj, d1, d2, cls, hanets })
    }

    pub fn config(&self) -> &ToySegConfig {
        &self.config
    }

    pub fn hanet(&self, layer: Layer) -> Option<&Hanet> {
        self.hanets.get(&layer)
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Heights divisible by the encoder stride whose context rows cover the coarse height.
    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        if height % STRIDE != 0 || width % STRIDE != 0 || height == 0 || width == 0 {
            return Err(CoreError::Config(format!("input {height}x{width} must be a positive multiple of {STRIDE}")));
        }
        if !self.hanets.is_empty() && height / STRIDE < self.config.hanet.coarse_height {
            return Err(CoreError::Config(format!(
                "input height {height} gives {} context rows, fewer than coarse height {}",
                height / STRIDE,
                self.config.hanet.coarse_height
            )));
        }
        Ok(())
    }

    fn attach(
        &self,
        layer: Layer,
        g: &mut Graph,
        x_l: Var,
        x_h: Var,
        mode: Mode,
        rng: &mut dyn RngCore,
        maps: &mut BTreeMap<Layer, Var>,
    ) -> Result<Var> {
        match self.hanets.get(&layer) {
            None => Ok(x_h),
            Some(h) => {
                let out = h.forward_graph(g, &self.store, x_l, x_h, mode, rng)?;
                maps.insert(layer, out.attention);
                Ok(out.gated)
            }
        }
    }

    /// Logits `[n, classes, H, W]` for normalized images `x: [n, in_channels, H, W]`.
    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode, rng: &mut dyn RngCore) -> Result<ForwardOutput> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(CoreError::Config(format!("input {s:?} must be [n, {}, H, W]", self.config.in_channels)));
        }
        self.check_input(s[2], s[3])?;
        let st = &self.store;
        let mut maps = BTreeMap::new();
        let skip = self.e1.run(g, st, x, mode)?;
        let e = self.e2.run(g, st, skip, mode)?;
        let e = self.e3.run(g, st, e, mode)?;
        let enc = self.attach(Layer::L1, g, e, e, mode, rng, &mut maps)?;
        let mut parts = Vec::with_capacity(3);
        for b in &self.branches {
            parts.push(b.run(g, st, enc, mode)?);
        }
        let cat = g.concat_channels(&parts)?;
        let c = self.proj.run(g, st, cat, mode)?;
        let ctx = self.attach(Layer::L2, g, enc, c, mode, rng, &mut maps)?;
        let (h2, w2) = (g.shape(skip)[2], g.shape(skip)[3]);
        let up = g.resize(ctx, h2, w2)?;
        let cat = g.concat_channels(&[up, skip])?;
        let f = self.d1.run(g, st, cat, mode)?;
        let fused = self.attach(Layer::L3, g, ctx, f, mode, rng, &mut maps)?;
        let p = self.d2.run(g, st, fused, mode)?;
        let pre = self.attach(Layer::L4, g, fused, p, mode, rng, &mut maps)?;
        let l = g.conv2d(pre, &self.cls, st)?;
        let l = self.attach(Layer::L5, g, pre, l, mode, rng, &mut maps)?;
        let logits = g.resize(l, s[2], s[3])?;
        Ok(ForwardOutput { logits, attention: maps })
    }

    /// Eval-mode forward of a batch; returns logits and attention maps as tensors.
    pub fn infer(&self, images: Tensor) -> Result<(Tensor, BTreeMap<Layer, Tensor>)> {
        let mut g = Graph::new();
        let x = g.input(images);
        // eval mode draws nothing; the generator only satisfies the signature
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut g, x, Mode::Eval, &mut rng)?;
        let maps = out.attention.iter().map(|(&l, &v)| (l, g.value(v).clone())).collect();
        Ok((g.value(out.logits).clone(), maps))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_parsing() {
        assert_eq!(parse_layers("L1-L4").unwrap().len(), 4);
        assert_eq!(parse_layers("none").unwrap().len(), 0);
        assert_eq!(parse_layers("l5,L2").unwrap().into_iter().collect::<Vec<_>>(), vec![Layer::L2, Layer::L5]);
        assert!(parse_layers("L6").is_err());
    }

    #[test]
    fn config_text_round_trip() {
        let mut c = ToySegConfig::default();
        c.hanet_layers = parse_layers("L2,L5").unwrap();
        c.hanet.pe_mode = PeMode::Learnable;
        c.seed = 17;
        assert_eq!(ToySegConfig::from_text(&c.to_text()).unwrap(), c);
        assert!(ToySegConfig::from_text("bogus = 1").is_err());
    }

    #[test]
    fn output_shape_and_param_delta() {
        let mut c = ToySegConfig::default();
        c.hanet.coarse_height = 4;
        c.hanet_layers.clear();
        let base = ToySeg::build(c.clone()).unwrap();
        for l in Layer::ALL {
            let mut one = c.clone();
            one.hanet_layers = [l].into();
            let m = ToySeg::build(one.clone()).unwrap();
            assert_eq!(m.param_count() - base.param_count(), one.hanet_config(l).param_count());
        }
        c.hanet_layers = parse_layers("L1-L4").unwrap();
        let m = ToySeg::build(c).unwrap();
        let (logits, maps) = m.infer(Tensor::zeros(vec![2, 3, 16, 20]).unwrap()).unwrap();
        assert_eq!(logits.shape(), &[2, 6, 16, 20]);
        assert_eq!(maps.len(), 4);
        assert!(m.infer(Tensor::zeros(vec![1, 3, 18, 20]).unwrap()).is_err());
    }
}
