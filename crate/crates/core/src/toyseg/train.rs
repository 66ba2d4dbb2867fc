use std::collections::BTreeMap;
use std::fmt::Write as _;

use hanet_tensor::{Graph, Mode, Sgd, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{CoreError, Result};
use crate::io::Rgb;
use crate::kv;
use crate::scenestats::IGNORE;
use crate::toyseg::model::ToySeg;
use crate::toyseg::synth::{normalize_into, Dataset};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay_main: f64,
    pub weight_decay_hanet: f64,
    pub power: f64,
    pub max_iteration: usize,
    pub batch_size: usize,
    /// Crop height and width.
    pub crop: (usize, usize),
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-2,
            momentum: 0.9,
            weight_decay_main: 5e-4,
            weight_decay_hanet: 1e-4,
            power: 0.9,
            max_iteration: 600,
            batch_size: 8,
            crop: (256, 24),
        }
    }
}

pub const TRAIN_KEYS: &[&str] =
    &["base_lr", "momentum", "weight_decay_main", "weight_decay_hanet", "power", "max_iteration", "batch_size", "crop"];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.base_lr, self.weight_decay_main, self.weight_decay_hanet];
        if positive.iter().any(|&v| !(v > 0.0)) || !(0.0..1.0).contains(&self.momentum) || self.momentum == 0.0 {
            return Err(CoreError::Config(format!(
                "learning rate, momentum and weight decays must be positive (momentum below 1): {self:?}"
            )));
        }
        if !(self.power > 0.0 && self.power <= 1.0) {
            return Err(CoreError::Config(format!("power {} outside (0, 1]", self.power)));
        }
        if self.batch_size == 0 || self.crop.0 == 0 || self.crop.1 == 0 {
            return Err(CoreError::Config("batch size and crop must be positive".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("base_lr", self.base_lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay_main", self.weight_decay_main.to_string()),
            ("weight_decay_hanet", self.weight_decay_hanet.to_string()),
            ("power", self.power.to_string()),
            ("max_iteration", self.max_iteration.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("crop", format!("{}x{}", self.crop.0, self.crop.1)),
        ]
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let d = TrainConfig::default();
        let crop = match map.get("crop") {
            None => d.crop,
            Some(s) => parse_size(s)?,
        };
        let cfg = TrainConfig {
            base_lr: kv::get(map, "base_lr", d.base_lr)?,
            momentum: kv::get(map, "momentum", d.momentum)?,
            weight_decay_main: kv::get(map, "weight_decay_main", d.weight_decay_main)?,
            weight_decay_hanet: kv::get(map, "weight_decay_hanet", d.weight_decay_hanet)?,
            power: kv::get(map, "power", d.power)?,
            max_iteration: kv::get(map, "max_iteration", d.max_iteration)?,
            batch_size: kv::get(map, "batch_size", d.batch_size)?,
            crop,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `"HxW"`.
pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || CoreError::Config(format!("size {s:?} is not HxW"));
    let (h, w) = s.trim().split_once('x').ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

/// `base_lr * (1 - iteration / max_iteration)^power`.
pub fn poly_lr(iteration: usize, cfg: &TrainConfig) -> Result<f64> {
    if iteration > cfg.max_iteration {
        return Err(CoreError::Argument(format!("iteration {iteration} beyond {}", cfg.max_iteration)));
    }
    if cfg.max_iteration == 0 {
        return Ok(0.0);
    }
    Ok(cfg.base_lr * (1.0 - iteration as f64 / cfg.max_iteration as f64).powf(cfg.power))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,lr,loss\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.iteration, r.lr, r.loss);
        }
        out
    }

    /// Exponential moving average of the loss (smoothing factor `alpha`).
    pub fn smoothed(&self, alpha: f64) -> Vec<f64> {
        let mut acc = None;
        self.rows
            .iter()
            .map(|r| {
                let v = acc.map_or(r.loss, |a: f64| a + alpha * (r.loss - a));
                acc = Some(v);
                v
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: TrainLog,
    pub optimizer: Sgd,
}

/// Crops `(h, w)` at `(y0, x0)` and optionally mirrors horizontally.
fn augment(img: &Rgb, labels: &[u8], (h, w): (usize, usize), (y0, x0): (usize, usize), flip: bool) -> (Rgb, Vec<u8>) {
    let mut pixels = Vec::with_capacity(3 * h * w);
    let mut ids = Vec::with_capacity(h * w);
    for y in y0..y0 + h {
        for i in 0..w {
            let x = if flip { x0 + w - 1 - i } else { x0 + i };
            let src = y * img.width + x;
            pixels.extend_from_slice(&img.pixels[3 * src..3 * src + 3]);
            ids.push(labels[src]);
        }
    }
    (Rgb { width: w, height: h, pixels }, ids)
}

/// SGD with momentum over the two decay groups and the poly schedule. Batches
/// are drawn by reshuffling the set each epoch; every sample is randomly cropped
/// and flipped.
pub fn train<R: Rng>(model: &mut ToySeg, data: &Dataset, cfg: &TrainConfig, rng: &mut R) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(CoreError::Data("training set is empty".into()));
    }
    let (ch, cw) = cfg.crop;
    if let Some(s) = data.samples.iter().find(|s| s.image.height < ch || s.image.width < cw) {
        return Err(CoreError::Config(format!(
            "crop {ch}x{cw} larger than a {}x{} training image",
            s.image.height, s.image.width
        )));
    }
    model.check_input(ch, cw)?;
    let num_classes = model.config().num_classes;
    for s in &data.samples {
        s.labels.check(num_classes)?;
    }
    let mut optimizer = Sgd::new(cfg.momentum, cfg.weight_decay_main, cfg.weight_decay_hanet)?;
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = Vec::new();
    for it in 0..cfg.max_iteration {
        let lr = poly_lr(it, cfg)?;
        let mut input = Vec::with_capacity(cfg.batch_size * 3 * ch * cw);
        let mut labels = Vec::with_capacity(cfg.batch_size * ch * cw);
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(rng);
            }
            let s = &data.samples[order.pop().expect("refilled")];
            let y0 = rng.random_range(0..=s.image.height - ch);
            let x0 = rng.random_range(0..=s.image.width - cw);
            let flip = rng.random_bool(0.5);
            let (img, ids) = augment(&s.image, &s.labels.ids, cfg.crop, (y0, x0), flip);
            normalize_into(&img, &mut input);
            labels.extend(ids);
        }
        let batch = Tensor::new(vec![cfg.batch_size, 3, ch, cw], input)?;
        let mut g = Graph::new();
        let x = g.input(batch);
        let out = model.forward(&mut g, x, Mode::Train, rng)?;
        let loss = g.cross_entropy(out.logits, &labels, IGNORE)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(CoreError::Numerical(format!("loss became {value} at iteration {it}")));
        }
        g.backward(loss)?;
        model.store.clear_grads();
        g.accumulate_param_grads(&mut model.store)?;
        g.apply_stat_updates(&mut model.store)?;
        optimizer.step(&mut model.store, lr)?;
        if model.store.entries().iter().any(|e| !e.value.is_finite()) {
            return Err(CoreError::Numerical(format!("parameters became non-finite at iteration {it}")));
        }
        log.rows.push(LogRow { iteration: it, lr, loss: value });
    }
    model.store.clear_grads();
    Ok(TrainOutcome { log, optimizer })
}
