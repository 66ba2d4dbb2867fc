use std::fmt::Write as _;

use crate::error::{CoreError, Result};
use crate::scenestats::{Bands, LabelMap, IGNORE};
use crate::toyseg::model::{Layer, ToySeg};
use crate::toyseg::synth::{image_batch, Dataset};

/// Number of horizontal sections in the per-region breakdown.
pub const REGIONS: usize = 4;
const EVAL_BATCH: usize = 8;

/// Counts indexed `[truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    /// Adds one pixel; ignore-labeled truth is skipped.
    pub fn add(&mut self, truth: u8, pred: u8) {
        if truth != IGNORE {
            self.counts[truth as usize * self.num_classes + pred as usize] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// IoU of `class`, `None` when it never occurs in the ground truth.
    pub fn iou(&self, class: usize) -> Option<f64> {
        let k = self.num_classes;
        let tp = self.get(class, class);
        let truth: u64 = (0..k).map(|p| self.get(class, p)).sum();
        if truth == 0 {
            return None;
        }
        let pred: u64 = (0..k).map(|t| self.get(t, class)).sum();
        Some(tp as f64 / (truth + pred - tp) as f64)
    }

    /// Mean IoU over classes present in the ground truth.
    pub fn miou(&self) -> Option<f64> {
        let ious: Vec<f64> = (0..self.num_classes).filter_map(|c| self.iou(c)).collect();
        (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total = self.total();
        let hit: u64 = (0..self.num_classes).map(|c| self.get(c, c)).sum();
        (total > 0).then(|| hit as f64 / total as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub per_class_iou: Vec<Option<f64>>,
    /// Top to bottom; `None` for a section without labeled pixels.
    pub per_region_miou: Vec<Option<f64>>,
}

impl EvalReport {
    /// Full-precision values, so that equal reports render to equal text.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "miou = {}", self.miou);
        let _ = writeln!(out, "pixel_accuracy = {}", self.pixel_accuracy);
        for (c, iou) in self.per_class_iou.iter().enumerate() {
            let _ = writeln!(out, "iou.class{c} = {}", iou.map_or("absent".into(), |v| v.to_string()));
        }
        for (r, m) in self.per_region_miou.iter().enumerate() {
            let _ = writeln!(out, "miou.region{r} = {}", m.map_or("absent".into(), |v| v.to_string()));
        }
        out
    }
}

/// Scores predictions against ground truth, overall and per horizontal quarter.
pub fn score(preds: &[LabelMap], truth: &[LabelMap], num_classes: usize) -> Result<EvalReport> {
    if preds.len() != truth.len() {
        return Err(CoreError::Argument(format!("{} predictions for {} label maps", preds.len(), truth.len())));
    }
    let bands = Bands::equal(REGIONS)?;
    let mut all = ConfusionMatrix::new(num_classes);
    let mut regions = vec![ConfusionMatrix::new(num_classes); REGIONS];
    for (p, t) in preds.iter().zip(truth) {
        if (p.width, p.height) != (t.width, t.height) {
            return Err(CoreError::Argument(format!("prediction size differs for {}", t.name)));
        }
        t.check(num_classes)?;
        p.check(num_classes)?;
        for y in 0..t.height {
            let region = &mut regions[bands.band_of_row(y, t.height)];
            for x in 0..t.width {
                let (tv, pv) = (t.at(x, y), p.at(x, y));
                all.add(tv, pv);
                region.add(tv, pv);
            }
        }
    }
    let miou = all.miou().ok_or_else(|| CoreError::Data("no labeled pixels to evaluate".into()))?;
    Ok(EvalReport {
        miou,
        pixel_accuracy: all.pixel_accuracy().unwrap_or(0.0),
        per_class_iou: (0..num_classes).map(|c| all.iou(c)).collect(),
        per_region_miou: regions.iter().map(ConfusionMatrix::miou).collect(),
        confusion: all,
    })
}

/// Per-pixel argmax of `[n, k, H, W]` logits.
pub fn argmax_maps(logits: &hanet_tensor::Tensor) -> Vec<LabelMap> {
    let s = logits.shape();
    let (n, k, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let d = logits.data();
    (0..n)
        .map(|i| {
            let ids = (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if d[(i * k + c) * plane + p] > d[(i * k + best) * plane + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMap { width: w, height: h, ids, name: String::from("<prediction>") }
        })
        .collect()
}

pub fn predict(model: &ToySeg, data: &Dataset) -> Result<Vec<LabelMap>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(EVAL_BATCH) {
        let imgs: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        let (logits, _) = model.infer(image_batch(&imgs)?)?;
        out.extend(argmax_maps(&logits));
    }
    Ok(out)
}

pub fn evaluate(model: &ToySeg, data: &Dataset) -> Result<EvalReport> {
    let preds = predict(model, data)?;
    score(&preds, &data.labels(), model.config().num_classes)
}

/// Attention of `layer` averaged over `data`, indexed `[channel][row]`.
pub fn mean_attention(model: &ToySeg, data: &Dataset, layer: Layer) -> Result<Vec<Vec<f64>>> {
    if model.hanet(layer).is_none() {
        return Err(CoreError::Argument(format!("model has no attention at {layer}")));
    }
    if data.is_empty() {
        return Err(CoreError::Data("no images to average attention over".into()));
    }
    let mut sum: Vec<Vec<f64>> = Vec::new();
    for chunk in data.samples.chunks(EVAL_BATCH) {
        let imgs: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        let (_, maps) = model.infer(image_batch(&imgs)?)?;
        let a = &maps[&layer];
        let (n, c, h) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        if sum.is_empty() {
            sum = vec![vec![0.0; h]; c];
        }
        for i in 0..n {
            for (ch, row) in sum.iter_mut().enumerate() {
                for (r, v) in row.iter_mut().enumerate() {
                    *v += a.data()[(i * c + ch) * h + r];
                }
            }
        }
    }
    let n = data.len() as f64;
    sum.iter_mut().flatten().for_each(|v| *v /= n);
    Ok(sum)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BandAlignment {
    pub class: usize,
    /// Image row at the center of the attention row with the largest value.
    pub peak_row: usize,
    /// `[start, end)` image rows.
    pub band: (usize, usize),
}

impl BandAlignment {
    pub fn hit(&self) -> bool {
        (self.band.0..self.band.1).contains(&self.peak_row)
    }
}

/// Peak of each class's attention profile against its band. `profile` rows span
/// `height` image rows; the first maximum wins ties.
pub fn attention_alignment(
    profile: &[Vec<f64>],
    height: usize,
    bands: &[(usize, usize)],
) -> Result<Vec<BandAlignment>> {
    if profile.len() != bands.len() {
        return Err(CoreError::Argument(format!("{} attention channels for {} bands", profile.len(), bands.len())));
    }
    profile
        .iter()
        .zip(bands)
        .enumerate()
        .map(|(class, (row, &band))| {
            if row.is_empty() {
                return Err(CoreError::Argument("empty attention profile".into()));
            }
            let best = (1..row.len()).fold(0, |b, r| if row[r] > row[b] { r } else { b });
            let peak_row = ((best as f64 + 0.5) * height as f64 / row.len() as f64) as usize;
            Ok(BandAlignment { class, peak_row, band })
        })
        .collect()
}
