//! Class statistics of label rasters: histograms, band-conditioned distributions
//! and entropies, per-row or per-column class profiles, and their spread.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{CoreError, Result};

pub const IGNORE: u8 = 255;

/// Per-pixel class ids in row-major order; `255` marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub ids: Vec<u8>,
    /// Origin used in error messages, typically a file path.
    pub name: String,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, ids: Vec<u8>) -> Result<Self> {
        if ids.len() != width * height {
            return Err(CoreError::Data(format!("{} ids for a {width}x{height} label map", ids.len())));
        }
        Ok(LabelMap { width, height, ids, name: String::from("<memory>") })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.ids[y * self.width + x]
    }

    /// Rejects ids that are neither a class nor the ignore sentinel.
    pub fn check(&self, num_classes: usize) -> Result<()> {
        match self.ids.iter().position(|&v| v != IGNORE && v as usize >= num_classes) {
            None => Ok(()),
            Some(i) => Err(CoreError::Data(format!(
                "{}: pixel ({}, {}) has id {} but only {num_classes} classes exist",
                self.name,
                i % self.width,
                i / self.width,
                self.ids[i]
            ))),
        }
    }
}

/// Exact pixel counts per class, ignoring unlabeled pixels.
pub fn class_histogram(maps: &[LabelMap], num_classes: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; num_classes];
    for m in maps {
        m.check(num_classes)?;
        for &v in &m.ids {
            if v != IGNORE {
                counts[v as usize] += 1;
            }
        }
    }
    Ok(counts)
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(CoreError::Argument("entropy of an empty distribution".into()));
    }
    if p.iter().any(|&v| !(v >= 0.0)) {
        return Err(CoreError::Argument("probabilities must be non-negative".into()));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(CoreError::Argument(format!("probabilities sum to {total}, not 1")));
    }
    Ok(-p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>())
}

fn normalize(counts: &[u64]) -> Option<Vec<f64>> {
    let total: u64 = counts.iter().sum();
    (total > 0).then(|| counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Horizontal bands as row fractions partitioning `[0, 1]`. A row belongs to the
/// band containing its center `(r + 0.5) / H`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bands {
    edges: Vec<f64>,
}

impl Bands {
    pub fn equal(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(CoreError::Argument("need at least one band".into()));
        }
        Ok(Bands { edges: (0..=n).map(|i| i as f64 / n as f64).collect() })
    }

    /// Bands given as `(start, end)` pairs; they must tile `[0, 1]` in order.
    pub fn from_ranges(ranges: &[(f64, f64)]) -> Result<Self> {
        let first = ranges.first().ok_or_else(|| CoreError::Argument("need at least one band".into()))?;
        if first.0 != 0.0 {
            return Err(CoreError::Argument(format!("bands must start at 0, first starts at {}", first.0)));
        }
        let mut edges = vec![0.0];
        for (i, &(a, b)) in ranges.iter().enumerate() {
            if a != *edges.last().expect("nonempty") {
                let kind = if a < edges[edges.len() - 1] { "overlaps" } else { "leaves a gap before" };
                return Err(CoreError::Argument(format!("band {i} [{a}, {b}) {kind} its predecessor")));
            }
            if !(b > a) {
                return Err(CoreError::Argument(format!("band {i} [{a}, {b}) is empty")));
            }
            edges.push(b);
        }
        if edges[edges.len() - 1] != 1.0 {
            return Err(CoreError::Argument(format!("bands end at {} instead of 1", edges[edges.len() - 1])));
        }
        Ok(Bands { edges })
    }

    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self, i: usize) -> (f64, f64) {
        (self.edges[i], self.edges[i + 1])
    }

    pub fn band_of_row(&self, row: usize, height: usize) -> usize {
        let f = (row as f64 + 0.5) / height as f64;
        self.edges[1..].iter().position(|&e| f < e).unwrap_or(self.len() - 1)
    }

    /// Display names: upper/middle/lower for thirds, halves as upper/lower,
    /// numbered otherwise.
    pub fn names(&self) -> Vec<String> {
        match self.len() {
            1 => vec!["image".into()],
            2 => vec!["upper".into(), "lower".into()],
            3 => vec!["upper".into(), "middle".into(), "lower".into()],
            n => (0..n).map(|i| format!("band{i}")).collect(),
        }
    }
}

impl FromStr for Bands {
    type Err = CoreError;

    /// `"3"` for three equal bands, or ascending edges such as `"0,0.4,1"`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Ok(n) = s.parse::<usize>() {
            return Bands::equal(n);
        }
        let edges = s
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| CoreError::Argument(format!("bad band edge {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let ranges: Vec<(f64, f64)> = edges.windows(2).map(|w| (w[0], w[1])).collect();
        Bands::from_ranges(&ranges)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributionReport {
    pub num_classes: usize,
    pub bands: Bands,
    pub image_counts: Vec<u64>,
    pub image_probabilities: Vec<f64>,
    pub band_counts: Vec<Vec<u64>>,
    /// `None` for bands without labeled pixels.
    pub band_probabilities: Vec<Option<Vec<f64>>>,
    pub band_entropy: Vec<Option<f64>>,
    pub unconditional_entropy: f64,
    /// Band entropies weighted by labeled pixel mass.
    pub average_conditional_entropy: f64,
}

pub fn region_report(maps: &[LabelMap], num_classes: usize, bands: &Bands) -> Result<DistributionReport> {
    let mut band_counts = vec![vec![0u64; num_classes]; bands.len()];
    for m in maps {
        m.check(num_classes)?;
        for y in 0..m.height {
            let counts = &mut band_counts[bands.band_of_row(y, m.height)];
            for &v in &m.ids[y * m.width..(y + 1) * m.width] {
                if v != IGNORE {
                    counts[v as usize] += 1;
                }
            }
        }
    }
    let image_counts: Vec<u64> = (0..num_classes).map(|k| band_counts.iter().map(|b| b[k]).sum()).collect();
    let image_probabilities =
        normalize(&image_counts).ok_or_else(|| CoreError::Data("no labeled pixels; entropy is undefined".into()))?;
    let unconditional_entropy = entropy(&image_probabilities)?;
    let band_probabilities: Vec<Option<Vec<f64>>> = band_counts.iter().map(|c| normalize(c)).collect();
    let band_entropy =
        band_probabilities.iter().map(|p| p.as_ref().map(|p| entropy(p)).transpose()).collect::<Result<Vec<_>>>()?;
    let mass: Vec<f64> = band_counts.iter().map(|c| c.iter().sum::<u64>() as f64).collect();
    let total: f64 = mass.iter().sum();
    let average_conditional_entropy =
        band_entropy.iter().zip(&mass).map(|(h, &m)| h.map_or(0.0, |h| h * (m / total))).sum::<f64>();
    Ok(DistributionReport {
        num_classes,
        bands: bands.clone(),
        image_counts,
        image_probabilities,
        band_counts,
        band_probabilities,
        band_entropy,
        unconditional_entropy,
        average_conditional_entropy,
    })
}

fn class_label(names: Option<&[String]>, k: usize) -> String {
    names.and_then(|n| n.get(k).cloned()).unwrap_or_else(|| format!("class{k}"))
}

impl DistributionReport {
    /// Aligned table: one row per region, the `top` most frequent classes of the
    /// whole set as columns (percent), and the region entropy.
    pub fn render_table(&self, names: Option<&[String]>, top: usize) -> String {
        let mut order: Vec<usize> = (0..self.num_classes).collect();
        order.sort_by(|&a, &b| self.image_counts[b].cmp(&self.image_counts[a]).then(a.cmp(&b)));
        order.truncate(top.min(self.num_classes));
        let mut out = String::new();
        let _ = write!(out, "{:<8}", "region");
        for &k in &order {
            let _ = write!(out, " {:>12}", class_label(names, k));
        }
        let _ = writeln!(out, " {:>9}", "entropy");
        let mut row = |label: &str, probs: Option<&Vec<f64>>, h: Option<f64>| {
            let _ = write!(out, "{label:<8}");
            for &k in &order {
                match probs {
                    Some(p) => {
                        let _ = write!(out, " {:>12}", format_percent(100.0 * p[k]));
                    }
                    None => {
                        let _ = write!(out, " {:>12}", "-");
                    }
                }
            }
            let _ = writeln!(out, " {:>9}", h.map_or("-".into(), |h| format!("{h:.4}")));
        };
        row("image", Some(&self.image_probabilities), Some(self.unconditional_entropy));
        for (i, name) in self.bands.names().iter().enumerate() {
            if self.bands.len() > 1 {
                row(name, self.band_probabilities[i].as_ref(), self.band_entropy[i]);
            }
        }
        let _ = writeln!(out, "unconditional entropy: {:.4}", self.unconditional_entropy);
        let _ = writeln!(out, "average conditional entropy: {:.4}", self.average_conditional_entropy);
        out
    }

    /// One line per region with its row-fraction range, labeled pixel count,
    /// entropy and the full class distribution.
    pub fn to_csv(&self, names: Option<&[String]>) -> String {
        let mut out = String::from("region,start,end,pixels,entropy");
        for k in 0..self.num_classes {
            let _ = write!(out, ",p_{}", class_label(names, k));
        }
        out.push('\n');
        let mut line = |label: &str, (a, b): (f64, f64), counts: &[u64], p: Option<&Vec<f64>>, h: Option<f64>| {
            let px: u64 = counts.iter().sum();
            let _ = write!(out, "{label},{a},{b},{px},{}", h.map_or(String::new(), |h| h.to_string()));
            for k in 0..self.num_classes {
                let _ = write!(out, ",{}", p.map_or(String::new(), |p| p[k].to_string()));
            }
            out.push('\n');
        };
        line(
            "image",
            (0.0, 1.0),
            &self.image_counts,
            Some(&self.image_probabilities),
            Some(self.unconditional_entropy),
        );
        for (i, name) in self.bands.names().iter().enumerate() {
            line(
                name,
                self.bands.range(i),
                &self.band_counts[i],
                self.band_probabilities[i].as_ref(),
                self.band_entropy[i],
            );
        }
        let _ = writeln!(out, "average_conditional,0,1,,{}", self.average_conditional_entropy);
        out
    }
}

fn format_percent(p: f64) -> String {
    if p != 0.0 && p < 0.01 {
        format!("{p:.4}")
    } else {
        format!("{p:.2}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Height,
    Width,
}

impl FromStr for Axis {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "h" | "height" => Ok(Axis::Height),
            "w" | "width" => Ok(Axis::Width),
            other => Err(CoreError::Argument(format!("unknown axis {other:?} (h|w)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AxisDistribution {
    pub axis: Axis,
    pub counts: Vec<Vec<u64>>,
    /// `bins x classes`, each nonempty bin normalized over classes.
    pub matrix: Vec<Vec<f64>>,
    /// `classes x bins`, each present class normalized over bins.
    pub class_curves: Vec<Vec<f64>>,
}

impl AxisDistribution {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn bin_mass(&self, bin: usize) -> u64 {
        self.counts[bin].iter().sum()
    }
}

/// Class distribution per row bin (`Height`) or column bin (`Width`). Positions
/// are binned by their center fraction, so maps of different sizes can be pooled.
pub fn axis_distribution(maps: &[LabelMap], num_classes: usize, axis: Axis, bins: usize) -> Result<AxisDistribution> {
    if bins == 0 {
        return Err(CoreError::Argument("need at least one bin".into()));
    }
    let mut counts = vec![vec![0u64; num_classes]; bins];
    let bin_of = |i: usize, n: usize| (((i as f64 + 0.5) / n as f64 * bins as f64) as usize).min(bins - 1);
    for m in maps {
        m.check(num_classes)?;
        for y in 0..m.height {
            for x in 0..m.width {
                let v = m.at(x, y);
                if v == IGNORE {
                    continue;
                }
                let b = match axis {
                    Axis::Height => bin_of(y, m.height),
                    Axis::Width => bin_of(x, m.width),
                };
                counts[b][v as usize] += 1;
            }
        }
    }
    let matrix = counts.iter().map(|c| normalize(c).unwrap_or_else(|| vec![0.0; num_classes])).collect();
    let class_curves = (0..num_classes)
        .map(|k| {
            let col: Vec<u64> = counts.iter().map(|c| c[k]).collect();
            normalize(&col).unwrap_or_else(|| vec![0.0; bins])
        })
        .collect();
    Ok(AxisDistribution { axis, counts, matrix, class_curves })
}

/// Jensen-Shannon divergence in nats; bounded by `ln 2`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    let kl_to_mid = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).filter(|(&x, _)| x > 0.0).map(|(&x, &y)| x * (x / (0.5 * (x + y))).ln()).sum()
    };
    0.5 * kl_to_mid(p, q) + 0.5 * kl_to_mid(q, p)
}

fn mean_pairwise_js(d: &AxisDistribution) -> f64 {
    let rows: Vec<&Vec<f64>> = (0..d.bins()).filter(|&b| d.bin_mass(b) > 0).map(|b| &d.matrix[b]).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            total += js_divergence(rows[i], rows[j]);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Mean pairwise Jensen-Shannon divergence among the nonempty bins of each
/// profile: `(height_spread, width_spread)`.
pub fn distribution_divergence(height: &AxisDistribution, width: &AxisDistribution) -> (f64, f64) {
    (mean_pairwise_js(height), mean_pairwise_js(width))
}

/// Mean 4-connected component size per class, `None` for absent classes.
pub fn component_sizes(maps: &[LabelMap], num_classes: usize) -> Result<Vec<Option<f64>>> {
    let mut pixels = vec![0u64; num_classes];
    let mut components = vec![0u64; num_classes];
    for m in maps {
        m.check(num_classes)?;
        let mut seen = vec![false; m.ids.len()];
        let mut stack = Vec::new();
        for start in 0..m.ids.len() {
            let class = m.ids[start];
            if seen[start] || class == IGNORE {
                continue;
            }
            components[class as usize] += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(i) = stack.pop() {
                pixels[class as usize] += 1;
                let (x, y) = (i % m.width, i / m.width);
                let mut visit = |j: usize| {
                    if !seen[j] && m.ids[j] == class {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < m.width {
                    visit(i + 1);
                }
                if y > 0 {
                    visit(i - m.width);
                }
                if y + 1 < m.height {
                    visit(i + m.width);
                }
            }
        }
    }
    Ok(pixels.iter().zip(&components).map(|(&p, &c)| (c > 0).then(|| p as f64 / c as f64)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn halves() -> LabelMap {
        let mut ids = vec![0u8; 8];
        ids[4..].fill(1);
        LabelMap::new(2, 4, ids).unwrap()
    }

    #[test]
    fn histogram_and_bad_ids() {
        let m = LabelMap::new(2, 2, vec![3; 4]).unwrap();
        assert_eq!(class_histogram(&[m], 5).unwrap(), vec![0, 0, 0, 4, 0]);
        let ign = LabelMap::new(2, 2, vec![IGNORE; 4]).unwrap();
        assert_eq!(class_histogram(&[ign], 3).unwrap(), vec![0; 3]);
        let bad = LabelMap::new(2, 1, vec![0, 7]).unwrap().with_name("x.pgm");
        let err = class_histogram(&[bad], 3).unwrap_err().to_string();
        assert!(err.contains("x.pgm") && err.contains("(1, 0)"), "{err}");
    }

    #[test]
    fn entropy_cases() {
        assert!((entropy(&[1.0 / 19.0; 19]).unwrap() - 19f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!(entropy(&[]).is_err());
        assert!(entropy(&[0.5, 0.6]).is_err());
    }

    #[test]
    fn halves_report() {
        let r = region_report(&[halves()], 2, &Bands::equal(2).unwrap()).unwrap();
        assert_eq!(r.band_entropy, vec![Some(0.0), Some(0.0)]);
        assert_eq!(r.average_conditional_entropy, 0.0);
        assert!((r.unconditional_entropy - 2f64.ln()).abs() < 1e-15);
        let one = region_report(&[halves()], 2, &Bands::equal(1).unwrap()).unwrap();
        assert_eq!(one.average_conditional_entropy, one.unconditional_entropy);
    }

    #[test]
    fn band_parsing() {
        assert_eq!("3".parse::<Bands>().unwrap().len(), 3);
        assert_eq!("0,0.25,1".parse::<Bands>().unwrap().range(1), (0.25, 1.0));
        assert!(Bands::from_ranges(&[(0.0, 0.6), (0.5, 1.0)]).is_err());
        assert!(Bands::from_ranges(&[(0.0, 0.4), (0.5, 1.0)]).is_err());
        assert!(Bands::from_ranges(&[(0.0, 0.9)]).is_err());
    }

    #[test]
    fn banded_axis_profiles() {
        let m = halves();
        let h = axis_distribution(&[m.clone()], 2, Axis::Height, 2).unwrap();
        assert_eq!(h.matrix, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let w = axis_distribution(&[m], 2, Axis::Width, 2).unwrap();
        assert_eq!(w.matrix[0], w.matrix[1]);
        let (hs, ws) = distribution_divergence(&h, &w);
        assert!((hs - 2f64.ln()).abs() < 1e-15);
        assert_eq!(ws, 0.0);
    }

    #[test]
    fn component_mean_sizes() {
        let m = LabelMap::new(3, 2, vec![0, 1, 0, 0, 1, 1]).unwrap();
        assert_eq!(component_sizes(&[m], 3).unwrap(), vec![Some(1.5), Some(3.0), None]);
    }
}
