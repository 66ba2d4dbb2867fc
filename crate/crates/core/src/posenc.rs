//! Row positional encodings for the attention stack: fixed sinusoidal tables,
//! learnable tables, and train-time position jitter.

use std::fmt;
use std::str::FromStr;

use hanet_tensor::Tensor;
use rand::Rng;

use crate::error::{CoreError, Result};

const BASE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PeMode {
    None,
    #[default]
    Sinusoidal,
    Learnable,
}

impl FromStr for PeMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PeMode::None),
            "sinusoidal" => Ok(PeMode::Sinusoidal),
            "learnable" => Ok(PeMode::Learnable),
            other => Err(CoreError::Config(format!("unknown pe_mode {other:?} (none|sinusoidal|learnable)"))),
        }
    }
}

impl fmt::Display for PeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PeMode::None => "none",
            PeMode::Sinusoidal => "sinusoidal",
            PeMode::Learnable => "learnable",
        })
    }
}

/// `positions x channels` table of per-row encodings.
#[derive(Debug, Clone, PartialEq)]
pub struct PeTable {
    values: Tensor,
    mode: PeMode,
}

impl PeTable {
    pub fn learnable(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(CoreError::Config(format!("PE table must be [positions, channels], got {:?}", values.shape())));
        }
        Ok(PeTable { values, mode: PeMode::Learnable })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn mode(&self) -> PeMode {
        self.mode
    }

    pub fn positions(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }
}

/// `PE[p, 2i] = sin(p / 100^(2i/C))`, `PE[p, 2i+1] = cos(p / 100^(2i/C))`.
///
/// A single channel is accepted and holds only the sine column.
pub fn sinusoidal_table(positions: usize, channels: usize) -> Result<PeTable> {
    if positions == 0 || channels == 0 {
        return Err(CoreError::Config(format!("PE table of {positions} x {channels}")));
    }
    let c = channels as f64;
    let values = Tensor::from_fn(vec![positions, channels], |k| {
        let (p, j) = (k / channels, k % channels);
        let angle = p as f64 / BASE.powf((j - j % 2) as f64 / c);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })?;
    Ok(PeTable { values, mode: PeMode::Sinusoidal })
}

pub fn identity_index(positions: usize) -> Vec<usize> {
    (0..positions).collect()
}

/// `index[p] = clamp(p + u, 0, positions - 1)` with `u` uniform on
/// `{-jitter_max, ..., jitter_max}`, drawn independently per row.
pub fn jitter<R: Rng + ?Sized>(positions: usize, jitter_max: usize, rng: &mut R) -> Vec<usize> {
    if jitter_max == 0 {
        return identity_index(positions);
    }
    let j = jitter_max as i64;
    let last = positions.saturating_sub(1) as i64;
    (0..positions as i64).map(|p| (p + rng.random_range(-j..=j)).clamp(0, last) as usize).collect()
}

/// `out[:, p] = q[:, p] + PE[index[p], :]` for `q: [C, positions]`.
pub fn inject(q: &Tensor, table: &PeTable, index: &[usize]) -> Result<Tensor> {
    let qs = q.shape();
    if qs.len() != 2 || qs[0] != table.channels() || index.len() != qs[1] {
        return Err(CoreError::Config(format!(
            "cannot add PE table {:?} with {} indices to features {qs:?}",
            table.values.shape(),
            index.len()
        )));
    }
    if let Some(&bad) = index.iter().find(|&&i| i >= table.positions()) {
        return Err(CoreError::Config(format!("PE index {bad} outside {} positions", table.positions())));
    }
    let (channels, len) = (qs[0], qs[1]);
    let tab = table.values.data();
    let mut out = q.clone();
    let data = out.data_mut();
    for c in 0..channels {
        for (p, &i) in index.iter().enumerate() {
            data[c * len + p] += tab[i * channels + c];
        }
    }
    Ok(out)
}
