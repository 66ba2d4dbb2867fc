//! Width pooling and one-dimensional resampling.
//!
//! Resampling is expressed as a sparse row map: every output position is a weighted
//! sum of input positions. The backward pass is the transpose of the same map.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolMode {
    Avg,
    Max,
}

/// Pools `[outer, width]` rows to `[outer]`. Max mode also returns the argmax column
/// of every row for the backward pass (first maximum wins on ties).
pub fn pool_rows(x: &[f64], width: usize, mode: PoolMode) -> (Vec<f64>, Option<Vec<usize>>) {
    match mode {
        PoolMode::Avg => {
            let inv = 1.0 / width as f64;
            (x.chunks(width).map(|r| r.iter().sum::<f64>() * inv).collect(), None)
        }
        PoolMode::Max => {
            let mut arg = Vec::with_capacity(x.len() / width);
            let y = x
                .chunks(width)
                .map(|r| {
                    let (i, v) =
                        r.iter().enumerate().fold(
                            (0, f64::NEG_INFINITY),
                            |best, (i, &v)| {
                                if v > best.1 {
                                    (i, v)
                                } else {
                                    best
                                }
                            },
                        );
                    arg.push(i);
                    v
                })
                .collect();
            (y, Some(arg))
        }
    }
}

pub fn pool_rows_backward(gy: &[f64], width: usize, argmax: Option<&[usize]>) -> Vec<f64> {
    let mut gx = vec![0.0; gy.len() * width];
    match argmax {
        None => {
            let inv = 1.0 / width as f64;
            for (row, &g) in gx.chunks_mut(width).zip(gy) {
                row.iter_mut().for_each(|v| *v = g * inv);
            }
        }
        Some(arg) => {
            for (r, (&g, &i)) in gy.iter().zip(arg).enumerate() {
                gx[r * width + i] = g;
            }
        }
    }
    gx
}

/// One output position: `x[base] + sum(w * (x[i] - x[base]))`.
///
/// Anchoring on a base input keeps constant signals bit-exact under resampling.
#[derive(Debug, Clone, PartialEq)]
pub struct Tap {
    pub base: usize,
    pub rest: Vec<(usize, f64)>,
}

impl Tap {
    /// Effective weight of every input index this tap reads.
    pub fn weights(&self) -> Vec<(usize, f64)> {
        let rest_sum: f64 = self.rest.iter().map(|&(_, w)| w).sum();
        std::iter::once((self.base, 1.0 - rest_sum)).chain(self.rest.iter().copied()).collect()
    }
}

/// Sparse linear map from `input_len` positions to `taps.len()` positions.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMap {
    pub input_len: usize,
    pub taps: Vec<Tap>,
}

impl RowMap {
    pub fn output_len(&self) -> usize {
        self.taps.len()
    }

    pub fn identity(len: usize) -> Self {
        RowMap { input_len: len, taps: (0..len).map(|i| Tap { base: i, rest: vec![] }).collect() }
    }

    /// Adaptive average pooling: output `j` averages inputs
    /// `[floor(j*n/t), ceil((j+1)*n/t))`.
    pub fn adaptive_avg(input_len: usize, output_len: usize) -> Self {
        let taps = (0..output_len)
            .map(|j| {
                let start = j * input_len / output_len;
                let end = ((j + 1) * input_len).div_ceil(output_len);
                let w = 1.0 / (end - start) as f64;
                Tap { base: start, rest: (start + 1..end).map(|i| (i, w)).collect() }
            })
            .collect();
        RowMap { input_len, taps }
    }

    /// Linear interpolation with pixel centers aligned
    /// (`src = (dst + 0.5) * n / t - 0.5`) and clamping at both ends.
    pub fn linear(input_len: usize, output_len: usize) -> Self {
        let scale = input_len as f64 / output_len as f64;
        let taps = (0..output_len)
            .map(|j| {
                let src = ((j as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(input_len - 1);
                let i1 = (i0 + 1).min(input_len - 1);
                let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
                let rest = if frac == 0.0 { vec![] } else { vec![(i1, frac)] };
                Tap { base: i0, rest }
            })
            .collect();
        RowMap { input_len, taps }
    }

    /// Downsampling uses adaptive averaging, upsampling uses linear interpolation.
    pub fn resample(input_len: usize, output_len: usize) -> Self {
        use std::cmp::Ordering::*;
        match output_len.cmp(&input_len) {
            Less => Self::adaptive_avg(input_len, output_len),
            Greater => Self::linear(input_len, output_len),
            Equal => Self::identity(input_len),
        }
    }

    /// Applies the map along the middle axis of `[outer, input_len, inner]`.
    pub fn apply(&self, x: &[f64], outer: usize, inner: usize) -> Vec<f64> {
        let (n_in, n_out) = (self.input_len, self.output_len());
        let mut y = vec![0.0; outer * n_out * inner];
        for o in 0..outer {
            let src = &x[o * n_in * inner..][..n_in * inner];
            let dst = &mut y[o * n_out * inner..][..n_out * inner];
            for (j, tap) in self.taps.iter().enumerate() {
                let out = &mut dst[j * inner..][..inner];
                let base = &src[tap.base * inner..][..inner];
                for (k, v) in out.iter_mut().enumerate() {
                    let b = base[k];
                    let mut acc = 0.0;
                    for &(i, w) in &tap.rest {
                        acc += w * (src[i * inner + k] - b);
                    }
                    *v = b + acc;
                }
            }
        }
        y
    }

    pub fn apply_transpose(&self, gy: &[f64], outer: usize, inner: usize) -> Vec<f64> {
        let (n_in, n_out) = (self.input_len, self.output_len());
        let weights: Vec<Vec<(usize, f64)>> = self.taps.iter().map(Tap::weights).collect();
        let mut gx = vec![0.0; outer * n_in * inner];
        for o in 0..outer {
            let src = &gy[o * n_out * inner..][..n_out * inner];
            let dst = &mut gx[o * n_in * inner..][..n_in * inner];
            for (j, taps) in weights.iter().enumerate() {
                let g = &src[j * inner..][..inner];
                for &(i, w) in taps {
                    let row = &mut dst[i * inner..][..inner];
                    row.iter_mut().zip(g).for_each(|(a, &b)| *a += w * b);
                }
            }
        }
        gx
    }
}
