//! Pointwise activations, batch normalization, dropout masks and the
//! softmax cross-entropy loss.

use rand::Rng;

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn relu_backward(x: &[f64], gy: &[f64]) -> Vec<f64> {
    x.iter().zip(gy).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect()
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| sigmoid_scalar(v)).collect()
}

/// Gradient through the sigmoid, written in terms of its output.
pub fn sigmoid_backward(y: &[f64], gy: &[f64]) -> Vec<f64> {
    y.iter().zip(gy).map(|(&s, &g)| g * s * (1.0 - s)).collect()
}

/// Per-channel statistics for `[batch, channels, spatial]` data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormDims {
    pub batch: usize,
    pub channels: usize,
    pub spatial: usize,
}

impl NormDims {
    fn count(&self) -> usize {
        self.batch * self.spatial
    }

    fn for_each_channel_slice(&self, c: usize, mut f: impl FnMut(std::ops::Range<usize>)) {
        for n in 0..self.batch {
            let start = (n * self.channels + c) * self.spatial;
            f(start..start + self.spatial);
        }
    }
}

/// Batch mean and biased variance per channel.
pub fn channel_moments(x: &[f64], d: NormDims) -> (Vec<f64>, Vec<f64>) {
    let m = d.count() as f64;
    let mut mean = vec![0.0; d.channels];
    let mut var = vec![0.0; d.channels];
    for c in 0..d.channels {
        let mut s = 0.0;
        d.for_each_channel_slice(c, |r| s += x[r].iter().sum::<f64>());
        let mu = s / m;
        let mut v = 0.0;
        d.for_each_channel_slice(c, |r| v += x[r].iter().map(|&t| (t - mu) * (t - mu)).sum::<f64>());
        mean[c] = mu;
        var[c] = v / m;
    }
    (mean, var)
}

/// Normalizes with the given statistics. Returns `(y, x_hat, inv_std)`.
pub fn batch_norm_apply(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
    d: NormDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    for c in 0..d.channels {
        d.for_each_channel_slice(c, |r| {
            for i in r {
                let h = (x[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                y[i] = gamma[c] * h + beta[c];
            }
        });
    }
    (y, xhat, inv_std)
}

/// Backward through batch norm. `batch_stats` selects the training-mode formula where
/// the mean and variance depend on `x`; otherwise the statistics are constants.
/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn batch_norm_backward(
    gy: &[f64],
    xhat: &[f64],
    gamma: &[f64],
    inv_std: &[f64],
    batch_stats: bool,
    d: NormDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = d.count() as f64;
    let mut gx = vec![0.0; gy.len()];
    let mut ggamma = vec![0.0; d.channels];
    let mut gbeta = vec![0.0; d.channels];
    for c in 0..d.channels {
        let (mut sg, mut sgh) = (0.0, 0.0);
        d.for_each_channel_slice(c, |r| {
            for i in r {
                sg += gy[i];
                sgh += gy[i] * xhat[i];
            }
        });
        ggamma[c] = sgh;
        gbeta[c] = sg;
        let scale = gamma[c] * inv_std[c];
        d.for_each_channel_slice(c, |r| {
            for i in r {
                gx[i] = if batch_stats { scale * (gy[i] - sg / m - xhat[i] * sgh / m) } else { scale * gy[i] };
            }
        });
    }
    (gx, ggamma, gbeta)
}

/// Inverted-dropout mask: each entry is `0` with probability `p`, else `1 / (1 - p)`.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect()
}

/// Mean softmax cross-entropy over the class axis of `[batch, classes, pixels]` logits.
/// Pixels labelled `ignore` contribute neither loss nor gradient. Returns
/// `(loss, grad_logits, valid_count)`.
pub fn softmax_cross_entropy(
    logits: &[f64],
    labels: &[u8],
    batch: usize,
    classes: usize,
    pixels: usize,
    ignore: u8,
) -> (f64, Vec<f64>, usize) {
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    let mut valid = 0usize;
    let mut probs = vec![0.0; classes];
    for n in 0..batch {
        for p in 0..pixels {
            let label = labels[n * pixels + p];
            if label == ignore {
                continue;
            }
            let at = |k: usize| (n * classes + k) * pixels + p;
            let max = (0..classes).map(|k| logits[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (k, pk) in probs.iter_mut().enumerate() {
                *pk = (logits[at(k)] - max).exp();
                z += *pk;
            }
            total += z.ln() + max - logits[at(label as usize)];
            for (k, pk) in probs.iter().enumerate() {
                grad[at(k)] = pk / z;
            }
            grad[at(label as usize)] -= 1.0;
            valid += 1;
        }
    }
    if valid == 0 {
        return (0.0, grad, 0);
    }
    let inv = 1.0 / valid as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    (total * inv, grad, valid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!(sigmoid_scalar(-800.0) >= 0.0);
        assert!(sigmoid_scalar(800.0) <= 1.0);
        assert!((sigmoid_scalar(2.0) + sigmoid_scalar(-2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let logits = vec![0.0; 4 * 3];
        let labels = [0u8, 2, 255];
        let (loss, grad, valid) = softmax_cross_entropy(&logits, &labels, 1, 4, 3, 255);
        assert_eq!(valid, 2);
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        // the ignored pixel has no gradient
        for k in 0..4 {
            assert_eq!(grad[k * 3 + 2], 0.0);
        }
    }

    #[test]
    fn all_ignored_is_zero_loss() {
        let (loss, grad, valid) = softmax_cross_entropy(&[1.0, 2.0], &[255], 1, 2, 1, 255);
        assert_eq!((loss, valid), (0.0, 0));
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn normalized_output_has_zero_mean_unit_variance() {
        let d = NormDims { batch: 2, channels: 1, spatial: 3 };
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 9.0];
        let (mean, var) = channel_moments(&x, d);
        let (y, _, _) = batch_norm_apply(&x, &[1.0], &[0.0], &mean, &var, 0.0, d);
        let (m2, v2) = channel_moments(&y, d);
        assert!(m2[0].abs() < 1e-12);
        assert!((v2[0] - 1.0).abs() < 1e-12);
    }
}
