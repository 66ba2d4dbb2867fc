//! Finite-difference verification of reverse-mode gradients.
//!
//! Every checked entry is perturbed by `±epsilon` and the central difference
//! `(f(θ+ε) − f(θ−ε)) / 2ε` is compared with the analytic gradient. The relative
//! error of an entry is `|a − n| / max(|a|, |n|, floor)`.
//!
//! Piecewise-linear activations make `f` non-differentiable on a measure-zero set.
//! When a perturbation straddles such a kink the central difference is wrong for
//! that entry only; an entry that fails is therefore re-measured with `ε/10`,
//! `ε/100`, … (up to `kink_retries` times) and its smallest error is kept. A true
//! gradient bug does not shrink with ε and still fails. Steps above
//! [`RECOMMENDED_EPSILON`] are never retried, so their truncation error is reported
//! as measured.

use std::fmt;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const RECOMMENDED_EPSILON: std::ops::RangeInclusive<f64> = 1e-7..=1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so entries whose true gradient
    /// is zero are judged on absolute error.
    pub floor: f64,
    pub kink_retries: usize,
    /// Check at most this many evenly spaced entries per tensor.
    pub max_entries_per_tensor: Option<usize>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            epsilon: DEFAULT_EPSILON,
            tolerance: 1e-4,
            floor: 1e-6,
            kink_retries: 2,
            max_entries_per_tensor: None,
        }
    }
}

/// Result of evaluating the checked function once.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    /// One gradient vector per input tensor; required only when requested.
    pub grads: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntryError {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub per_tensor_max: Vec<f64>,
    pub worst: Option<EntryError>,
    pub checked: usize,
    pub retried: usize,
    pub tolerance: f64,
    pub epsilon: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} max_rel_error={:.3e} tol={:.0e} eps={:.0e} entries={} retried={}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.tolerance,
            self.epsilon,
            self.checked,
            self.retried,
        )?;
        if let Some(w) = &self.worst {
            write!(
                f,
                " worst=(tensor {}, entry {}: analytic {:.6e}, numeric {:.6e})",
                w.tensor, w.index, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn entries(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(m) if m < len => (0..m).map(|k| k * len / m).collect(),
        _ => (0..len).collect(),
    }
}

/// Compares analytic gradients of `f` at `theta` against central differences.
///
/// `f(theta, want_grad)` must be deterministic; it is called once with
/// `want_grad = true` and then twice per checked entry and retry.
pub fn gradcheck<F>(mut f: F, theta: &[Tensor], opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: FnMut(&[Tensor], bool) -> Result<Evaluation>,
{
    if !(opts.epsilon > 0.0 && opts.epsilon.is_finite()) {
        return Err(TensorError::invalid("gradcheck", format!("epsilon {}", opts.epsilon)));
    }
    let base = f(theta, true)?;
    if !base.loss.is_finite() {
        return Err(TensorError::NonFinite(format!("loss at the base point is {}", base.loss)));
    }
    let analytic = base.grads.ok_or_else(|| TensorError::invalid("gradcheck", "function returned no gradients"))?;
    if analytic.len() != theta.len() || analytic.iter().zip(theta).any(|(g, t)| g.len() != t.numel()) {
        return Err(TensorError::invalid("gradcheck", "gradient shapes do not match parameters"));
    }

    let mut work = theta.to_vec();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        per_tensor_max: vec![0.0; theta.len()],
        worst: None,
        checked: 0,
        retried: 0,
        tolerance: opts.tolerance,
        epsilon: opts.epsilon,
    };

    let mut central = |work: &mut Vec<Tensor>, t: usize, i: usize, eps: f64| -> Result<f64> {
        let orig = work[t].data()[i];
        work[t].data_mut()[i] = orig + eps;
        let plus = f(work, false)?.loss;
        work[t].data_mut()[i] = orig - eps;
        let minus = f(work, false)?.loss;
        work[t].data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(TensorError::NonFinite(format!("loss {plus} / {minus} when perturbing tensor {t} entry {i}")));
        }
        Ok((plus - minus) / (2.0 * eps))
    };

    let retries = if opts.epsilon <= *RECOMMENDED_EPSILON.end() { opts.kink_retries } else { 0 };
    for (t, grad) in analytic.iter().enumerate() {
        for i in entries(grad.len(), opts.max_entries_per_tensor) {
            let a = grad[i];
            let mut eps = opts.epsilon;
            let mut numeric = central(&mut work, t, i, eps)?;
            let mut err = relative_error(a, numeric, opts.floor);
            let mut tries = 0;
            while err >= opts.tolerance && tries < retries {
                eps /= 10.0;
                tries += 1;
                let n = central(&mut work, t, i, eps)?;
                let e = relative_error(a, n, opts.floor);
                if e < err {
                    err = e;
                    numeric = n;
                }
            }
            if tries > 0 {
                report.retried += 1;
            }
            report.checked += 1;
            report.per_tensor_max[t] = report.per_tensor_max[t].max(err);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(EntryError { tensor: t, index: i, analytic: a, numeric, rel_error: err });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(theta: &[Tensor], _: bool) -> Result<Evaluation> {
        let x = theta[0].data()[0];
        Ok(Evaluation { loss: x * x, grads: Some(vec![vec![2.0 * x]]) })
    }

    #[test]
    fn square_at_three() {
        let theta = [Tensor::new(vec![1], vec![3.0]).unwrap()];
        let opts = GradcheckOptions { tolerance: 1e-8, ..Default::default() };
        let r = gradcheck(square, &theta, opts).unwrap();
        let w = r.worst.unwrap();
        assert_eq!(w.analytic, 6.0);
        assert!((w.numeric - 6.0).abs() < 1e-8);
        assert!(r.passed());
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let theta = [Tensor::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap()];
        let r = gradcheck(
            |_, _| Ok(Evaluation { loss: 4.2, grads: Some(vec![vec![0.0; 3]]) }),
            &theta,
            GradcheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let theta = [Tensor::new(vec![1], vec![3.0]).unwrap()];
        let r = gradcheck(
            |t, _| {
                let x = t[0].data()[0];
                Ok(Evaluation { loss: x * x, grads: Some(vec![vec![2.1 * x]]) })
            },
            &theta,
            GradcheckOptions::default(),
        )
        .unwrap();
        assert!(!r.passed());
        assert_eq!(r.retried, 1);
    }

    #[test]
    fn non_finite_loss_is_a_diagnostic_error() {
        let theta = [Tensor::new(vec![1], vec![0.0]).unwrap()];
        let err = gradcheck(
            |t, _| {
                let x = t[0].data()[0];
                Ok(Evaluation { loss: if x > 0.0 { f64::NAN } else { 0.0 }, grads: Some(vec![vec![0.0]]) })
            },
            &theta,
            GradcheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::NonFinite(_)));
    }

    #[test]
    fn large_epsilon_shows_truncation_error() {
        // cubic: central difference error is eps^2 exactly
        let theta = [Tensor::new(vec![1], vec![1.0]).unwrap()];
        let cubic = |t: &[Tensor], _: bool| {
            let x = t[0].data()[0];
            Ok(Evaluation { loss: x * x * x, grads: Some(vec![vec![3.0 * x * x]]) })
        };
        let opts = GradcheckOptions { epsilon: 1e-1, ..Default::default() };
        let r = gradcheck(cubic, &theta, opts).unwrap();
        assert!(!r.passed());
        assert_eq!(r.retried, 0);
        assert!((r.worst.unwrap().numeric - 3.01).abs() < 1e-12);
    }
}
