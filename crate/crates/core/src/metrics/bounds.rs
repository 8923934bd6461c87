use crate::error::{Error, Result};

/// Summary of the label marginal used by the accuracy bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelPrior {
    /// `H[p(y)]` in nats.
    pub entropy: f64,
    /// Number of classes `M`.
    pub classes: usize,
    /// Largest class probability (the accuracy of always guessing it).
    pub max_prior: f64,
}

impl LabelPrior {
    pub fn uniform(classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid("accuracy bound needs M >= 2"));
        }
        Ok(Self {
            entropy: (classes as f64).ln(),
            classes,
            max_prior: 1.0 / classes as f64,
        })
    }

    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::invalid("accuracy bound needs M >= 2"));
        }
        if probs.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::invalid("class probabilities must lie in [0, 1]"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("class probabilities sum to {total}")));
        }
        Ok(Self {
            entropy: probs.iter().map(|&p| -xlogx(p)).sum(),
            classes: probs.len(),
            max_prior: probs.iter().cloned().fold(0.0, f64::max),
        })
    }

    /// Empirical prior of integer labels in `0..classes`.
    pub fn from_labels(labels: &[usize], classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("no labels"));
        }
        let mut counts = vec![0usize; classes];
        for &l in labels {
            *counts
                .get_mut(l)
                .ok_or_else(|| Error::invalid(format!("label {l} outside 0..{classes}")))? += 1;
        }
        let n = labels.len() as f64;
        Self::from_probs(&counts.iter().map(|&c| c as f64 / n).collect::<Vec<_>>())
    }
}

/// `p ln p` with `0 ln 0 = 0`.
fn xlogx(p: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * p.ln()
    }
}

/// Binary entropy in nats, zero at both endpoints.
pub fn binary_entropy(alpha: f64) -> f64 {
    -xlogx(alpha) - xlogx(1.0 - alpha)
}

/// `f(alpha) = H[y] - H2(alpha) - (1 - alpha) ln(M - 1)`: the least mutual
/// information with `y` that any classifier of accuracy `alpha` requires.
pub fn accuracy_bound_f(alpha: f64, prior: &LabelPrior) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("accuracy {alpha} outside [0, 1]")));
    }
    if prior.classes < 2 {
        return Err(Error::invalid("accuracy bound needs M >= 2"));
    }
    let m = prior.classes as f64;
    Ok(prior.entropy - binary_entropy(alpha) - (1.0 - alpha) * (m - 1.0).ln())
}

fn f_unchecked(alpha: f64, prior: &LabelPrior) -> f64 {
    let m = prior.classes as f64;
    prior.entropy - binary_entropy(alpha) - (1.0 - alpha) * (m - 1.0).ln()
}

/// Largest accuracy compatible with `info` nats of information about `y`:
/// the inverse of `f` on `[max_prior, 1]`, found by bisection. Targets above
/// `f(1) = H[y]` give 1 and targets below `f(max_prior)` give `max_prior`.
pub fn accuracy_bound_inverse(info: f64, prior: &LabelPrior) -> Result<f64> {
    if prior.classes < 2 {
        return Err(Error::invalid("accuracy bound needs M >= 2"));
    }
    if info.is_nan() {
        return Err(Error::non_finite("accuracy bound target"));
    }
    let (mut lo, mut hi) = (prior.max_prior, 1.0);
    if info >= f_unchecked(hi, prior) {
        return Ok(1.0);
    }
    if info <= f_unchecked(lo, prior) {
        return Ok(lo);
    }
    // Run to interval collapse rather than stopping at a loose residual, so
    // flat regions near max_prior still invert to full precision.
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f_unchecked(mid, prior) < info {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (flo, fhi) = (f_unchecked(lo, prior), f_unchecked(hi, prior));
    Ok(if (info - flo).abs() <= (fhi - info).abs() { lo } else { hi })
}
