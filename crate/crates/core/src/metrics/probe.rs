use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Gradient-norm threshold that ends logistic-regression training.
pub const LOGREG_TOLERANCE: f64 = 1e-6;
pub const LOGREG_MAX_ITERS: usize = 10_000;
/// L2 penalty keeping logistic-regression weights finite on separable data.
pub const LOGREG_L2: f64 = 1e-4;
pub const DEFAULT_KNN_K: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProbeKind {
    Logreg,
    Knn { k: usize },
}

#[derive(Clone, Debug, PartialEq)]
enum Fitted {
    Logreg {
        /// `[d, M]`, acting on standardized features.
        weights: Vec<f64>,
        bias: Vec<f64>,
        shift: Vec<f64>,
        scale: Vec<f64>,
    },
    Knn {
        k: usize,
        x: Tensor,
        y: Vec<usize>,
    },
}

/// A fitted downstream classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeClassifier {
    classes: usize,
    dim: usize,
    fitted: Fitted,
}

fn check_features(x: &Tensor, y: &[usize]) -> Result<()> {
    if x.shape().len() != 2 {
        return Err(Error::shape(format!("features must be a matrix, got {:?}", x.shape())));
    }
    if x.rows() != y.len() {
        return Err(Error::shape(format!("{} feature rows but {} labels", x.rows(), y.len())));
    }
    if !x.is_finite() {
        return Err(Error::non_finite("probe features"));
    }
    Ok(())
}

/// Fits a probe on `features` (one row per sample) and labels in `0..classes`.
pub fn fit_probe(kind: ProbeKind, features: &Tensor, labels: &[usize], classes: usize) -> Result<ProbeClassifier> {
    check_features(features, labels)?;
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {l} outside 0..{classes}")));
    }
    let first = labels.first().ok_or_else(|| Error::invalid("empty probe training set"))?;
    if labels.iter().all(|l| l == first) {
        return Err(Error::invalid("probe training set holds a single class"));
    }
    let dim = features.cols();
    let fitted = match kind {
        ProbeKind::Logreg => fit_logreg(features, labels, classes),
        ProbeKind::Knn { k } => {
            if k == 0 {
                return Err(Error::invalid("kNN needs k >= 1"));
            }
            Fitted::Knn {
                k,
                x: features.clone(),
                y: labels.to_vec(),
            }
        }
    };
    Ok(ProbeClassifier { classes, dim, fitted })
}

fn fit_logreg(x: &Tensor, y: &[usize], m: usize) -> Fitted {
    let (n, d) = (x.rows(), x.cols());
    let mut shift = vec![0.0; d];
    let mut scale = vec![1.0; d];
    for k in 0..d {
        let mean = (0..n).map(|i| x.row(i)[k]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (x.row(i)[k] - mean).powi(2)).sum::<f64>() / n as f64;
        shift[k] = mean;
        scale[k] = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
    }
    let xs: Vec<f64> = (0..n)
        .flat_map(|i| (0..d).map(move |k| (i, k)))
        .map(|(i, k)| (x.row(i)[k] - shift[k]) * scale[k])
        .collect();

    // Softmax Hessian is bounded by half the feature second moment (plus bias).
    let step = 1.0 / (0.5 * (d as f64 + 1.0) + LOGREG_L2);
    let mut w = vec![0.0; d * m];
    let mut b = vec![0.0; m];
    let mut gw = vec![0.0; d * m];
    let mut gb = vec![0.0; m];
    let mut p = vec![0.0; m];
    for _ in 0..LOGREG_MAX_ITERS {
        gw.iter_mut().for_each(|g| *g = 0.0);
        gb.iter_mut().for_each(|g| *g = 0.0);
        for i in 0..n {
            let row = &xs[i * d..(i + 1) * d];
            softmax_into(row, &w, &b, &mut p);
            p[y[i]] -= 1.0;
            for (k, &xk) in row.iter().enumerate() {
                for c in 0..m {
                    gw[k * m + c] += xk * p[c];
                }
            }
            for c in 0..m {
                gb[c] += p[c];
            }
        }
        let inv_n = 1.0 / n as f64;
        let mut norm_sq = 0.0;
        for (g, wv) in gw.iter_mut().zip(&w) {
            *g = *g * inv_n + LOGREG_L2 * wv;
            norm_sq += *g * *g;
        }
        for g in gb.iter_mut() {
            *g *= inv_n;
            norm_sq += *g * *g;
        }
        if norm_sq.sqrt() < LOGREG_TOLERANCE {
            break;
        }
        for (wv, g) in w.iter_mut().zip(&gw) {
            *wv -= step * g;
        }
        for (bv, g) in b.iter_mut().zip(&gb) {
            *bv -= step * g;
        }
    }
    Fitted::Logreg {
        weights: w,
        bias: b,
        shift,
        scale,
    }
}

fn softmax_into(row: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let m = b.len();
    out.copy_from_slice(b);
    for (k, &xk) in row.iter().enumerate() {
        for c in 0..m {
            out[c] += xk * w[k * m + c];
        }
    }
    let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in out.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in out.iter_mut() {
        *v /= total;
    }
}

impl ProbeClassifier {
    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Predictive distribution over classes for each row. For kNN this is
    /// the fraction of the `k` neighbors voting for each class.
    pub fn predict_proba(&self, features: &Tensor) -> Result<Vec<Vec<f64>>> {
        if features.shape().len() != 2 || features.cols() != self.dim {
            return Err(Error::shape(format!(
                "probe expects {} features, got shape {:?}",
                self.dim,
                features.shape()
            )));
        }
        if !features.is_finite() {
            return Err(Error::non_finite("probe features"));
        }
        let n = features.rows();
        let m = self.classes;
        match &self.fitted {
            Fitted::Logreg {
                weights,
                bias,
                shift,
                scale,
            } => Ok((0..n)
                .map(|i| {
                    let row: Vec<f64> = features
                        .row(i)
                        .iter()
                        .zip(shift.iter().zip(scale))
                        .map(|(v, (s, c))| (v - s) * c)
                        .collect();
                    let mut p = vec![0.0; m];
                    softmax_into(&row, weights, bias, &mut p);
                    p
                })
                .collect()),
            Fitted::Knn { k, x, y } => Ok((0..n)
                .map(|i| {
                    let votes = knn_votes(features.row(i), x, y, *k, m);
                    let total: f64 = votes.iter().sum();
                    votes.iter().map(|v| v / total).collect()
                })
                .collect()),
        }
    }

    /// Most probable class per row, ties to the smallest class index.
    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        Ok(self
            .predict_proba(features)?
            .iter()
            .map(|p| argmax_first(p))
            .collect())
    }
}

/// Neighbor votes; distance ties go to the lower training index.
fn knn_votes(q: &[f64], x: &Tensor, y: &[usize], k: usize, m: usize) -> Vec<f64> {
    let mut dist: Vec<(f64, usize)> = (0..x.rows())
        .map(|j| {
            let d2 = x.row(j).iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            (d2, j)
        })
        .collect();
    let k = k.min(dist.len());
    dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut votes = vec![0.0; m];
    for &(_, j) in &dist[..k] {
        votes[y[j]] += 1.0;
    }
    votes
}

fn argmax_first(p: &[f64]) -> usize {
    let mut best = 0;
    for (c, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = c;
        }
    }
    best
}

/// Fraction of rows whose predicted class equals the label.
pub fn predict_accuracy(clf: &ProbeClassifier, features: &Tensor, labels: &[usize]) -> Result<f64> {
    check_features(features, labels)?;
    if labels.is_empty() {
        return Err(Error::invalid("empty probe test set"));
    }
    let pred = clf.predict(features)?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}
