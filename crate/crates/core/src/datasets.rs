//! Procedural datasets with known entropies and labels.
//!
//! * [`gen_gaussian`]: zero-mean diagonal Gaussian, analytic entropy.
//! * [`gen_labeled_mixture`]: equiprobable Gaussian mixture, Monte Carlo entropy.
//! * [`gen_binary_bars`]: binary images holding a single bar, exact discrete entropy.

use std::f64::consts::{E, PI};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::distributions::NoiseSource;
use crate::error::{Error, Result};

/// Samples drawn for the mixture entropy estimate.
pub const MIXTURE_ENTROPY_SAMPLES: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Continuous,
    Binary,
}

/// Labeled in-memory samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, d]` samples.
    pub x: Tensor,
    /// Labels in `0..classes`.
    pub y: Vec<usize>,
    pub classes: usize,
    pub kind: DataKind,
    /// Entropy of the data distribution in nats, when known.
    pub entropy_nats: Option<f64>,
    /// Standard error of `entropy_nats` (zero for exact values).
    pub entropy_se: Option<f64>,
    /// Entropy of the label marginal in nats.
    pub label_entropy_nats: f64,
}

impl Dataset {
    /// Validates and assembles a dataset without entropy information.
    pub fn new(x: Tensor, y: Vec<usize>, classes: usize, kind: DataKind) -> Result<Self> {
        if x.shape().len() != 2 {
            return Err(Error::shape(format!("samples must be a matrix, got {:?}", x.shape())));
        }
        if x.rows() != y.len() {
            return Err(Error::shape(format!("{} samples but {} labels", x.rows(), y.len())));
        }
        if classes == 0 {
            return Err(Error::invalid("class count must be at least 1"));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} outside 0..{classes}")));
        }
        if !x.is_finite() {
            return Err(Error::non_finite("dataset samples"));
        }
        if kind == DataKind::Binary && x.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("binary dataset holds values other than 0 and 1"));
        }
        Ok(Self {
            x,
            y,
            classes,
            kind,
            entropy_nats: None,
            entropy_se: None,
            label_entropy_nats: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.shape()[1]
    }

    /// Rows `idx`, keeping the distribution-level metadata.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            ..self.metadata_only()
        }
    }

    /// Splits into the first `n` rows and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    /// Empirical label frequencies.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.y {
            counts[l] += 1;
        }
        counts
    }

    fn metadata_only(&self) -> Dataset {
        Dataset {
            x: Tensor::zeros(&[0, self.dim()]),
            y: Vec::new(),
            classes: self.classes,
            kind: self.kind,
            entropy_nats: self.entropy_nats,
            entropy_se: self.entropy_se,
            label_entropy_nats: self.label_entropy_nats,
        }
    }

    /// Writes a header row `x0,...,x{d-1},label` and one sample per line.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.dim()).map(|i| format!("x{i}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for (i, &label) in self.y.iter().enumerate() {
            let mut rec: Vec<String> = self.x.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(label.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Reads the format of [`Dataset::write_csv`]. The class count is the
    /// largest label plus one, and the kind is binary when every value is 0 or 1.
    pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        if header.len() < 2 || &header[header.len() - 1] != "label" {
            return Err(Error::Format("dataset CSV needs feature columns and a final `label` column".into()));
        }
        let d = header.len() - 1;
        let mut data = Vec::new();
        let mut y = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            for field in rec.iter().take(d) {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("row {}: bad number {field:?}", line + 1)))?;
                data.push(v);
            }
            let label = &rec[d];
            y.push(
                label
                    .trim()
                    .parse()
                    .map_err(|_| Error::Format(format!("row {}: bad label {label:?}", line + 1)))?,
            );
        }
        let classes = y.iter().max().map_or(1, |m| m + 1);
        let kind = if !data.is_empty() && data.iter().all(|&v| v == 0.0 || v == 1.0) {
            DataKind::Binary
        } else {
            DataKind::Continuous
        };
        let x = Tensor::matrix(y.len(), d, data)?;
        let mut ds = Dataset::new(x, y, classes, kind)?;
        ds.label_entropy_nats = empirical_entropy(&ds.label_counts());
        Ok(ds)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

fn empirical_entropy(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

/// Differential entropy of `N(0, diag(variances))` in nats.
pub fn gaussian_entropy(variances: &[f64]) -> f64 {
    variances.iter().map(|&v| 0.5 * (2.0 * PI * E * v).ln()).sum()
}

/// `n` samples from `N(0, diag(variances))` with a single dummy label.
pub fn gen_gaussian(variances: &[f64], n: usize, seed: u64) -> Result<Dataset> {
    if variances.is_empty() {
        return Err(Error::invalid("need at least one dimension"));
    }
    if let Some(v) = variances.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::invalid(format!("variance {v} must be positive and finite")));
    }
    let d = variances.len();
    let mut noise = NoiseSource::new(seed);
    let sd: Vec<f64> = variances.iter().map(|v| v.sqrt()).collect();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        for s in &sd {
            data.push(s * noise.standard_normal());
        }
    }
    let mut ds = Dataset::new(Tensor::matrix(n, d, data)?, vec![0; n], 1, DataKind::Continuous)?;
    ds.entropy_nats = Some(gaussian_entropy(variances));
    ds.entropy_se = Some(0.0);
    Ok(ds)
}

/// Component means of the labeled mixture: `separation * e_k` when
/// `d >= M`, otherwise `M` points on a circle of radius `separation` in the
/// first two coordinates (a centred line when `d == 1`).
pub fn mixture_means(classes: usize, d: usize, separation: f64) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|k| {
            let mut mu = vec![0.0; d];
            if d >= classes {
                mu[k] = separation;
            } else if d == 1 {
                mu[0] = separation * (k as f64 - (classes as f64 - 1.0) / 2.0);
            } else {
                let t = 2.0 * PI * k as f64 / classes as f64;
                mu[0] = separation * t.cos();
                mu[1] = separation * t.sin();
            }
            mu
        })
        .collect()
}

/// `log((1/M) sum_k N(x; mu_k, I))`.
pub fn mixture_log_density(x: &[f64], means: &[Vec<f64>]) -> f64 {
    let d = x.len() as f64;
    let logs: Vec<f64> = means
        .iter()
        .map(|mu| {
            let sq: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
            -0.5 * sq
        })
        .collect();
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    lse - (means.len() as f64).ln() - 0.5 * d * (2.0 * PI).ln()
}

/// Monte Carlo entropy of the unit-covariance mixture with the given means,
/// returned with its standard error.
pub fn mixture_entropy_mc(means: &[Vec<f64>], samples: usize, seed: u64) -> (f64, f64) {
    let mut noise = NoiseSource::new(seed);
    let d = means[0].len();
    let mut x = vec![0.0; d];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        let mu = &means[noise.below(means.len())];
        for (xi, m) in x.iter_mut().zip(mu) {
            *xi = m + noise.standard_normal();
        }
        let v = -mixture_log_density(&x, means);
        sum += v;
        sum_sq += v * v;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `n` samples of an equiprobable `M`-component mixture of unit-covariance
/// Gaussians in `d` dimensions (see [`mixture_means`]).
pub fn gen_labeled_mixture(
    classes: usize,
    d: usize,
    separation: f64,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::invalid("mixture needs at least 2 classes"));
    }
    if d == 0 {
        return Err(Error::invalid("mixture needs at least one dimension"));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::invalid(format!("separation {separation} must be finite and >= 0")));
    }
    let means = mixture_means(classes, d, separation);
    let root = NoiseSource::new(seed);
    let mut noise = root.split(0);
    let mut data = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let k = noise.below(classes);
        y.push(k);
        for m in &means[k] {
            data.push(m + noise.standard_normal());
        }
    }
    let mut ds = Dataset::new(Tensor::matrix(n, d, data)?, y, classes, DataKind::Continuous)?;
    let (h, se) = mixture_entropy_mc(&means, MIXTURE_ENTROPY_SAMPLES, root.split(1).seed());
    ds.entropy_nats = Some(h);
    ds.entropy_se = Some(se);
    ds.label_entropy_nats = (classes as f64).ln();
    Ok(ds)
}

/// `g x g` binary images, each holding one full horizontal or vertical bar.
/// Label `k < g` is the horizontal bar in row `k`; label `g + k` the vertical
/// bar in column `k`.
pub fn gen_binary_bars(grid: usize, n: usize, seed: u64) -> Result<Dataset> {
    if grid < 2 {
        return Err(Error::invalid("bar grid must be at least 2"));
    }
    let mut noise = NoiseSource::new(seed);
    let classes = 2 * grid;
    let mut data = Vec::with_capacity(n * grid * grid);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let label = noise.below(classes);
        data.extend(bar_image(grid, label));
        y.push(label);
    }
    let mut ds = Dataset::new(Tensor::matrix(n, grid * grid, data)?, y, classes, DataKind::Binary)?;
    let h = (classes as f64).ln();
    ds.entropy_nats = Some(h);
    ds.entropy_se = Some(0.0);
    ds.label_entropy_nats = h;
    Ok(ds)
}

/// Row-major pixels of the bar with the given label.
pub fn bar_image(grid: usize, label: usize) -> Vec<f64> {
    let mut img = vec![0.0; grid * grid];
    for k in 0..grid {
        let idx = if label < grid {
            label * grid + k
        } else {
            k * grid + (label - grid)
        };
        img[idx] = 1.0;
    }
    img
}

/// Recovers the label of a bar image, if it holds exactly one full bar.
pub fn decode_bar(grid: usize, pixels: &[f64]) -> Option<usize> {
    (0..2 * grid).find(|&label| bar_image(grid, label) == pixels)
}
