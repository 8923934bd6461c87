//! Evaluation quantities: PSNR, Inception Score and its diversity/sharpness
//! factors, mixture-of-posteriors mutual information, the accuracy bound
//! `f` and its inverse, and downstream probe classifiers.

mod bounds;
mod mi;
mod probe;

pub use bounds::{accuracy_bound_f, accuracy_bound_inverse, binary_entropy, LabelPrior};
pub use mi::{mi_estimate, MiEstimate, JACKKNIFE_GROUPS};
pub use probe::{
    fit_probe, predict_accuracy, ProbeClassifier, ProbeKind, DEFAULT_KNN_K, LOGREG_L2, LOGREG_MAX_ITERS,
    LOGREG_TOLERANCE,
};

use serde::{Deserialize, Serialize};

use crate::datasets::{DataKind, Dataset};
use crate::diffcore::Tensor;
use crate::distributions::NoiseSource;
use crate::error::{Error, Result};
use crate::hvae::{layer_rates, Draw, HvaeModel};

/// `10 log10(max_value^2 / MSE)` in dB; `+inf` when the reconstruction is exact.
pub fn psnr(x: &Tensor, x_hat: &Tensor, max_value: f64) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", x.shape(), x_hat.shape())));
    }
    if x.is_empty() {
        return Err(Error::invalid("PSNR of an empty batch"));
    }
    if !(max_value > 0.0 && max_value.is_finite()) {
        return Err(Error::invalid(format!("PSNR peak {max_value} must be positive")));
    }
    let mse = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_value * max_value / mse).log10())
}

/// `IS = diversity * sharpness`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InceptionScore {
    pub is: f64,
    /// `exp(H[p(y)])` of the mean predictive.
    pub diversity: f64,
    /// `exp(-mean_x H[p(y|x)])`.
    pub sharpness: f64,
}

fn plogp(p: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * p.ln()
    }
}

/// Inception Score of per-sample class predictives (one row per generated sample).
pub fn inception_score(predictive: &[Vec<f64>]) -> Result<InceptionScore> {
    if predictive.len() < 2 {
        return Err(Error::invalid("inception score needs at least 2 samples"));
    }
    let m = predictive[0].len();
    if m == 0 {
        return Err(Error::invalid("predictive over zero classes"));
    }
    for (i, p) in predictive.iter().enumerate() {
        if p.len() != m {
            return Err(Error::shape(format!("predictive row {i} has {} classes, expected {m}", p.len())));
        }
        let total: f64 = p.iter().sum();
        if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "predictive row {i} is not a distribution (sum {total})"
            )));
        }
    }
    let n = predictive.len() as f64;
    let mut marginal = vec![0.0; m];
    for p in predictive {
        for (acc, v) in marginal.iter_mut().zip(p) {
            *acc += v / n;
        }
    }
    let mean_kl = predictive
        .iter()
        .map(|p| {
            p.iter()
                .zip(&marginal)
                .map(|(&a, &b)| if a == 0.0 { 0.0 } else { a * (a.ln() - b.ln()) })
                .sum::<f64>()
        })
        .sum::<f64>()
        / n;
    let marginal_entropy: f64 = -marginal.iter().map(|&p| plogp(p)).sum::<f64>();
    let mean_entropy = -predictive
        .iter()
        .map(|p| p.iter().map(|&v| plogp(v)).sum::<f64>())
        .sum::<f64>()
        / n;
    Ok(InceptionScore {
        is: mean_kl.exp(),
        diversity: marginal_entropy.exp(),
        sharpness: (-mean_entropy).exp(),
    })
}

/// Inception Score of `samples` as judged by `classifier`.
pub fn inception_score_with(classifier: &ProbeClassifier, samples: &Tensor) -> Result<InceptionScore> {
    inception_score(&classifier.predict_proba(samples)?)
}

/// Label marginal of a dataset: uniform when the stored label entropy is
/// `ln M`, otherwise the empirical class frequencies.
pub fn dataset_prior(data: &Dataset) -> Result<LabelPrior> {
    let uniform = (data.label_entropy_nats - (data.classes as f64).ln()).abs() < 1e-12;
    if uniform {
        LabelPrior::uniform(data.classes)
    } else {
        LabelPrior::from_labels(&data.y, data.classes)
    }
}

/// Probe and information results for one latent layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerProbe {
    pub layer: usize,
    /// `E[R(z_{>=layer})]`, the sum of the rates of this layer and all above it.
    pub rate_above: f64,
    pub mi: f64,
    pub mi_se: f64,
    pub acc_logreg: f64,
    pub acc_knn: f64,
    /// `f^-1(rate_above)`.
    pub bound: f64,
}

/// Everything measured for one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub distortion: f64,
    pub psnr: f64,
    /// Top-first.
    pub rates: Vec<f64>,
    pub total_rate: f64,
    /// `-(D + R)`.
    pub elbo: f64,
    pub is: f64,
    pub diversity: f64,
    pub sharpness: f64,
    /// Top-first, one entry per probed layer.
    pub probes: Vec<LayerProbe>,
}

impl RunMetrics {
    pub fn probe(&self, layer: usize) -> Option<&LayerProbe> {
        self.probes.iter().find(|p| p.layer == layer)
    }

    /// Rate sum and IS identities, and accuracies within `[0, 1]`.
    pub fn check_invariants(&self) -> Result<()> {
        let sum: f64 = self.rates.iter().sum();
        if (sum - self.total_rate).abs() > 1e-9 {
            return Err(Error::invalid(format!("rate sum {sum} != total {}", self.total_rate)));
        }
        if self.is.is_finite() && (self.is - self.diversity * self.sharpness).abs() > 1e-9 * self.is.abs() {
            return Err(Error::invalid("IS differs from diversity x sharpness".to_string()));
        }
        for p in &self.probes {
            for a in [p.acc_logreg, p.acc_knn] {
                if a.is_finite() && !(0.0..=1.0).contains(&a) {
                    return Err(Error::invalid(format!("accuracy {a} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }
}

/// Evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// PSNR peak value; `None` uses 1 for binary data and the value range of
    /// the evaluation set otherwise.
    pub psnr_peak: Option<f64>,
    /// Whether PSNR reconstructions take the mode or a sample at each step.
    pub psnr_draw: Draw,
    /// Generated samples scored by the Inception Score.
    pub is_samples: usize,
    /// Posterior draws per point in the MI estimate (0 scores at the mean).
    pub mi_draws: usize,
    pub knn_k: usize,
    /// Layers to probe, top-first.
    pub probe_layers: Vec<usize>,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            psnr_peak: None,
            psnr_draw: Draw::Mean,
            is_samples: 1000,
            mi_draws: 1,
            knn_k: DEFAULT_KNN_K,
            probe_layers: vec![2, 1],
            seed: 0,
        }
    }
}

fn peak_for(data: &Dataset, opts: &EvalOptions) -> f64 {
    if let Some(p) = opts.psnr_peak {
        return p;
    }
    match data.kind {
        DataKind::Binary => 1.0,
        DataKind::Continuous => {
            let lo = data.x.data().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = data.x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                hi - lo
            } else {
                1.0
            }
        }
    }
}

/// Reusable evaluation context for one train/eval dataset pair.
///
/// Distortion, rates, PSNR and MI use all of `eval`. Probes are fitted on
/// the first half of `eval` and scored on the second half. The Inception
/// Score classifier is a logistic regression on raw samples of `train`,
/// fitted once here. Label-dependent metrics are NaN when the data has
/// fewer than two classes.
pub struct Evaluator<'a> {
    eval: &'a Dataset,
    opts: EvalOptions,
    classifier: Option<ProbeClassifier>,
    prior: Option<LabelPrior>,
    peak: f64,
}

impl<'a> Evaluator<'a> {
    pub fn new(train: &Dataset, eval: &'a Dataset, opts: EvalOptions) -> Result<Self> {
        if eval.len() < 4 {
            return Err(Error::invalid("evaluation set needs at least 4 samples"));
        }
        if train.dim() != eval.dim() {
            return Err(Error::shape("train and eval sets differ in dimension"));
        }
        let labeled = eval.classes >= 2 && train.classes >= 2;
        let classifier = if labeled && opts.is_samples >= 2 {
            Some(fit_probe(ProbeKind::Logreg, &train.x, &train.y, train.classes)?)
        } else {
            None
        };
        let prior = if labeled { Some(dataset_prior(eval)?) } else { None };
        let peak = peak_for(eval, &opts);
        Ok(Self {
            eval,
            opts,
            classifier,
            prior,
            peak,
        })
    }

    pub fn options(&self) -> &EvalOptions {
        &self.opts
    }

    pub fn evaluate(&self, model: &HvaeModel) -> Result<RunMetrics> {
        let (eval, opts) = (self.eval, &self.opts);
        let big_l = model.config().layers();
        if let Some(&l) = opts.probe_layers.iter().find(|&&l| l == 0 || l > big_l) {
            return Err(Error::Config(format!("probe layer {l} outside 1..={big_l}")));
        }
        let root = NoiseSource::new(opts.seed);

        let trace = model.infer(&eval.x, &mut root.split(1), Draw::Sample)?;
        let distortion = model.distortion(&trace, &eval.x)?;
        let rates = layer_rates(&trace);
        let total_rate: f64 = rates.iter().sum();

        let recon = model.reconstruct(&eval.x, &mut root.split(2), opts.psnr_draw)?;
        let psnr = psnr(&eval.x, &recon, self.peak)?;

        let score = match &self.classifier {
            Some(clf) => {
                let samples = model.generate(opts.is_samples, &mut root.split(3), Draw::Mean)?;
                inception_score_with(clf, &samples)?
            }
            None => InceptionScore {
                is: f64::NAN,
                diversity: f64::NAN,
                sharpness: f64::NAN,
            },
        };

        let mut probes = Vec::new();
        if let Some(prior) = &self.prior {
            let modes = model.infer(&eval.x, &mut root.split(4), Draw::Mean)?;
            let half = eval.len() / 2;
            let fit_idx: Vec<usize> = (0..half).collect();
            let test_idx: Vec<usize> = (half..eval.len()).collect();
            let fit_y: Vec<usize> = fit_idx.iter().map(|&i| eval.y[i]).collect();
            let test_y: Vec<usize> = test_idx.iter().map(|&i| eval.y[i]).collect();
            for &layer in &opts.probe_layers {
                let rate_above: f64 = rates[..=big_l - layer].iter().sum();
                let mi = mi_estimate(
                    &trace.layer(layer).q,
                    &eval.y,
                    opts.mi_draws,
                    root.split(10 + layer as u64).seed(),
                )?;
                let mu = modes.layer(layer).mode();
                let (fx, tx) = (mu.select_rows(&fit_idx), mu.select_rows(&test_idx));
                let acc = |kind| -> Result<f64> {
                    let clf = fit_probe(kind, &fx, &fit_y, eval.classes)?;
                    predict_accuracy(&clf, &tx, &test_y)
                };
                probes.push(LayerProbe {
                    layer,
                    rate_above,
                    mi: mi.value,
                    mi_se: mi.se,
                    acc_logreg: acc(ProbeKind::Logreg)?,
                    acc_knn: acc(ProbeKind::Knn { k: opts.knn_k })?,
                    bound: accuracy_bound_inverse(rate_above, prior)?,
                });
            }
        }

        Ok(RunMetrics {
            distortion,
            psnr,
            total_rate,
            elbo: -(distortion + total_rate),
            rates,
            is: score.is,
            diversity: score.diversity,
            sharpness: score.sharpness,
            probes,
        })
    }
}

/// One-off [`Evaluator`] run.
pub fn evaluate_model(model: &HvaeModel, train: &Dataset, eval: &Dataset, opts: &EvalOptions) -> Result<RunMetrics> {
    Evaluator::new(train, eval, opts.clone())?.evaluate(model)
}
