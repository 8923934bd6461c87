//! Deterministic minibatch training with Adam, plus JSON checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{DataKind, Dataset};
use crate::diffcore::{ParameterSet, Tensor};
use crate::distributions::{splitmix64, NoiseSource};
use crate::error::{Error, Result};
use crate::hvae::{BetaVector, HvaeConfig, HvaeModel, Likelihood, LossBreakdown};

/// Global gradient norm above which gradients are rescaled.
pub const GRAD_CLIP_NORM: f64 = 100.0;

/// Version written to and required from checkpoint files.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Rows per chunk when evaluating a loss over a whole dataset.
const EVAL_CHUNK: usize = 2048;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Record a trace point every this many steps (0 records only the last step).
    pub eval_interval: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 128,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            eval_interval: 500,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps {} must be positive", self.adam_eps));
        }
        Ok(())
    }
}

/// Adam moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: ParameterSet,
    pub v: ParameterSet,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParameterSet) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut ParameterSet,
    grads: &ParameterSet,
    state: &mut OptimizerState,
    spec: &TrainSpec,
) -> Result<()> {
    params.check_compatible(grads)?;
    params.check_compatible(&state.m)?;
    params.check_compatible(&state.v)?;
    state.step += 1;
    let (b1, b2) = (spec.adam_beta1, spec.adam_beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("compatible").data();
        let m = state.m.get_mut(name).expect("compatible").data_mut();
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
        }
        let v = state.v.get_mut(name).expect("compatible").data_mut();
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
        }
        let m = state.m.get(name).expect("compatible").data();
        let v = state.v.get(name).expect("compatible").data();
        for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = mi / c1;
            let v_hat = vi / c2;
            *pi -= spec.learning_rate * m_hat / (v_hat.sqrt() + spec.adam_eps);
        }
    }
    Ok(())
}

/// Minibatch loss components at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub loss: f64,
    pub distortion: f64,
    /// Top-first.
    pub rates: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    /// Points at every `eval_interval` steps and at the final step, in step order.
    pub points: Vec<TracePoint>,
    /// Minibatch loss at every step.
    pub losses: Vec<f64>,
}

impl TrainingTrace {
    pub fn last(&self) -> Option<&TracePoint> {
        self.points.last()
    }
}

/// Rejects a likelihood that does not fit the data type.
pub fn check_likelihood(config: &HvaeConfig, kind: DataKind) -> Result<()> {
    match (config.likelihood, kind) {
        (Likelihood::Bernoulli, DataKind::Continuous) => Err(Error::Config(
            "bernoulli likelihood needs binary data".into(),
        )),
        (Likelihood::Gaussian { .. }, DataKind::Binary) => Err(Error::Config(
            "gaussian likelihood fed binary data; use the bernoulli likelihood".into(),
        )),
        _ => Ok(()),
    }
}

/// Trains a fresh model. The model seed, minibatch order and latent noise
/// are derived from `spec.seed` alone, so the result is a pure function of
/// the arguments.
pub fn train(
    config: &HvaeConfig,
    data: &Dataset,
    betas: &BetaVector,
    spec: &TrainSpec,
) -> Result<(HvaeModel, TrainingTrace)> {
    config.validate()?;
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    if data.dim() != config.data_dim {
        return Err(Error::Config(format!(
            "dataset has dimension {} but the model expects {}",
            data.dim(),
            config.data_dim
        )));
    }
    if betas.len() != config.layers() {
        return Err(Error::Config(format!(
            "{} betas for {} layers",
            betas.len(),
            config.layers()
        )));
    }
    check_likelihood(config, data.kind)?;

    let root = NoiseSource::new(spec.seed);
    let mut model = HvaeModel::new(config.clone(), splitmix64(spec.seed))?;
    let mut order_rng = root.split(1);
    let mut noise = root.split(2);
    let mut trace = TrainingTrace::default();
    if spec.steps == 0 {
        return Ok((model, trace));
    }

    let n = data.len();
    let batch = spec.batch_size.min(n);
    let mut params = model.parameters();
    let mut state = OptimizerState::new(&params);
    let mut order = order_rng.permutation(n);
    let mut cursor = 0;

    for step in 1..=spec.steps {
        if cursor + batch > n {
            order = order_rng.permutation(n);
            cursor = 0;
        }
        let xb = data.x.select_rows(&order[cursor..cursor + batch]);
        cursor += batch;

        let (parts, mut grads) = model.loss_and_gradient(&xb, betas, &mut noise)?;
        if !parts.loss.is_finite() {
            return Err(Error::Divergence {
                step,
                distortion: parts.distortion,
                rates: parts.rates,
            });
        }
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(Error::Divergence {
                step,
                distortion: parts.distortion,
                rates: parts.rates,
            });
        }
        if norm > GRAD_CLIP_NORM {
            grads.scale(GRAD_CLIP_NORM / norm);
        }
        adam_step(&mut params, &grads, &mut state, spec)?;
        model.set_parameters(&params)?;

        trace.losses.push(parts.loss);
        let at_interval = spec.eval_interval > 0 && step % spec.eval_interval == 0;
        if at_interval || step == spec.steps {
            trace.points.push(TracePoint {
                step,
                loss: parts.loss,
                distortion: parts.distortion,
                rates: parts.rates,
            });
        }
    }
    Ok((model, trace))
}

/// Loss components averaged over every row of `x`, evaluated in chunks with
/// one latent sample per row drawn from `seed`.
pub fn evaluate_loss(model: &HvaeModel, x: &Tensor, betas: &BetaVector, seed: u64) -> Result<LossBreakdown> {
    let n = x.rows();
    if n == 0 {
        return Err(Error::invalid("cannot evaluate on an empty batch"));
    }
    let mut noise = NoiseSource::new(seed);
    let mut total = LossBreakdown {
        loss: 0.0,
        distortion: 0.0,
        rates: vec![0.0; betas.len()],
    };
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let w = chunk.len() as f64 / n as f64;
        let part = model.loss(&x.select_rows(chunk), betas, &mut noise)?;
        total.loss += w * part.loss;
        total.distortion += w * part.distortion;
        for (t, r) in total.rates.iter_mut().zip(&part.rates) {
            *t += w * r;
        }
    }
    Ok(total)
}

/// On-disk form of a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: HvaeConfig,
    pub seed: u64,
    /// Top-first.
    pub betas: Vec<f64>,
    pub params: ParameterSet,
}

impl Checkpoint {
    pub fn new(model: &HvaeModel, seed: u64, betas: &BetaVector) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            seed,
            betas: betas.as_slice().to_vec(),
            params: model.parameters(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        if !self.params.iter().all(|(_, t)| t.is_finite()) {
            return Err(Error::non_finite("checkpoint parameters"));
        }
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(CHECKPOINT_VERSION) => {}
            Some(v) => {
                return Err(Error::Format(format!(
                    "checkpoint format_version {v}, expected {CHECKPOINT_VERSION}"
                )))
            }
            None => return Err(Error::Format("checkpoint lacks format_version".into())),
        }
        let ckpt: Checkpoint = serde_json::from_value(value)?;
        ckpt.model()?;
        Ok(ckpt)
    }

    /// Rebuilds the model, checking parameter names and shapes against the config.
    pub fn model(&self) -> Result<HvaeModel> {
        let mut model = HvaeModel::zeros(self.config.clone())?;
        model
            .set_parameters(&self.params)
            .map_err(|e| Error::Format(format!("checkpoint parameters do not fit the config: {e}")))?;
        Ok(model)
    }

    pub fn betas(&self) -> Result<BetaVector> {
        BetaVector::new(self.betas.clone())
    }
}

pub fn save_checkpoint(model: &HvaeModel, seed: u64, betas: &BetaVector, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, Checkpoint::new(model, seed, betas).to_json()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{gen_binary_bars, gen_gaussian};

    fn one_param(v: f64) -> ParameterSet {
        [("p".to_string(), Tensor::vector(vec![v]))].into_iter().collect()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = one_param(0.7);
        let g = one_param(0.0);
        let mut s = OptimizerState::new(&p);
        adam_step(&mut p, &g, &mut s, &TrainSpec::default()).unwrap();
        assert_eq!(p.get("p").unwrap().data()[0], 0.7);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let spec = TrainSpec::default();
        for g in [3.0, -0.02, 1e4] {
            let mut p = one_param(1.0);
            let mut s = OptimizerState::new(&p);
            adam_step(&mut p, &one_param(g), &mut s, &spec).unwrap();
            let step = p.get("p").unwrap().data()[0] - 1.0;
            assert!((step + g.signum() * spec.learning_rate).abs() < 1e-9, "{step}");
        }
    }

    #[test]
    fn adam_minimizes_square() {
        let spec = TrainSpec {
            learning_rate: 0.1,
            ..TrainSpec::default()
        };
        let mut p = one_param(1.0);
        let mut s = OptimizerState::new(&p);
        for _ in 0..100 {
            let v = p.get("p").unwrap().data()[0];
            adam_step(&mut p, &one_param(2.0 * v), &mut s, &spec).unwrap();
        }
        assert!(p.get("p").unwrap().data()[0].abs() < 0.1);
    }

    #[test]
    fn adam_rejects_mismatched_grads() {
        let mut p = one_param(1.0);
        let g: ParameterSet = [("q".to_string(), Tensor::vector(vec![1.0]))].into_iter().collect();
        let mut s = OptimizerState::new(&p);
        assert!(adam_step(&mut p, &g, &mut s, &TrainSpec::default()).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(TrainSpec::default().validate().is_ok());
        for spec in [
            TrainSpec { learning_rate: 0.0, ..TrainSpec::default() },
            TrainSpec { batch_size: 0, ..TrainSpec::default() },
            TrainSpec { adam_beta2: 1.0, ..TrainSpec::default() },
            TrainSpec { adam_beta1: -0.1, ..TrainSpec::default() },
        ] {
            assert!(matches!(spec.validate(), Err(Error::Config(_))));
        }
    }

    fn tiny() -> (HvaeConfig, Dataset, BetaVector) {
        let mut c = HvaeConfig::new(2, vec![1, 2]);
        c.hidden = vec![8];
        let data = gen_gaussian(&[1.0, 1.0], 64, 3).unwrap();
        (c, data, BetaVector::uniform(2, 1.0).unwrap())
    }

    #[test]
    fn zero_steps_returns_initial_model() {
        let (c, data, b) = tiny();
        let spec = TrainSpec { steps: 0, seed: 4, ..TrainSpec::default() };
        let (m, trace) = train(&c, &data, &b, &spec).unwrap();
        assert_eq!(m, HvaeModel::new(c, splitmix64(4)).unwrap());
        assert!(trace.points.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let (c, data, b) = tiny();
        let spec = TrainSpec { steps: 30, batch_size: 16, eval_interval: 10, ..TrainSpec::default() };
        let (m1, t1) = train(&c, &data, &b, &spec).unwrap();
        let (m2, t2) = train(&c, &data, &b, &spec).unwrap();
        assert_eq!(m1.parameters(), m2.parameters());
        assert_eq!(t1, t2);
        assert_eq!(t1.points.iter().map(|p| p.step).collect::<Vec<_>>(), vec![10, 20, 30]);
        assert_eq!(t1.losses.len(), 30);
    }

    #[test]
    fn training_rejects_mismatches() {
        let (c, data, b) = tiny();
        let spec = TrainSpec { steps: 1, ..TrainSpec::default() };
        let empty = gen_gaussian(&[1.0, 1.0], 0, 1).unwrap();
        assert!(train(&c, &empty, &b, &spec).is_err());
        let wide = gen_gaussian(&[1.0, 1.0, 1.0], 8, 1).unwrap();
        assert!(matches!(train(&c, &wide, &b, &spec), Err(Error::Config(_))));
        let bars = gen_binary_bars(2, 8, 1).unwrap();
        let mut c4 = c.clone();
        c4.data_dim = 4;
        assert!(matches!(train(&c4, &bars, &b, &spec), Err(Error::Config(_))));
        assert!(train(&c, &data, &BetaVector::uniform(3, 1.0).unwrap(), &spec).is_err());
    }

    #[test]
    fn divergence_reports_step() {
        let (c, data, b) = tiny();
        let spec = TrainSpec { steps: 50, learning_rate: 1e300, ..TrainSpec::default() };
        match train(&c, &data, &b, &spec) {
            Err(Error::Divergence { step, .. }) => assert!(step >= 1),
            Err(Error::NonFinite(_)) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let (c, data, b) = tiny();
        let spec = TrainSpec { steps: 5, batch_size: 8, ..TrainSpec::default() };
        let (m, _) = train(&c, &data, &b, &spec).unwrap();
        let json = Checkpoint::new(&m, 7, &b).to_json().unwrap();
        let back = Checkpoint::from_json(&json).unwrap();
        assert_eq!(back.seed, 7);
        assert_eq!(back.model().unwrap(), m);
        assert_eq!(back.betas().unwrap(), b);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let (c, _, b) = tiny();
        let m = HvaeModel::new(c, 1).unwrap();
        let json = Checkpoint::new(&m, 1, &b).to_json().unwrap();
        let wrong_version = json.replacen("\"format_version\": 1", "\"format_version\": 2", 1);
        assert!(matches!(Checkpoint::from_json(&wrong_version), Err(Error::Format(_))));
        let renamed = json.replacen("px.0.bias", "px.9.bias", 1);
        assert!(Checkpoint::from_json(&renamed).is_err());
        assert!(Checkpoint::from_json("{not json").is_err());
        assert!(Checkpoint::from_json(&json[..json.len() / 2]).is_err());
    }

    #[test]
    fn evaluate_loss_matches_single_chunk() {
        let (c, data, b) = tiny();
        let m = HvaeModel::new(c, 2).unwrap();
        let a = evaluate_loss(&m, &data.x, &b, 5).unwrap();
        let direct = m.loss(&data.x, &b, &mut NoiseSource::new(5)).unwrap();
        assert!((a.loss - direct.loss).abs() < 1e-12);
    }
}
