//! L-layer hierarchical VAE with top-down inference and per-layer rates.
//!
//! Layers are numbered from `L` (coarsest) down to `1`. Every user-facing
//! list that is indexed by layer (latent dims, β-vectors, rates, trace
//! layers) is ordered top-first: `[z_L, z_{L-1}, ..., z_1]`.
//!
//! Generative model: `p(z_L) = N(0, I)`, `p(z_l | z_{>=l+1})` diagonal
//! Gaussian heads, and `p(x | z_1)` (Gaussian with fixed `sigma_x`, or
//! Bernoulli). Inference follows the same order, `q(z_L | x)` then
//! `q(z_l | z_{>=l+1}, x)`, so the total rate splits exactly into per-layer
//! rates.
//!
//! Two inference wirings are supported:
//! * [`InferenceStyle::TopDown`]: each `q` head reads `[z_{l+1}, ..., z_L, x]`.
//! * [`InferenceStyle::Ladder`]: a deterministic bottom-up pass produces
//!   features `d_1, ..., d_L` from `x`; the bottom-up Gaussian read off `d_l`
//!   is merged with the top-down prior `p(z_l | z_{>=l+1})` by precision
//!   weighting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Activation, Network, ParameterSet, Tape, Tensor, Var};
use crate::distributions::{self, DiagGaussian, GaussianVar, NoiseSource};
use crate::error::{Error, Result};

/// `softplus(SIGMA_ONE_BIAS) == 1`.
pub const SIGMA_ONE_BIAS: f64 = 0.541_324_854_612_918_1;

/// Default observation noise for Gaussian likelihoods.
pub const DEFAULT_SIGMA_X: f64 = 0.71;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Likelihood {
    /// `N(g(z_1), sigma_x^2 I)` with `sigma_x` fixed.
    Gaussian { sigma_x: f64 },
    /// `Bern(sigmoid(g(z_1)))` for 0/1 data.
    Bernoulli,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceStyle {
    TopDown,
    #[serde(rename = "lvae")]
    Ladder,
}

/// Whether to draw a sample or take the mean at a stochastic step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Draw {
    Sample,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HvaeConfig {
    pub data_dim: usize,
    /// Latent sizes, top-first: `[dim z_L, ..., dim z_1]`.
    pub latent_dims: Vec<usize>,
    #[serde(default = "default_likelihood")]
    pub likelihood: Likelihood,
    #[serde(default = "default_inference")]
    pub inference: InferenceStyle,
    /// Hidden widths shared by every head network.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_likelihood() -> Likelihood {
    Likelihood::Gaussian {
        sigma_x: DEFAULT_SIGMA_X,
    }
}

fn default_inference() -> InferenceStyle {
    InferenceStyle::TopDown
}

fn default_hidden() -> Vec<usize> {
    vec![32]
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl HvaeConfig {
    /// Gaussian likelihood with `sigma_x = 0.71`, top-down inference, one
    /// hidden layer of 32 tanh units.
    pub fn new(data_dim: usize, latent_dims: Vec<usize>) -> Self {
        Self {
            data_dim,
            latent_dims,
            likelihood: default_likelihood(),
            inference: default_inference(),
            hidden: default_hidden(),
            activation: default_activation(),
        }
    }

    /// Number of latent layers `L`.
    pub fn layers(&self) -> usize {
        self.latent_dims.len()
    }

    /// Size of `z_layer` (1-based layer number).
    pub fn latent_dim(&self, layer: usize) -> usize {
        self.latent_dims[self.layers() - layer]
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 latent layers, got {}",
                self.layers()
            )));
        }
        if self.data_dim == 0 || self.latent_dims.contains(&0) || self.hidden.contains(&0) {
            return Err(Error::Config("all dimensions must be >= 1".into()));
        }
        if let Likelihood::Gaussian { sigma_x } = self.likelihood {
            if !(sigma_x > 0.0 && sigma_x.is_finite()) {
                return Err(Error::Config(format!("sigma_x must be > 0, got {sigma_x}")));
            }
        }
        Ok(())
    }

    fn ladder_width(&self) -> usize {
        self.hidden.first().copied().unwrap_or(self.data_dim)
    }
}

/// Per-layer Lagrange multipliers, top-first: `[beta_L, ..., beta_1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BetaVector(Vec<f64>);

impl BetaVector {
    pub fn new(top_first: Vec<f64>) -> Result<Self> {
        if top_first.is_empty() {
            return Err(Error::invalid("empty beta vector"));
        }
        if let Some(b) = top_first.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
            return Err(Error::invalid(format!("every beta must be > 0, got {b}")));
        }
        Ok(Self(top_first))
    }

    pub fn uniform(layers: usize, beta: f64) -> Result<Self> {
        Self::new(vec![beta; layers])
    }

    /// Skips the positivity check. Only meant for diagnostics such as
    /// evaluating the loss with all betas at zero.
    pub fn unchecked(top_first: Vec<f64>) -> Self {
        Self(top_first)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `beta_layer` for a 1-based layer number.
    pub fn get(&self, layer: usize) -> f64 {
        self.0[self.0.len() - layer]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Recorded quantities for one latent layer.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// 1-based layer number.
    pub layer: usize,
    pub z: Tensor,
    pub q: DiagGaussian,
    pub p: DiagGaussian,
    /// Per-sample `log q(z_l | ...) - log p(z_l | ...)`.
    pub log_ratio: Vec<f64>,
    /// Per-sample closed-form KL between `q` and `p` at the sampled conditioners.
    pub kl: Vec<f64>,
}

impl LayerTrace {
    /// Mode of `q(z_l | ...)`, one row per data point.
    pub fn mode(&self) -> &Tensor {
        self.q.mean()
    }
}

/// One inference pass over a batch.
#[derive(Clone, Debug)]
pub struct InferenceTrace {
    /// Top-first: `layers[0]` is `z_L`.
    pub layers: Vec<LayerTrace>,
    /// Per-sample `log q({z_l}|x) - log p({z_l})` from the joint densities.
    pub total_log_ratio: Vec<f64>,
    /// Decoder output: Gaussian mean or Bernoulli probabilities.
    pub decoder: Tensor,
}

impl InferenceTrace {
    pub fn batch(&self) -> usize {
        self.total_log_ratio.len()
    }

    pub fn layer(&self, layer: usize) -> &LayerTrace {
        &self.layers[self.layers.len() - layer]
    }
}

/// Loss value and its components, all batch means in nats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss: f64,
    pub distortion: f64,
    /// Top-first layer rates `[R(z_L), R(z_{L-1}|z_L), ..., R(z_1|z_{>=2})]`.
    pub rates: Vec<f64>,
}

impl LossBreakdown {
    pub fn total_rate(&self) -> f64 {
        self.rates.iter().sum()
    }

    /// `-(D + R)`.
    pub fn elbo(&self) -> f64 {
        -(self.distortion + self.total_rate())
    }
}

struct Pass<'t> {
    /// Top-first.
    z: Vec<Var<'t>>,
    q: Vec<GaussianVar<'t>>,
    p: Vec<GaussianVar<'t>>,
}

/// Parameters of the generative and inference stacks.
#[derive(Clone, Debug, PartialEq)]
pub struct HvaeModel {
    config: HvaeConfig,
    nets: BTreeMap<String, Network>,
}

impl HvaeModel {
    /// Model with every parameter zero.
    pub fn zeros(config: HvaeConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let big_l = c.layers();
        let act = c.activation;
        let head = |input: usize, out: usize| {
            Network::mlp(input, &c.hidden, out, act, Activation::Identity)
        };
        let mut nets = BTreeMap::new();
        // z_{>=l+1} width for each l < L
        let ctx_width = |layer: usize| -> usize { (layer + 1..=big_l).map(|k| c.latent_dim(k)).sum() };

        for layer in 1..big_l {
            nets.insert(
                format!("p{layer}"),
                head(ctx_width(layer), 2 * c.latent_dim(layer))?,
            );
        }
        match c.inference {
            InferenceStyle::TopDown => {
                nets.insert(format!("q{big_l}"), head(c.data_dim, 2 * c.latent_dim(big_l))?);
                for layer in 1..big_l {
                    nets.insert(
                        format!("q{layer}"),
                        head(ctx_width(layer) + c.data_dim, 2 * c.latent_dim(layer))?,
                    );
                }
            }
            InferenceStyle::Ladder => {
                let w = c.ladder_width();
                for layer in 1..=big_l {
                    let input = if layer == 1 { c.data_dim } else { w };
                    nets.insert(
                        format!("d{layer}"),
                        Network::mlp(input, &[], w, act, act)?,
                    );
                    nets.insert(format!("q{layer}"), head(w, 2 * c.latent_dim(layer))?);
                }
            }
        }
        nets.insert("px".into(), head(c.latent_dim(1), c.data_dim)?);
        Ok(Self { config, nets })
    }

    /// Weights `~ N(0, 1/in_dim)`, biases zero except the std halves of the
    /// Gaussian heads, which start at `softplus^-1(1)` so initial stds are 1.
    pub fn new(config: HvaeConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let mut noise = NoiseSource::new(seed);
        for (name, net) in model.nets.iter_mut() {
            net.init_random(&mut noise);
            if name.starts_with('p') && name != "px" || name.starts_with('q') {
                let last = net.layers().len() - 1;
                let b = net
                    .params_mut()
                    .get_mut(&format!("{last}.bias"))
                    .expect("bias");
                let d = b.len() / 2;
                b.data_mut()[d..].fill(SIGMA_ONE_BIAS);
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &HvaeConfig {
        &self.config
    }

    pub fn network(&self, name: &str) -> Option<&Network> {
        self.nets.get(name)
    }

    pub fn network_names(&self) -> impl Iterator<Item = &String> {
        self.nets.keys()
    }

    /// All parameters, named `"{network}.{layer}.{weight|bias}"`.
    pub fn parameters(&self) -> ParameterSet {
        self.nets
            .iter()
            .flat_map(|(net, n)| {
                n.params()
                    .iter()
                    .map(move |(k, v)| (format!("{net}.{k}"), v.clone()))
            })
            .collect()
    }

    pub fn set_parameters(&mut self, params: &ParameterSet) -> Result<()> {
        self.parameters().check_compatible(params)?;
        for (name, value) in params.iter() {
            let (net, key) = name.split_once('.').expect("network prefix");
            let slot = self
                .nets
                .get_mut(net)
                .and_then(|n| n.params_mut().get_mut(key))
                .expect("checked compatible");
            *slot = value.clone();
        }
        Ok(())
    }

    /// Copy of this model carrying `params`.
    pub fn with_parameters(&self, params: &ParameterSet) -> Result<Self> {
        let mut m = self.clone();
        m.set_parameters(params)?;
        Ok(m)
    }

    pub fn param_count(&self) -> usize {
        self.nets.values().map(Network::param_count).sum()
    }

    fn net(&self, name: &str) -> &Network {
        &self.nets[name]
    }

    fn apply<'t>(&self, tape: &'t Tape, name: &str, input: Var<'t>) -> Result<Var<'t>> {
        self.net(name).apply_prefixed(tape, &format!("{name}."), input)
    }

    fn check_batch(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.config.data_dim {
            return Err(Error::shape(format!(
                "expected [batch, {}], got {:?}",
                self.config.data_dim,
                x.shape()
            )));
        }
        if x.rows() == 0 {
            return Err(Error::invalid("empty batch"));
        }
        Ok(())
    }

    fn draw<'t>(g: &GaussianVar<'t>, how: Draw, noise: &mut NoiseSource) -> Var<'t> {
        match how {
            Draw::Sample => g.rsample(noise),
            Draw::Mean => g.mean,
        }
    }

    /// Prior head `p(z_layer | z_{>=layer+1})` given top-first latents above it.
    fn prior_head<'t>(&self, tape: &'t Tape, layer: usize, above: &[Var<'t>]) -> Result<GaussianVar<'t>> {
        let ctx = context(tape, above);
        Ok(GaussianVar::from_head(self.apply(tape, &format!("p{layer}"), ctx)?))
    }

    fn record_pass<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        noise: &mut NoiseSource,
        how: Draw,
    ) -> Result<Pass<'t>> {
        let big_l = self.config.layers();
        let n = x.shape()[0];
        let mut pass = Pass {
            z: Vec::with_capacity(big_l),
            q: Vec::with_capacity(big_l),
            p: Vec::with_capacity(big_l),
        };

        let ladder = match self.config.inference {
            InferenceStyle::TopDown => None,
            InferenceStyle::Ladder => {
                let mut feats = Vec::with_capacity(big_l);
                let mut h = x;
                for layer in 1..=big_l {
                    h = self.apply(tape, &format!("d{layer}"), h)?;
                    feats.push(GaussianVar::from_head(self.apply(tape, &format!("q{layer}"), h)?));
                }
                Some(feats)
            }
        };

        for layer in (1..=big_l).rev() {
            let (q, p) = if layer == big_l {
                let p = GaussianVar::standard(tape, n, self.config.latent_dim(layer));
                let q = match &ladder {
                    None => GaussianVar::from_head(self.apply(tape, &format!("q{layer}"), x)?),
                    Some(bu) => bu[layer - 1],
                };
                (q, p)
            } else {
                let p = self.prior_head(tape, layer, &pass.z)?;
                let q = match &ladder {
                    None => {
                        let ctx = context(tape, &pass.z);
                        let input = tape.concat_cols(&[ctx, x]);
                        GaussianVar::from_head(self.apply(tape, &format!("q{layer}"), input)?)
                    }
                    Some(bu) => precision_merge(&bu[layer - 1], &p),
                };
                (q, p)
            };
            let z = Self::draw(&q, how, noise);
            pass.z.push(z);
            pass.q.push(q);
            pass.p.push(p);
        }
        Ok(pass)
    }

    fn decode<'t>(&self, tape: &'t Tape, z1: Var<'t>) -> Result<Var<'t>> {
        let out = self.apply(tape, "px", z1)?;
        Ok(match self.config.likelihood {
            Likelihood::Gaussian { .. } => out,
            Likelihood::Bernoulli => out.sigmoid(),
        })
    }

    /// Per-sample `-log p(x | z_1)` given the decoder output.
    fn neg_log_lik<'t>(&self, decoded: Var<'t>, x: &Tensor) -> Var<'t> {
        let tape = decoded.tape();
        match self.config.likelihood {
            Likelihood::Gaussian { sigma_x } => {
                let std = tape.constant(Tensor::filled(x.shape(), sigma_x));
                -GaussianVar::new(decoded, std).log_prob(tape.constant(x.clone()))
            }
            Likelihood::Bernoulli => -distributions::bernoulli_log_prob(decoded, x),
        }
    }

    fn check_data(&self, x: &Tensor) -> Result<()> {
        if self.config.likelihood == Likelihood::Bernoulli {
            distributions::check_binary(x)?;
        }
        Ok(())
    }

    /// Runs the inference chain `x -> z_L -> ... -> z_1` and decodes `z_1`.
    pub fn infer(&self, x: &Tensor, noise: &mut NoiseSource, how: Draw) -> Result<InferenceTrace> {
        self.check_batch(x)?;
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pass = self.record_pass(&tape, xv, noise, how)?;
        let decoder = self.decode(&tape, *pass.z.last().expect("L >= 2"))?.value();

        let big_l = self.config.layers();
        let n = x.rows();
        let mut layers = Vec::with_capacity(big_l);
        let mut log_q = vec![0.0; n];
        let mut log_p = vec![0.0; n];
        for (k, ((z, q), p)) in pass.z.iter().zip(&pass.q).zip(&pass.p).enumerate() {
            let lq = q.log_prob(*z).value().into_data();
            let lp = p.log_prob(*z).value().into_data();
            for i in 0..n {
                log_q[i] += lq[i];
                log_p[i] += lp[i];
            }
            layers.push(LayerTrace {
                layer: big_l - k,
                z: z.value(),
                q: DiagGaussian::new(q.mean.value(), q.std.value())?,
                p: DiagGaussian::new(p.mean.value(), p.std.value())?,
                log_ratio: lq.iter().zip(&lp).map(|(a, b)| a - b).collect(),
                kl: q.kl(p).value().into_data(),
            });
        }
        Ok(InferenceTrace {
            layers,
            total_log_ratio: log_q.iter().zip(&log_p).map(|(a, b)| a - b).collect(),
            decoder,
        })
    }

    /// Batch-mean `-log p(x | z_1)` at the trace's latents, in nats.
    pub fn distortion(&self, trace: &InferenceTrace, x: &Tensor) -> Result<f64> {
        self.check_batch(x)?;
        if x.shape() != trace.decoder.shape() {
            return Err(Error::shape("trace and data batch differ"));
        }
        self.check_data(x)?;
        let tape = Tape::new();
        let d = self.neg_log_lik(tape.constant(trace.decoder.clone()), x);
        Ok(d.mean().item()?)
    }

    /// Records the loss `D + sum_l beta_l R_l` on `tape`.
    pub fn record_loss<'t>(
        &self,
        tape: &'t Tape,
        x: &Tensor,
        betas: &BetaVector,
        noise: &mut NoiseSource,
    ) -> Result<(Var<'t>, LossBreakdown)> {
        self.check_batch(x)?;
        self.check_data(x)?;
        if betas.len() != self.config.layers() {
            return Err(Error::invalid(format!(
                "{} betas for {} layers",
                betas.len(),
                self.config.layers()
            )));
        }
        let xv = tape.constant(x.clone());
        let pass = self.record_pass(tape, xv, noise, Draw::Sample)?;
        let decoded = self.decode(tape, *pass.z.last().expect("L >= 2"))?;
        let dist = self.neg_log_lik(decoded, x).mean();

        let mut loss = dist;
        let mut rates = Vec::with_capacity(pass.q.len());
        for (q, p) in pass.q.iter().zip(&pass.p) {
            let rate = q.kl(p).mean();
            rates.push(rate.item()?);
            rates_weighted(&mut loss, rate, betas.as_slice()[rates.len() - 1]);
        }
        let breakdown = LossBreakdown {
            loss: loss.item()?,
            distortion: dist.item()?,
            rates,
        };
        Ok((loss, breakdown))
    }

    /// Loss value and components, without gradients.
    pub fn loss(&self, x: &Tensor, betas: &BetaVector, noise: &mut NoiseSource) -> Result<LossBreakdown> {
        let tape = Tape::new();
        Ok(self.record_loss(&tape, x, betas, noise)?.1)
    }

    /// Loss components and the gradient with respect to [`Self::parameters`].
    pub fn loss_and_gradient(
        &self,
        x: &Tensor,
        betas: &BetaVector,
        noise: &mut NoiseSource,
    ) -> Result<(LossBreakdown, ParameterSet)> {
        let tape = Tape::new();
        let (loss, breakdown) = self.record_loss(&tape, x, betas, noise)?;
        let grads = loss.backward()?.for_params(&self.parameters());
        Ok((breakdown, grads))
    }

    /// Ancestral samples: `z_L ~ N(0, I)`, then each `z_l ~ p(z_l | z_{>=l+1})`,
    /// then `x` drawn from (or the mean of) `p(x | z_1)`.
    pub fn generate(&self, n: usize, noise: &mut NoiseSource, how: Draw) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::invalid("generate needs n >= 1"));
        }
        let tape = Tape::new();
        let big_l = self.config.layers();
        let mut zs: Vec<Var<'_>> = Vec::with_capacity(big_l);
        for layer in (1..=big_l).rev() {
            let p = if layer == big_l {
                GaussianVar::standard(&tape, n, self.config.latent_dim(layer))
            } else {
                self.prior_head(&tape, layer, &zs)?
            };
            zs.push(p.rsample(noise));
        }
        let decoded = self.decode(&tape, *zs.last().expect("L >= 2"))?.value();
        Ok(self.emit(decoded, noise, how))
    }

    /// Round trip `x -> z_L -> ... -> z_1 -> x_hat`, sampling or taking the
    /// mean at every arrow including the last.
    pub fn reconstruct(&self, x: &Tensor, noise: &mut NoiseSource, how: Draw) -> Result<Tensor> {
        let trace = self.infer(x, noise, how)?;
        Ok(self.emit(trace.decoder, noise, how))
    }

    fn emit(&self, decoded: Tensor, noise: &mut NoiseSource, how: Draw) -> Tensor {
        match (how, self.config.likelihood) {
            (Draw::Mean, _) => decoded,
            (Draw::Sample, Likelihood::Gaussian { sigma_x }) => {
                let mut out = decoded;
                for v in out.data_mut() {
                    *v += sigma_x * noise.standard_normal();
                }
                out
            }
            (Draw::Sample, Likelihood::Bernoulli) => {
                let mut out = decoded;
                for v in out.data_mut() {
                    *v = if noise.uniform() < *v { 1.0 } else { 0.0 };
                }
                out
            }
        }
    }
}

fn rates_weighted<'t>(loss: &mut Var<'t>, rate: Var<'t>, beta: f64) {
    *loss = *loss + rate.scale(beta);
}

/// Concatenation `[z_{l+1}, ..., z_L]` of the top-first latents drawn so far.
fn context<'t>(tape: &'t Tape, above_top_first: &[Var<'t>]) -> Var<'t> {
    let ordered: Vec<Var<'t>> = above_top_first.iter().rev().copied().collect();
    if ordered.len() == 1 {
        ordered[0]
    } else {
        tape.concat_cols(&ordered)
    }
}

/// Precision-weighted combination of two diagonal Gaussians.
fn precision_merge<'t>(a: &GaussianVar<'t>, b: &GaussianVar<'t>) -> GaussianVar<'t> {
    let tape = a.mean.tape();
    let ones = tape.constant(Tensor::filled(&a.mean.shape(), 1.0));
    let prec_a = ones.div(a.std.square());
    let prec_b = ones.div(b.std.square());
    let prec = prec_a + prec_b;
    let mean = (a.mean * prec_a + b.mean * prec_b).div(prec);
    let std = prec.ln().scale(-0.5).exp();
    GaussianVar::new(mean, std)
}

/// Batch-mean closed-form layer rates, top-first.
pub fn layer_rates(trace: &InferenceTrace) -> Vec<f64> {
    trace
        .layers
        .iter()
        .map(|l| l.kl.iter().sum::<f64>() / l.kl.len() as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::softplus;

    fn small_config() -> HvaeConfig {
        let mut c = HvaeConfig::new(5, vec![2, 3]);
        c.hidden = vec![6];
        c
    }

    fn batch(noise: &mut NoiseSource, n: usize, d: usize) -> Tensor {
        noise.normal_tensor(&[n, d])
    }

    #[test]
    fn sigma_one_bias_is_inverse_softplus_of_one() {
        assert!((softplus(SIGMA_ONE_BIAS) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let mut c = small_config();
        c.latent_dims = vec![3];
        assert!(matches!(HvaeModel::zeros(c), Err(Error::Config(_))));
        let mut c = small_config();
        c.likelihood = Likelihood::Gaussian { sigma_x: 0.0 };
        assert!(HvaeModel::zeros(c).is_err());
        let mut c = small_config();
        c.latent_dims = vec![2, 0];
        assert!(HvaeModel::zeros(c).is_err());
    }

    #[test]
    fn network_layout_top_down() {
        let m = HvaeModel::zeros(HvaeConfig::new(4, vec![1, 2, 3])).unwrap();
        let names: Vec<_> = m.network_names().cloned().collect();
        assert_eq!(names, ["p1", "p2", "px", "q1", "q2", "q3"]);
        // q1 reads [z2, z3, x]
        assert_eq!(m.network("q1").unwrap().input_dim(), 2 + 1 + 4);
        assert_eq!(m.network("p1").unwrap().input_dim(), 3);
        assert_eq!(m.network("p2").unwrap().input_dim(), 1);
        assert_eq!(m.network("px").unwrap().input_dim(), 3);
    }

    #[test]
    fn zero_model_gives_softplus_zero_posteriors() {
        let m = HvaeModel::zeros(small_config()).unwrap();
        let mut noise = NoiseSource::new(1);
        let x = batch(&mut noise, 4, 5);
        let t = m.infer(&x, &mut noise, Draw::Sample).unwrap();
        for l in &t.layers {
            assert!(l.q.mean().data().iter().all(|&v| v == 0.0));
            assert!(l.q.std().data().iter().all(|&v| v == 2f64.ln()));
            assert!(l.mode().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn initial_stds_are_one() {
        let m = HvaeModel::new(small_config(), 3).unwrap();
        let mut noise = NoiseSource::new(2);
        let x = batch(&mut noise, 3, 5);
        let t = m.infer(&x, &mut noise, Draw::Sample).unwrap();
        let q2 = &t.layer(2).q;
        // q2 is read off x alone; biases make std = softplus(w.h + b) around 1
        assert!(q2.std().data().iter().all(|&s| s > 0.2 && s < 5.0));
    }

    #[test]
    fn inference_is_deterministic_per_seed() {
        let m = HvaeModel::new(small_config(), 4).unwrap();
        let x = batch(&mut NoiseSource::new(5), 6, 5);
        let a = m.infer(&x, &mut NoiseSource::new(9), Draw::Sample).unwrap();
        let b = m.infer(&x, &mut NoiseSource::new(9), Draw::Sample).unwrap();
        assert_eq!(a.total_log_ratio, b.total_log_ratio);
        assert_eq!(a.decoder, b.decoder);
    }

    #[test]
    fn telescoping_and_nonnegative_rates() {
        for style in [InferenceStyle::TopDown, InferenceStyle::Ladder] {
            let mut c = HvaeConfig::new(5, vec![2, 3, 2]);
            c.inference = style;
            let m = HvaeModel::new(c, 7).unwrap();
            let mut noise = NoiseSource::new(8);
            let x = batch(&mut noise, 50, 5);
            let t = m.infer(&x, &mut noise, Draw::Sample).unwrap();
            for i in 0..t.batch() {
                let sum: f64 = t.layers.iter().map(|l| l.log_ratio[i]).sum();
                assert!((sum - t.total_log_ratio[i]).abs() < 1e-9);
            }
            assert!(layer_rates(&t).iter().all(|&r| r >= -1e-9));
        }
    }

    #[test]
    fn matching_heads_give_zero_rates() {
        // With zero weights the q and p heads of every layer output the same
        // Gaussian once the biases agree, and q(z_L|x) = N(0, 1).
        let mut m = HvaeModel::zeros(small_config()).unwrap();
        let mut params = m.parameters();
        let q2_bias = params.get_mut("q2.1.bias").unwrap();
        q2_bias.data_mut()[2..].fill(SIGMA_ONE_BIAS);
        for name in ["q1.1.bias", "p1.1.bias"] {
            let b = params.get_mut(name).unwrap();
            b.data_mut()[..3].copy_from_slice(&[0.5, -1.0, 2.0]);
            b.data_mut()[3..].fill(0.3);
        }
        m.set_parameters(&params).unwrap();
        let mut noise = NoiseSource::new(1);
        let x = batch(&mut noise, 5, 5);
        let t = m.infer(&x, &mut noise, Draw::Sample).unwrap();
        for r in layer_rates(&t) {
            assert!(r.abs() < 1e-12, "rate {r}");
        }
    }

    #[test]
    fn loss_with_unit_betas_is_negative_elbo() {
        let m = HvaeModel::new(small_config(), 10).unwrap();
        let x = batch(&mut NoiseSource::new(11), 8, 5);
        let b = m
            .loss(&x, &BetaVector::uniform(2, 1.0).unwrap(), &mut NoiseSource::new(12))
            .unwrap();
        assert!((b.loss - (b.distortion + b.total_rate())).abs() < 1e-9);
        assert!((b.elbo() + b.loss).abs() < 1e-9);

        // the trace path gives the same numbers from the same noise stream
        let t = m.infer(&x, &mut NoiseSource::new(12), Draw::Sample).unwrap();
        assert!((m.distortion(&t, &x).unwrap() - b.distortion).abs() < 1e-12);
        for (a, r) in layer_rates(&t).iter().zip(&b.rates) {
            assert!((a - r).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_is_linear_in_betas() {
        let m = HvaeModel::new(small_config(), 13).unwrap();
        let x = batch(&mut NoiseSource::new(14), 8, 5);
        let zero = m
            .loss(&x, &BetaVector::unchecked(vec![0.0, 0.0]), &mut NoiseSource::new(15))
            .unwrap();
        assert!((zero.loss - zero.distortion).abs() < 1e-12);
        let b = m
            .loss(&x, &BetaVector::new(vec![2.0, 4.0]).unwrap(), &mut NoiseSource::new(15))
            .unwrap();
        let expect = b.distortion + 2.0 * b.rates[0] + 4.0 * b.rates[1];
        assert!((b.loss - expect).abs() < 1e-9);
    }

    #[test]
    fn bad_betas_rejected() {
        assert!(BetaVector::new(vec![1.0, 0.0]).is_err());
        assert!(BetaVector::new(vec![-1.0]).is_err());
        let m = HvaeModel::new(small_config(), 1).unwrap();
        let x = batch(&mut NoiseSource::new(1), 2, 5);
        let three = BetaVector::uniform(3, 1.0).unwrap();
        assert!(m.loss(&x, &three, &mut NoiseSource::new(1)).is_err());
    }

    #[test]
    fn distortion_values() {
        let m = HvaeModel::zeros(small_config()).unwrap();
        let x = Tensor::zeros(&[3, 5]);
        let t = m.infer(&x, &mut NoiseSource::new(1), Draw::Mean).unwrap();
        // zero decoder reproduces x = 0 exactly
        let expect = 5.0 * (0.5 * (2.0 * std::f64::consts::PI).ln() + DEFAULT_SIGMA_X.ln());
        assert!((m.distortion(&t, &x).unwrap() - expect).abs() < 1e-12);

        let mut c = small_config();
        c.likelihood = Likelihood::Bernoulli;
        let m = HvaeModel::zeros(c).unwrap();
        let bits = Tensor::matrix(1, 5, vec![1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let t = m.infer(&bits, &mut NoiseSource::new(1), Draw::Mean).unwrap();
        assert!((m.distortion(&t, &bits).unwrap() - 5.0 * 2f64.ln()).abs() < 1e-12);
        let not_bits = Tensor::filled(&[1, 5], 0.5);
        assert!(m.distortion(&t, &not_bits).is_err());
    }

    #[test]
    fn generate_zero_model_returns_bias_image() {
        let mut m = HvaeModel::zeros(small_config()).unwrap();
        let mut params = m.parameters();
        let bias = [0.1, 0.2, -0.3, 0.4, 0.5];
        params.get_mut("px.1.bias").unwrap().data_mut().copy_from_slice(&bias);
        m.set_parameters(&params).unwrap();
        let out = m.generate(3, &mut NoiseSource::new(1), Draw::Mean).unwrap();
        assert_eq!(out.shape(), &[3, 5]);
        for r in 0..3 {
            assert_eq!(out.row(r), &bias);
        }
        assert!(m.generate(0, &mut NoiseSource::new(1), Draw::Mean).is_err());
    }

    #[test]
    fn generate_and_reconstruct_are_deterministic() {
        let m = HvaeModel::new(small_config(), 20).unwrap();
        let a = m.generate(4, &mut NoiseSource::new(5), Draw::Sample).unwrap();
        let b = m.generate(4, &mut NoiseSource::new(5), Draw::Sample).unwrap();
        assert_eq!(a, b);
        let x = batch(&mut NoiseSource::new(6), 4, 5);
        let r1 = m.reconstruct(&x, &mut NoiseSource::new(7), Draw::Mean).unwrap();
        let r2 = m.reconstruct(&x, &mut NoiseSource::new(8), Draw::Mean).unwrap();
        // mode path ignores the noise entirely
        assert_eq!(r1, r2);
        assert_eq!(r1.shape(), x.shape());
    }

    #[test]
    fn ladder_top_layer_uses_bottom_up_head() {
        let mut c = small_config();
        c.inference = InferenceStyle::Ladder;
        let m = HvaeModel::new(c, 30).unwrap();
        let names: Vec<_> = m.network_names().cloned().collect();
        assert_eq!(names, ["d1", "d2", "p1", "px", "q1", "q2"]);
        let x = batch(&mut NoiseSource::new(1), 3, 5);
        let t = m.infer(&x, &mut NoiseSource::new(2), Draw::Sample).unwrap();
        // merged posterior is tighter than the prior it was merged with
        let l1 = t.layer(1);
        for (q, p) in l1.q.std().data().iter().zip(l1.p.std().data()) {
            assert!(q < p);
        }
    }

    #[test]
    fn parameter_round_trip() {
        let m = HvaeModel::new(small_config(), 40).unwrap();
        let p = m.parameters();
        assert_eq!(p.numel(), m.param_count());
        let mut z = HvaeModel::zeros(small_config()).unwrap();
        z.set_parameters(&p).unwrap();
        assert_eq!(z, m);
    }
}
