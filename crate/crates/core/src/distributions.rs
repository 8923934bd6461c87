//! Diagonal Gaussian and Bernoulli kernels plus the noise source behind
//! reparameterized sampling.
//!
//! The differentiable forms ([`GaussianVar`], [`bernoulli_log_prob`]) work on
//! tape variables and are what the model uses. [`DiagGaussian`] and
//! [`BernoulliVec`] are validated value types for direct evaluation; they
//! route through the same recorded kernels.
//!
//! All log-densities and divergences are in nats.

use std::f64::consts::PI;

use rand::{Rng, RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Smallest and largest standard deviation produced by softplus heads.
pub const STD_MIN: f64 = 1e-6;
pub const STD_MAX: f64 = 1e6;
/// Bernoulli probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-7;

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic xoshiro256++ stream with Box–Muller Gaussian variates.
#[derive(Clone, Debug)]
pub struct NoiseSource {
    rng: Xoshiro256PlusPlus,
    seed: u64,
    spare: Option<f64>,
}

impl NoiseSource {
    /// Seeds the generator state from `seed` through SplitMix64.
    pub fn new(seed: u64) -> Self {
        Self {
            rng: Xoshiro256PlusPlus::seed_from_u64(seed),
            seed,
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream `splitmix64(seed ^ stream_index)`.
    pub fn split(&self, stream_index: u64) -> NoiseSource {
        NoiseSource::new(splitmix64(self.seed ^ stream_index))
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = self.standard_normal();
        }
        t
    }

    /// Fisher–Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }
}

/// Diagonal Gaussian over the columns of a `[batch, d]` tape variable.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVar<'t> {
    pub mean: Var<'t>,
    pub std: Var<'t>,
}

impl<'t> GaussianVar<'t> {
    pub fn new(mean: Var<'t>, std: Var<'t>) -> Self {
        Self { mean, std }
    }

    /// Standard normal with the given `[batch, d]` shape.
    pub fn standard(tape: &'t Tape, batch: usize, dim: usize) -> Self {
        Self {
            mean: tape.constant(Tensor::zeros(&[batch, dim])),
            std: tape.constant(Tensor::filled(&[batch, dim], 1.0)),
        }
    }

    /// Head output `[batch, 2d]` split into mean and `softplus` std, the
    /// latter clamped to `[STD_MIN, STD_MAX]`.
    pub fn from_head(raw: Var<'t>) -> Self {
        let d = raw.shape()[1] / 2;
        Self {
            mean: raw.slice_cols(0, d),
            std: raw.slice_cols(d, 2 * d).softplus().clamp(STD_MIN, STD_MAX),
        }
    }

    /// Per-row `Σ_i [-½log 2π - log σ_i - (x_i-μ_i)²/(2σ_i²)]`, shape `[batch]`.
    pub fn log_prob(&self, x: Var<'t>) -> Var<'t> {
        let z = (x - self.mean).div(self.std);
        (z.square().scale(-0.5) - self.std.ln())
            .add_scalar(-HALF_LN_2PI)
            .sum_cols()
    }

    /// Per-row closed-form `KL[self || p]`, shape `[batch]`.
    pub fn kl(&self, p: &GaussianVar<'t>) -> Var<'t> {
        let var_q = self.std.square();
        let diff2 = (self.mean - p.mean).square();
        let ratio = (var_q + diff2).div(p.std.square()).scale(0.5);
        (p.std.ln() - self.std.ln() + ratio)
            .add_scalar(-0.5)
            .sum_cols()
    }

    /// `μ + σ ⊙ ε` with `ε` supplied by the caller.
    pub fn rsample_with(&self, eps: Tensor) -> Var<'t> {
        let eps = self.mean.tape().constant(eps);
        self.mean + self.std * eps
    }

    /// `μ + σ ⊙ ε`, `ε ~ N(0, I)` drawn from `noise`.
    pub fn rsample(&self, noise: &mut NoiseSource) -> Var<'t> {
        let eps = noise.normal_tensor(&self.mean.shape());
        self.rsample_with(eps)
    }
}

/// Per-row Bernoulli log-likelihood of binary `x` under `probs`, with the
/// probabilities clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub fn bernoulli_log_prob<'t>(probs: Var<'t>, x: &Tensor) -> Var<'t> {
    let tape = probs.tape();
    let p = probs.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let x1 = tape.constant(x.clone());
    let x0 = tape.constant(x.map(|v| 1.0 - v));
    let one_minus_p = p.scale(-1.0).add_scalar(1.0);
    (x1 * p.ln() + x0 * one_minus_p.ln()).sum_cols()
}

pub(crate) fn check_binary(x: &Tensor) -> Result<()> {
    if x.data().iter().all(|&v| v == 0.0 || v == 1.0) {
        Ok(())
    } else {
        Err(Error::invalid("Bernoulli data must be 0/1"))
    }
}

/// Validated diagonal Gaussian values; rows are batch entries.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    mean: Tensor,
    std: Tensor,
}

impl DiagGaussian {
    pub fn new(mean: Tensor, std: Tensor) -> Result<Self> {
        if mean.shape() != std.shape() {
            return Err(Error::shape(format!(
                "mean {:?} vs std {:?}",
                mean.shape(),
                std.shape()
            )));
        }
        if std.data().iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("standard deviations must be > 0"));
        }
        Ok(Self {
            mean: as_matrix(mean),
            std: as_matrix(std),
        })
    }

    pub fn standard(batch: usize, dim: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[batch, dim]),
            std: Tensor::filled(&[batch, dim], 1.0),
        }
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn std(&self) -> &Tensor {
        &self.std
    }

    fn record<'t>(&self, tape: &'t Tape) -> GaussianVar<'t> {
        GaussianVar::new(tape.constant(self.mean.clone()), tape.constant(self.std.clone()))
    }

    /// Log-density of each row of `x`.
    pub fn log_prob(&self, x: &Tensor) -> Result<Vec<f64>> {
        let x = as_matrix(x.clone());
        if x.shape() != self.mean.shape() {
            return Err(Error::shape(format!(
                "x {:?} vs distribution {:?}",
                x.shape(),
                self.mean.shape()
            )));
        }
        let tape = Tape::new();
        let lp = self.record(&tape).log_prob(tape.constant(x));
        Ok(lp.value().into_data())
    }

    /// Closed-form `KL[self || p]` per row, in nats.
    pub fn kl(&self, p: &DiagGaussian) -> Result<Vec<f64>> {
        if self.mean.shape() != p.mean.shape() {
            return Err(Error::shape(format!(
                "KL between {:?} and {:?}",
                self.mean.shape(),
                p.mean.shape()
            )));
        }
        let tape = Tape::new();
        let kl = self.record(&tape).kl(&p.record(&tape));
        Ok(kl.value().into_data())
    }

    /// Reparameterized sample `μ + σ ⊙ ε`.
    pub fn rsample(&self, noise: &mut NoiseSource) -> Tensor {
        let eps = noise.normal_tensor(self.mean.shape());
        let data = self
            .mean
            .data()
            .iter()
            .zip(self.std.data())
            .zip(eps.data())
            .map(|((m, s), e)| m + s * e)
            .collect();
        Tensor::new(self.mean.shape().to_vec(), data).expect("same shape")
    }
}

/// Validated Bernoulli probabilities; rows are batch entries.
#[derive(Clone, Debug, PartialEq)]
pub struct BernoulliVec {
    probs: Tensor,
}

impl BernoulliVec {
    /// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("probabilities must lie in [0, 1]"));
        }
        Ok(Self {
            probs: as_matrix(probs.map(|p| p.clamp(PROB_EPS, 1.0 - PROB_EPS))),
        })
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn log_prob(&self, x: &Tensor) -> Result<Vec<f64>> {
        let x = as_matrix(x.clone());
        if x.shape() != self.probs.shape() {
            return Err(Error::shape(format!(
                "x {:?} vs probs {:?}",
                x.shape(),
                self.probs.shape()
            )));
        }
        check_binary(&x)?;
        let tape = Tape::new();
        let lp = bernoulli_log_prob(tape.constant(self.probs.clone()), &x);
        Ok(lp.value().into_data())
    }
}

/// Treats a vector as a single-row matrix.
fn as_matrix(t: Tensor) -> Tensor {
    match t.shape().len() {
        2 => t,
        _ => {
            let n = t.len();
            Tensor::new(vec![1, n], t.into_data()).expect("reshape")
        }
    }
}
