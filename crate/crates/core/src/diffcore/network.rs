use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::{ParameterSet, Tensor};
use crate::distributions::NoiseSource;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Softplus,
    Identity,
}

/// One affine layer followed by a pointwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

/// Feed-forward stack of dense layers.
///
/// Layer `i` owns parameters `"{i}.weight"` (shape `[in, out]`) and
/// `"{i}.bias"` (shape `[out]`); a layer computes `act(x W + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<LayerSpec>,
    params: ParameterSet,
}

impl Network {
    /// Creates a network with all-zero parameters.
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim,
                    i + 1,
                    pair[1].in_dim
                )));
            }
        }
        let mut params = ParameterSet::new();
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(Error::invalid(format!("layer {i} has a zero dimension")));
            }
            params.insert(format!("{i}.weight"), Tensor::zeros(&[l.in_dim, l.out_dim]))?;
            params.insert(format!("{i}.bias"), Tensor::zeros(&[l.out_dim]))?;
        }
        Ok(Self { layers, params })
    }

    /// `input -> hidden... -> output` with `hidden_act` between layers and
    /// `output_act` on the last layer.
    pub fn mlp(
        input: usize,
        hidden: &[usize],
        output: usize,
        hidden_act: Activation,
        output_act: Activation,
    ) -> Result<Self> {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerSpec {
                in_dim: w[0],
                out_dim: w[1],
                activation: if i + 1 == n { output_act } else { hidden_act },
            })
            .collect();
        Self::new(layers)
    }

    /// Weights drawn from `N(0, 1/in_dim)`, biases zero.
    pub fn init_random(&mut self, noise: &mut NoiseSource) {
        for (i, l) in self.layers.iter().enumerate() {
            let std = (1.0 / l.in_dim as f64).sqrt();
            let w = self
                .params
                .get_mut(&format!("{i}.weight"))
                .expect("weight exists");
            for v in w.data_mut() {
                *v = std * noise.standard_normal();
            }
            let b = self.params.get_mut(&format!("{i}.bias")).expect("bias exists");
            b.data_mut().fill(0.0);
        }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    /// Replaces the parameters; keys and shapes must match.
    pub fn set_params(&mut self, params: ParameterSet) -> Result<()> {
        self.params.check_compatible(&params)?;
        self.params = params;
        Ok(())
    }

    /// Σ (in·out + out) over layers.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.in_dim * l.out_dim + l.out_dim).sum()
    }

    /// Records a batched forward pass, binding parameters as `{prefix}{name}`.
    pub fn apply_prefixed<'t>(
        &self,
        tape: &'t Tape,
        prefix: &str,
        input: Var<'t>,
    ) -> Result<Var<'t>> {
        let shape = input.shape();
        if shape.len() != 2 || shape[1] != self.input_dim() {
            return Err(Error::shape(format!(
                "network expects [batch, {}], got {shape:?}",
                self.input_dim()
            )));
        }
        let mut h = input;
        for (i, l) in self.layers.iter().enumerate() {
            let w = tape.param(
                &format!("{prefix}{i}.weight"),
                self.params.get(&format!("{i}.weight")).expect("weight"),
            );
            let b = tape.param(
                &format!("{prefix}{i}.bias"),
                self.params.get(&format!("{i}.bias")).expect("bias"),
            );
            let pre = h.matmul(w).add_bias(b);
            h = match l.activation {
                Activation::Tanh => pre.tanh(),
                Activation::Relu => pre.relu(),
                Activation::Softplus => pre.softplus(),
                Activation::Identity => pre,
            };
        }
        if !h.is_finite() {
            return Err(Error::non_finite(format!("output of network {prefix:?}")));
        }
        Ok(h)
    }

    /// Records a batched forward pass with unprefixed parameter names.
    pub fn apply<'t>(&self, tape: &'t Tape, input: Var<'t>) -> Result<Var<'t>> {
        self.apply_prefixed(tape, "", input)
    }

    /// Forward evaluation of a `[batch, in]` tensor on a throwaway tape.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let x = tape.constant(input.clone());
        Ok(self.apply(&tape, x)?.value())
    }
}
