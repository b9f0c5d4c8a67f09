//! Parameterized layers recorded onto an autograd [`Graph`].

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{Init, ParamId, ParamStore};
use crate::rng::Rng;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Registers `{name}.weight` (`fan_in × fan_out`, N(0, gain²/fan_in)) and
    /// a zero `{name}.bias`.
    pub fn register(store: &mut ParamStore, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> Self {
        let std = gain / (fan_in as f64).sqrt();
        let weight = store.add(&format!("{name}.weight"), fan_in, fan_out, Init::Normal(std), rng);
        let bias = store.add(&format!("{name}.bias"), 1, fan_out, Init::Zeros, rng);
        Self { weight, bias, fan_in, fan_out }
    }


    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        let b = g.param(self.bias);
        g.add_row(y, b)
    }
}

/// Stack of linear layers with GELU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` lists every layer size including input and output.
    pub fn register(store: &mut ParamStore, rng: &mut Rng, name: &str, widths: &[usize]) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::register(store, rng, &format!("{name}.{i}"), w[0], w[1], 1.0))
            .collect();
        Self { layers }
    }


    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                x = g.gelu(x);
            }
            x = l.forward(g, x)?;
        }
        Ok(x)
    }
}

/// Layer normalization with learnable scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn register(store: &mut ParamStore, rng: &mut Rng, name: &str, dim: usize) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), 1, dim, Init::Ones, rng);
        let beta = store.add(&format!("{name}.beta"), 1, dim, Init::Zeros, rng);
        Self { gamma, beta }
    }


    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = g.layer_norm(x, LN_EPS);
        let gamma = g.param(self.gamma);
        let s = g.mul_row(n, gamma)?;
        let beta = g.param(self.beta);
        g.add_row(s, beta)
    }
}
