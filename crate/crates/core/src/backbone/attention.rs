//! Pre-norm transformer blocks with optional additive attention bias, and
//! the register-token encoder stack built from them.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{Init, ParamId, ParamStore};
use crate::rng::Rng;

/// Multi-head scaled dot-product attention. `q` is `Lq × d`, `k` and `v`
/// are `Lk × d`; `bias` holds one `Lq × Lk` matrix per head.
pub fn multi_head_attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize, bias: Option<&[Var]>) -> Result<Var> {
    let d = g.shape(q).1;
    if d % heads != 0 {
        return Err(Error::Shape(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.select_cols(q, h * dh, dh)?;
        let kh = g.select_cols(k, h * dh, dh)?;
        let vh = g.select_cols(v, h * dh, dh)?;
        let s = g.matmul_nt(qh, kh)?;
        let mut logits = g.scale(s, scale);
        if let Some(b) = bias {
            logits = g.add(logits, b[h])?;
        }
        let a = g.softmax_rows(logits);
        outs.push(g.matmul(a, vh)?);
    }
    if outs.len() == 1 {
        return Ok(outs[0]);
    }
    g.concat_cols(&outs)
}

#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl Block {
    pub fn register(store: &mut ParamStore, rng: &mut Rng, name: &str, dim: usize, heads: usize, mlp_ratio: usize, residual_gain: f64) -> Self {
        Self {
            norm1: LayerNorm::register(store, rng, &format!("{name}.norm1"), dim),
            qkv: Linear::register(store, rng, &format!("{name}.qkv"), dim, 3 * dim, 1.0),
            proj: Linear::register(store, rng, &format!("{name}.proj"), dim, dim, residual_gain),
            norm2: LayerNorm::register(store, rng, &format!("{name}.norm2"), dim),
            fc1: Linear::register(store, rng, &format!("{name}.fc1"), dim, mlp_ratio * dim, 1.0),
            fc2: Linear::register(store, rng, &format!("{name}.fc2"), mlp_ratio * dim, dim, residual_gain),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, bias: Option<&[Var]>) -> Result<Var> {
        let d = g.shape(x).1;
        let h = self.norm1.forward(g, x)?;
        let qkv = self.qkv.forward(g, h)?;
        let q = g.select_cols(qkv, 0, d)?;
        let k = g.select_cols(qkv, d, d)?;
        let v = g.select_cols(qkv, 2 * d, d)?;
        let a = multi_head_attention(g, q, k, v, self.heads, bias)?;
        let a = self.proj.forward(g, a)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h)?;
        g.add(x, h)
    }
}

/// Transformer encoder with learnable register tokens prepended to the
/// sequence and stripped from the output.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub registers: Option<ParamId>,
    pub num_registers: usize,
    pub blocks: Vec<Block>,
    pub heads: usize,
}

impl EncoderStack {
    pub fn register(store: &mut ParamStore, rng: &mut Rng, name: &str, cfg: &super::EncoderConfig) -> Self {
        let registers =
            (cfg.registers > 0).then(|| store.add(&format!("{name}.registers"), cfg.registers, cfg.dim, Init::Normal(0.02), rng));
        let gain = 1.0 / (2.0 * cfg.depth.max(1) as f64).sqrt();
        let blocks = (0..cfg.depth)
            .map(|i| Block::register(store, rng, &format!("{name}.blocks.{i}"), cfg.dim, cfg.heads, cfg.mlp_ratio, gain))
            .collect();
        Self { registers, num_registers: cfg.registers, blocks, heads: cfg.heads }
    }

    /// Encodes `c × d` inputs (token embeddings already summed with their
    /// positional embeddings). `bias` is the `c² × heads` bias node, or
    /// `None` to run without physics bias.
    pub fn forward(&self, g: &mut Graph, x: Var, bias: Option<Var>) -> Result<Var> {
        if self.blocks.is_empty() {
            return Ok(x);
        }
        let c = g.shape(x).0;
        let r = self.num_registers;
        let seq = match self.registers {
            Some(p) => {
                let regs = g.param(p);
                g.concat_rows(&[regs, x])?
            }
            None => x,
        };
        let head_bias = match bias {
            Some(b) => Some(super::pair::padded_head_biases(g, b, c, self.heads, r)?),
            None => None,
        };
        let mut h = seq;
        for block in &self.blocks {
            h = block.forward(g, h, head_bias.as_deref())?;
        }
        if r == 0 {
            return Ok(h);
        }
        let keep: Vec<usize> = (r..r + c).collect();
        g.select_rows(h, &keep)
    }
}
