//! Classification head: a learnable class token refined by two
//! class-attention blocks, then an MLP to logits.

use super::attention::multi_head_attention;
use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::params::{Init, ParamId, ParamStore};
use crate::rng::Rng;

pub const CLASS_ATTENTION_BLOCKS: usize = 2;
/// Weight std of the logit layer, so a fresh head predicts near-uniform
/// classes whatever features it is attached to.
pub const LOGIT_INIT_STD: f64 = 2e-5;

#[derive(Clone, Debug)]
pub struct ClassAttentionBlock {
    pub norm1: LayerNorm,
    pub q: Linear,
    pub kv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl ClassAttentionBlock {
    fn register(store: &mut ParamStore, rng: &mut Rng, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        Self {
            norm1: LayerNorm::register(store, rng, &format!("{name}.norm1"), dim),
            q: Linear::register(store, rng, &format!("{name}.q"), dim, dim, 1.0),
            kv: Linear::register(store, rng, &format!("{name}.kv"), dim, 2 * dim, 1.0),
            proj: Linear::register(store, rng, &format!("{name}.proj"), dim, dim, 0.5),
            norm2: LayerNorm::register(store, rng, &format!("{name}.norm2"), dim),
            fc1: Linear::register(store, rng, &format!("{name}.fc1"), dim, mlp_ratio * dim, 1.0),
            fc2: Linear::register(store, rng, &format!("{name}.fc2"), mlp_ratio * dim, dim, 0.5),
            heads,
        }
    }

    /// Updates the `1 × d` class token by attending over itself and the
    /// tokens.
    fn forward(&self, g: &mut Graph, cls: Var, tokens: Var) -> Result<Var> {
        let d = g.shape(cls).1;
        let z = g.concat_rows(&[cls, tokens])?;
        let zn = self.norm1.forward(g, z)?;
        let cn = g.select_rows(zn, &[0])?;
        let q = self.q.forward(g, cn)?;
        let kv = self.kv.forward(g, zn)?;
        let k = g.select_cols(kv, 0, d)?;
        let v = g.select_cols(kv, d, d)?;
        let a = multi_head_attention(g, q, k, v, self.heads, None)?;
        let a = self.proj.forward(g, a)?;
        let cls = g.add(cls, a)?;
        let h = self.norm2.forward(g, cls)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, h)?;
        g.add(cls, h)
    }
}

#[derive(Clone, Debug)]
pub struct ClassHead {
    pub cls_token: ParamId,
    pub blocks: Vec<ClassAttentionBlock>,
    pub norm: LayerNorm,
    pub mlp: Mlp,
}

impl ClassHead {
    pub fn register(store: &mut ParamStore, rng: &mut Rng, cfg: &super::ModelConfig) -> Self {
        let d = cfg.encoder.dim;
        Self {
            cls_token: store.add("head.cls_token", 1, d, Init::Normal(0.02), rng),
            blocks: (0..CLASS_ATTENTION_BLOCKS)
                .map(|i| ClassAttentionBlock::register(store, rng, &format!("head.blocks.{i}"), d, cfg.encoder.heads, cfg.encoder.mlp_ratio))
                .collect(),
            norm: LayerNorm::register(store, rng, "head.norm", d),
            mlp: Mlp {
                layers: vec![
                    Linear::register(store, rng, "head.mlp.0", d, d, 1.0),
                    Linear::register(store, rng, "head.mlp.1", d, cfg.num_classes, LOGIT_INIT_STD * (d as f64).sqrt()),
                ],
            },
        }
    }

    /// `1 × classes` logits for a `c × d` token sequence.
    pub fn forward(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let mut cls = g.param(self.cls_token);
        for b in &self.blocks {
            cls = b.forward(g, cls, tokens)?;
        }
        let h = self.norm.forward(g, cls)?;
        self.mlp.forward(g, h)
    }
}
