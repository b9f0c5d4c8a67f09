//! Narrow transformer that predicts target-token representations from the
//! context representations and position-tagged mask tokens.

use super::attention::Block;
use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::params::{Init, ParamId, ParamStore};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct Predictor {
    pub proj_in: Linear,
    pub mask_token: ParamId,
    pub pos: Mlp,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub proj_out: Linear,
    pub width: usize,
}

impl Predictor {
    pub fn register(store: &mut ParamStore, rng: &mut Rng, cfg: &super::ModelConfig) -> Self {
        let p = &cfg.predictor;
        let d = cfg.encoder.dim;
        let gain = 1.0 / (2.0 * p.depth.max(1) as f64).sqrt();
        Self {
            proj_in: Linear::register(store, rng, "predictor.proj_in", d, p.dim, 1.0),
            mask_token: store.add("predictor.mask_token", 1, p.dim, Init::Normal(0.02), rng),
            pos: Mlp::register(store, rng, "predictor.pos_embed", &[2, cfg.pos_hidden, p.dim]),
            blocks: (0..p.depth)
                .map(|i| Block::register(store, rng, &format!("predictor.blocks.{i}"), p.dim, p.heads, cfg.encoder.mlp_ratio, gain))
                .collect(),
            norm: LayerNorm::register(store, rng, "predictor.norm", p.dim),
            proj_out: Linear::register(store, rng, "predictor.proj_out", p.dim, d, 1.0),
            width: p.dim,
        }
    }

    /// Predictions for one target block: `targets × d`.
    pub fn forward(
        &self,
        g: &mut Graph,
        context: Var,
        context_coords: &[[f64; 2]],
        target_coords: &[[f64; 2]],
    ) -> Result<Var> {
        let cx = g.shape(context).0;
        if cx == 0 || context_coords.len() != cx {
            return Err(Error::Shape(format!("predictor context of {cx} rows with {} coords", context_coords.len())));
        }
        let nt = target_coords.len();
        if nt == 0 {
            return Err(Error::Shape("predictor needs at least one target".into()));
        }
        let ctx = self.proj_in.forward(g, context)?;
        let cpos = g.constant(coords_tensor(context_coords));
        let cpos = self.pos.forward(g, cpos)?;
        let ctx = g.add(ctx, cpos)?;

        let token = g.param(self.mask_token);
        let w = self.width;
        let masks = g.gather(token, nt, w, (0..nt * w).map(|k| Some(k % w)).collect())?;
        let tpos = g.constant(coords_tensor(target_coords));
        let tpos = self.pos.forward(g, tpos)?;
        let masks = g.add(masks, tpos)?;

        let mut h = g.concat_rows(&[ctx, masks])?;
        for block in &self.blocks {
            h = block.forward(g, h, None)?;
        }
        let h = self.norm.forward(g, h)?;
        let idx: Vec<usize> = (cx..cx + nt).collect();
        let out = g.select_rows(h, &idx)?;
        self.proj_out.forward(g, out)
    }
}

/// Angular length that maps to one unit at the input of the positional
/// embedders.
pub const POSITION_SCALE: f64 = 0.2;

/// `c × 2` positional-embedder input: coordinates divided by
/// [`POSITION_SCALE`].
pub fn coords_tensor(coords: &[[f64; 2]]) -> Tensor {
    Tensor::from_vec(coords.len(), 2, coords.iter().flatten().map(|v| v / POSITION_SCALE).collect())
}
