//! Differentiable model components and the full weight set.

pub mod attention;
pub mod head;
pub mod pair;
pub mod predictor;

pub use attention::{multi_head_attention, Block, EncoderStack};
pub use head::ClassHead;
pub use pair::{bias_embed, compute_pair_features, padded_head_biases, PairFeatures, PAIR_CHANNELS};
pub use predictor::{coords_tensor, Predictor, POSITION_SCALE};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::jetdata::{wrap_phi, JetRecord};
use crate::nn::Mlp;
use crate::params::ParamStore;
use crate::rng;
use crate::tokenizer::{group_jet, GroupEncoder, TokenizedJet, TokenizerConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub registers: usize,
    pub use_physics_bias: bool,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { depth: 4, dim: 32, heads: 4, registers: 8, use_physics_bias: true, mlp_ratio: 4 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictorConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self { depth: 2, dim: 16, heads: 2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub tokenizer: TokenizerConfig,
    pub encoder: EncoderConfig,
    pub predictor: PredictorConfig,
    pub bias_hidden: usize,
    pub pos_hidden: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            tokenizer: TokenizerConfig::default(),
            encoder: EncoderConfig::default(),
            predictor: PredictorConfig::default(),
            bias_hidden: 16,
            pos_hidden: 16,
            num_classes: 3,
        }
    }
}

impl ModelConfig {
    /// Twelve-block encoder at width 128, matching `configs/full.conf`.
    pub fn full_scale() -> Self {
        let dim = 128;
        Self {
            tokenizer: TokenizerConfig { d: dim, mlp_widths: vec![128], ..TokenizerConfig::default() },
            encoder: EncoderConfig { depth: 12, dim, heads: 8, ..EncoderConfig::default() },
            predictor: PredictorConfig { depth: 4, dim: dim / 2, heads: 4 },
            bias_hidden: 64,
            pos_hidden: 64,
            num_classes: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        let e = &self.encoder;
        if e.heads == 0 || e.dim % e.heads != 0 {
            return Err(Error::Config(format!("encoder.dim {} not divisible by encoder.heads {}", e.dim, e.heads)));
        }
        if e.mlp_ratio == 0 {
            return Err(Error::Config("encoder.mlp_ratio must be positive".into()));
        }
        if self.tokenizer.d != e.dim {
            return Err(Error::Config(format!("tokenizer.d {} must equal encoder.dim {}", self.tokenizer.d, e.dim)));
        }
        let p = &self.predictor;
        if p.heads == 0 || p.dim == 0 || p.dim % p.heads != 0 {
            return Err(Error::Config(format!("predictor.dim {} not divisible by predictor.heads {}", p.dim, p.heads)));
        }
        if self.bias_hidden == 0 || self.pos_hidden == 0 {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        Ok(())
    }
}

/// Closed-form number of scalar parameters for `cfg`.
pub fn analytic_param_count(cfg: &ModelConfig) -> usize {
    let lin = |i: usize, o: usize| i * o + o;
    let mlp = |w: &[usize]| w.windows(2).map(|p| lin(p[0], p[1])).sum::<usize>();
    let block = |d: usize, r: usize| 4 * d + lin(d, 3 * d) + lin(d, d) + lin(d, r * d) + lin(r * d, d);
    let (e, p) = (&cfg.encoder, &cfg.predictor);
    let d = e.dim;
    let r = e.mlp_ratio;
    let stack = e.registers * d + e.depth * block(d, r);
    let predictor = lin(d, p.dim) + p.dim + mlp(&[2, cfg.pos_hidden, p.dim]) + p.depth * block(p.dim, r) + 2 * p.dim + lin(p.dim, d);
    let class_block = 4 * d + lin(d, d) + lin(d, 2 * d) + lin(d, d) + lin(d, r * d) + lin(r * d, d);
    let head = d + head::CLASS_ATTENTION_BLOCKS * class_block + 2 * d + mlp(&[d, d, cfg.num_classes]);
    mlp(&cfg.tokenizer.layer_widths())
        + mlp(&[2, cfg.pos_hidden, d])
        + mlp(&[PAIR_CHANNELS, cfg.bias_hidden, e.heads])
        + 2 * stack
        + predictor
        + head
}

/// Parameter-name prefixes of the shared backbone trained by both
/// pre-training and fine-tuning.
pub const BACKBONE_PREFIXES: [&str; 4] = ["tokenizer.", "pos_embed.", "bias_embed.", "student."];
pub const TEACHER_PREFIX: &str = "teacher.";
pub const PREDICTOR_PREFIX: &str = "predictor.";
pub const HEAD_PREFIX: &str = "head.";

/// Everything needed per jet that does not depend on the weights.
#[derive(Clone, Debug)]
pub struct JetInput {
    pub tokens: TokenizedJet,
    pub features: Tensor,
    /// Token centers relative to the jet axis.
    pub coords: Vec<[f64; 2]>,
    pub pairs: PairFeatures,
}

impl JetInput {
    pub fn prepare(jet: &JetRecord, cfg: &TokenizerConfig) -> Result<Self> {
        let tokens = group_jet(jet, cfg)?;
        let (ae, ap) = jet.jet_axis;
        let coords = tokens.center_coords().iter().map(|c| [c[0] - ae, wrap_phi(c[1] - ap)]).collect();
        let pairs = compute_pair_features(&tokens.four_vectors())?;
        let features = tokens.stacked_features();
        Ok(Self { tokens, features, coords, pairs })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// All learnable weights plus the layer structure that addresses them.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub tokenizer: GroupEncoder,
    pub pos_embed: Mlp,
    pub bias_embed: Mlp,
    pub student: EncoderStack,
    pub teacher: EncoderStack,
    pub predictor: Predictor,
    pub head: ClassHead,
}

impl Model {
    /// Freshly initialized weights; the teacher starts as a copy of the
    /// student.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::default();
        let r = |tag: u64| rng::stream(seed, rng::stream_id(&[0x1417, tag]));
        let tokenizer = GroupEncoder::register(&mut store, &mut r(0), &cfg.tokenizer);
        let pos_embed = Mlp::register(&mut store, &mut r(1), "pos_embed", &[2, cfg.pos_hidden, cfg.encoder.dim]);
        let bias_embed = Mlp::register(&mut store, &mut r(2), "bias_embed", &[PAIR_CHANNELS, cfg.bias_hidden, cfg.encoder.heads]);
        let student = EncoderStack::register(&mut store, &mut r(3), "student", &cfg.encoder);
        let teacher = EncoderStack::register(&mut store, &mut r(4), "teacher", &cfg.encoder);
        let predictor = Predictor::register(&mut store, &mut r(5), cfg);
        let head = ClassHead::register(&mut store, &mut r(6), cfg);
        store.copy_prefix("student.", TEACHER_PREFIX)?;
        Ok(Self { cfg: cfg.clone(), store, tokenizer, pos_embed, bias_embed, student, teacher, predictor, head })
    }

    /// Re-draws the classification head from `seed`, leaving every other
    /// parameter untouched.
    pub fn reset_head(&mut self, seed: u64) -> Result<()> {
        let fresh = Model::new(&self.cfg, seed)?;
        let mask = self.store.mask_by_prefix(&[HEAD_PREFIX]);
        for (i, e) in self.store.entries().to_vec().iter().enumerate() {
            if mask[i] {
                let id = self.store.require(&e.name)?;
                let src = fresh.store.require(&e.name)?;
                self.store.slice_mut(id).copy_from_slice(fresh.store.slice(src));
            }
        }
        Ok(())
    }

    pub fn token_embeddings(&self, g: &mut Graph, input: &JetInput) -> Result<Var> {
        let x = g.constant(input.features.clone());
        self.tokenizer.forward(g, x)
    }

    pub fn positional(&self, g: &mut Graph, coords: &[[f64; 2]]) -> Result<Var> {
        let x = g.constant(coords_tensor(coords));
        self.pos_embed.forward(g, x)
    }

    /// `c² × heads` bias node for the pairs, or `None` when the physics bias
    /// is disabled.
    pub fn bias(&self, g: &mut Graph, pairs: &PairFeatures) -> Result<Option<Var>> {
        if !self.cfg.encoder.use_physics_bias {
            return Ok(None);
        }
        bias_embed(g, pairs, &self.bias_embed).map(Some)
    }

    /// Adds positional embeddings to `tokens` and runs `stack`.
    pub fn encode(&self, g: &mut Graph, stack: &EncoderStack, tokens: Var, coords: &[[f64; 2]], bias: Option<Var>) -> Result<Var> {
        let pos = self.positional(g, coords)?;
        let x = g.add(tokens, pos)?;
        stack.forward(g, x, bias)
    }

    /// Student encoding of every token of a jet.
    pub fn backbone(&self, g: &mut Graph, input: &JetInput) -> Result<Var> {
        let t = self.token_embeddings(g, input)?;
        let b = self.bias(g, &input.pairs)?;
        self.encode(g, &self.student, t, &input.coords, b)
    }

    /// `1 × classes` logits.
    pub fn classify(&self, g: &mut Graph, input: &JetInput) -> Result<Var> {
        let z = self.backbone(g, input)?;
        self.head.forward(g, z)
    }

    /// `c × d` student token representations, computed without a tape.
    pub fn represent(&self, input: &JetInput) -> Result<Tensor> {
        let mut g = Graph::new(&self.store, None);
        let z = self.backbone(&mut g, input)?;
        Ok(g.value(z).clone())
    }

    /// Teacher representations of every token.
    pub fn teacher_represent(&self, input: &JetInput) -> Result<Tensor> {
        let mut g = Graph::new(&self.store, None);
        let t = self.token_embeddings(&mut g, input)?;
        let b = self.bias(&mut g, &input.pairs)?;
        let z = self.encode(&mut g, &self.teacher, t, &input.coords, b)?;
        Ok(g.value(z).clone())
    }
}
