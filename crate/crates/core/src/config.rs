//! Run configuration: one line-oriented `key = value` file with `[section]`
//! headers named after the modules, plus `section.key=value` overrides.
//!
//! Every key has a default, so an empty file is a valid configuration.
//! Unknown sections or keys are rejected. [`RunConfig::to_text`] writes the
//! canonical form whose digest is the configuration hash.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::evalkit::EvalConfig;
use crate::jepa::TrainConfig;
use crate::jetdata::{AugmentConfig, ClassSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub jets: usize,
    pub spec: ClassSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { jets: 2000, spec: ClassSpec::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    /// Pre-training settings, including the seed, model, masking and
    /// augmentation configuration.
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Augmentation settings kept while augmentation is switched off;
    /// `train.augment` holds a copy when it is on.
    pub augment: AugmentConfig,
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_pair(key: &str, value: &str) -> Result<(f64, f64)> {
    match parse_list::<f64>(key, value)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::Config(format!("{key} expects two comma-separated numbers, got {value:?}"))),
    }
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn model(&self) -> &ModelConfig {
        &self.train.model
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Applies the assignments in `text` on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {line:?}", n + 1)))?;
            self.set(&section, key.trim(), value.trim()).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        self.validate()
    }

    /// Applies one `section.key=value` override. Cross-field checks are left to
    /// [`RunConfig::validate`] so that dependent keys can be set in any order.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (path, value) =
            assignment.split_once('=').ok_or_else(|| Error::Config(format!("override {assignment:?} is not section.key=value")))?;
        let (section, key) =
            path.trim().split_once('.').ok_or_else(|| Error::Config(format!("override key {path:?} is not section.key")))?;
        self.set(section, key, value.trim())
    }

    pub fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let full = format!("{section}.{key}");
        let k = full.as_str();
        let t = &mut self.train;
        let m = &mut t.model;
        let s = &mut self.synth.spec;
        let e = &mut self.eval;
        match k {
            "run.seed" => t.seed = parse(k, v)?,

            "synth.jets" => self.synth.jets = parse(k, v)?,
            "synth.classes" => s.prongs = parse_list(k, v)?,
            "synth.particles" => {
                let p: Vec<usize> = parse_list(k, v)?;
                match p.as_slice() {
                    [a, b] => s.particles = (*a, *b),
                    _ => return Err(Error::Config(format!("{k} expects min,max"))),
                }
            }
            "synth.jet_pt" => s.jet_pt = parse_pair(k, v)?,
            "synth.sigma" => s.sigma = parse(k, v)?,
            "synth.cone" => s.cone = parse(k, v)?,
            "synth.min_prong_separation" => s.min_prong_separation = parse(k, v)?,
            "synth.max_abs_eta" => s.max_abs_eta = parse(k, v)?,

            "tokenizer.center_ratio" => m.tokenizer.center_ratio = parse(k, v)?,
            "tokenizer.min_centers" => m.tokenizer.min_centers = parse(k, v)?,
            "tokenizer.k" => m.tokenizer.k = parse(k, v)?,
            "tokenizer.mlp_widths" => m.tokenizer.mlp_widths = parse_list(k, v)?,
            "tokenizer.start_rule" => m.tokenizer.start_rule = parse(k, v)?,

            "masking.strategy" => t.mask.strategy = parse(k, v)?,
            "masking.num_targets" => t.mask.num_targets = parse(k, v)?,
            "masking.target_scale" => t.mask.target_scale = parse_pair(k, v)?,
            "masking.target_aspect" => t.mask.target_aspect = parse_pair(k, v)?,
            "masking.context_scale" => t.mask.context_scale = parse_pair(k, v)?,

            "backbone.dim" => {
                m.encoder.dim = parse(k, v)?;
                m.tokenizer.d = m.encoder.dim;
            }
            "backbone.depth" => m.encoder.depth = parse(k, v)?,
            "backbone.heads" => m.encoder.heads = parse(k, v)?,
            "backbone.registers" => m.encoder.registers = parse(k, v)?,
            "backbone.use_physics_bias" => m.encoder.use_physics_bias = parse(k, v)?,
            "backbone.mlp_ratio" => m.encoder.mlp_ratio = parse(k, v)?,
            "backbone.bias_hidden" => m.bias_hidden = parse(k, v)?,
            "backbone.pos_hidden" => m.pos_hidden = parse(k, v)?,
            "backbone.num_classes" => m.num_classes = parse(k, v)?,
            "backbone.predictor_depth" => m.predictor.depth = parse(k, v)?,
            "backbone.predictor_dim" => m.predictor.dim = parse(k, v)?,
            "backbone.predictor_heads" => m.predictor.heads = parse(k, v)?,

            "jepa.steps" => t.steps = parse(k, v)?,
            "jepa.batch_size" => t.batch_size = parse(k, v)?,
            "jepa.peak_lr" => t.peak_lr = parse(k, v)?,
            "jepa.floor_lr" => t.floor_lr = parse(k, v)?,
            "jepa.warmup_steps" => t.warmup_steps = parse(k, v)?,
            "jepa.ema_momentum_start" => t.ema_momentum_start = parse(k, v)?,
            "jepa.ema_momentum_end" => t.ema_momentum_end = parse(k, v)?,
            "jepa.smooth_l1_beta" => t.smooth_l1_beta = parse(k, v)?,
            "jepa.weight_decay" => t.weight_decay = parse(k, v)?,
            "jepa.grad_clip" => t.grad_clip = parse(k, v)?,
            "jepa.checkpoint_every" => t.checkpoint_every = parse(k, v)?,

            "augment.enabled" => {
                let on: bool = parse(k, v)?;
                t.augment = on.then_some(self.augment);
            }
            "augment.rotate" | "augment.smear_sigma" | "augment.max_boost" => {
                let a = &mut self.augment;
                match key {
                    "rotate" => a.rotate = parse(k, v)?,
                    "smear_sigma" => a.smear_sigma = parse(k, v)?,
                    _ => a.max_boost = parse(k, v)?,
                }
                if t.augment.is_some() {
                    t.augment = Some(*a);
                }
            }

            "evalkit.steps" => e.steps = parse(k, v)?,
            "evalkit.batch_size" => e.batch_size = parse(k, v)?,
            "evalkit.peak_lr" => e.peak_lr = parse(k, v)?,
            "evalkit.floor_lr" => e.floor_lr = parse(k, v)?,
            "evalkit.warmup_steps" => e.warmup_steps = parse(k, v)?,
            "evalkit.weight_decay" => e.weight_decay = parse(k, v)?,
            "evalkit.grad_clip" => e.grad_clip = parse(k, v)?,
            "evalkit.eval_every" => e.eval_every = parse(k, v)?,
            "evalkit.val_fraction" => e.val_fraction = parse(k, v)?,
            "evalkit.label_fractions" => e.label_fractions = parse_list(k, v)?,
            "evalkit.probe_reg" => e.probe_reg = parse(k, v)?,
            "evalkit.probe_loss" => e.probe_loss = parse(k, v)?,

            _ => return Err(Error::Config(format!("unknown key {k}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.spec.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.train.model.tokenizer.d != self.train.model.encoder.dim {
            return Err(Error::Config("tokenizer width must equal backbone.dim".into()));
        }
        let a = &self.augment;
        if !(a.smear_sigma >= 0.0 && a.max_boost >= 0.0) {
            return Err(Error::Config("augment.smear_sigma and augment.max_boost must be non-negative".into()));
        }
        if self.train.augment.is_some_and(|t| t != *a) {
            return Err(Error::Config("train.augment must match the [augment] section".into()));
        }
        Ok(())
    }

    /// Canonical text listing every key.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let m = &t.model;
        let s = &self.synth.spec;
        let e = &self.eval;
        let mut o = String::new();
        let mut w = |line: String| {
            o.push_str(&line);
            o.push('\n');
        };
        w("[run]".into());
        w(format!("seed = {}", t.seed));
        w(String::new());
        w("[synth]".into());
        w(format!("jets = {}", self.synth.jets));
        w(format!("classes = {}", list(&s.prongs)));
        w(format!("particles = {},{}", s.particles.0, s.particles.1));
        w(format!("jet_pt = {},{}", s.jet_pt.0, s.jet_pt.1));
        w(format!("sigma = {}", s.sigma));
        w(format!("cone = {}", s.cone));
        w(format!("min_prong_separation = {}", s.min_prong_separation));
        w(format!("max_abs_eta = {}", s.max_abs_eta));
        w(String::new());
        w("[tokenizer]".into());
        w(format!("center_ratio = {}", m.tokenizer.center_ratio));
        w(format!("min_centers = {}", m.tokenizer.min_centers));
        w(format!("k = {}", m.tokenizer.k));
        w(format!("mlp_widths = {}", list(&m.tokenizer.mlp_widths)));
        w(format!("start_rule = {}", m.tokenizer.start_rule));
        w(String::new());
        w("[masking]".into());
        w(format!("strategy = {}", t.mask.strategy));
        w(format!("num_targets = {}", t.mask.num_targets));
        w(format!("target_scale = {},{}", t.mask.target_scale.0, t.mask.target_scale.1));
        w(format!("target_aspect = {},{}", t.mask.target_aspect.0, t.mask.target_aspect.1));
        w(format!("context_scale = {},{}", t.mask.context_scale.0, t.mask.context_scale.1));
        w(String::new());
        w("[backbone]".into());
        w(format!("dim = {}", m.encoder.dim));
        w(format!("depth = {}", m.encoder.depth));
        w(format!("heads = {}", m.encoder.heads));
        w(format!("registers = {}", m.encoder.registers));
        w(format!("use_physics_bias = {}", m.encoder.use_physics_bias));
        w(format!("mlp_ratio = {}", m.encoder.mlp_ratio));
        w(format!("bias_hidden = {}", m.bias_hidden));
        w(format!("pos_hidden = {}", m.pos_hidden));
        w(format!("num_classes = {}", m.num_classes));
        w(format!("predictor_depth = {}", m.predictor.depth));
        w(format!("predictor_dim = {}", m.predictor.dim));
        w(format!("predictor_heads = {}", m.predictor.heads));
        w(String::new());
        w("[jepa]".into());
        w(format!("steps = {}", t.steps));
        w(format!("batch_size = {}", t.batch_size));
        w(format!("peak_lr = {}", t.peak_lr));
        w(format!("floor_lr = {}", t.floor_lr));
        w(format!("warmup_steps = {}", t.warmup_steps));
        w(format!("ema_momentum_start = {}", t.ema_momentum_start));
        w(format!("ema_momentum_end = {}", t.ema_momentum_end));
        w(format!("smooth_l1_beta = {}", t.smooth_l1_beta));
        w(format!("weight_decay = {}", t.weight_decay));
        w(format!("grad_clip = {}", t.grad_clip));
        w(format!("checkpoint_every = {}", t.checkpoint_every));
        w(String::new());
        w("[augment]".into());
        w(format!("enabled = {}", t.augment.is_some()));
        w(format!("rotate = {}", self.augment.rotate));
        w(format!("smear_sigma = {}", self.augment.smear_sigma));
        w(format!("max_boost = {}", self.augment.max_boost));
        w(String::new());
        w("[evalkit]".into());
        w(format!("steps = {}", e.steps));
        w(format!("batch_size = {}", e.batch_size));
        w(format!("peak_lr = {}", e.peak_lr));
        w(format!("floor_lr = {}", e.floor_lr));
        w(format!("warmup_steps = {}", e.warmup_steps));
        w(format!("weight_decay = {}", e.weight_decay));
        w(format!("grad_clip = {}", e.grad_clip));
        w(format!("eval_every = {}", e.eval_every));
        w(format!("val_fraction = {}", e.val_fraction));
        w(format!("label_fractions = {}", list(&e.label_fractions)));
        w(format!("probe_reg = {}", e.probe_reg));
        w(format!("probe_loss = {}", e.probe_loss));
        o
    }

    /// First 16 hex digits of the SHA-256 of [`RunConfig::to_text`].
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.to_text().as_bytes());
        let mut s = String::with_capacity(16);
        for b in &d[..8] {
            write!(s, "{b:02x}").unwrap();
        }
        s
    }
}
