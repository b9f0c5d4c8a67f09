//! The pre-training loop: per-jet JEPA objective, optimizer step, EMA
//! teacher update, loss logging and resumable checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::optim::{clip_grad_norm, AdamW};
use super::schedule::{lr_at, momentum_at};
use crate::autograd::{Graph, Var};
use crate::backbone::{JetInput, Model, ModelConfig, HEAD_PREFIX, TEACHER_PREFIX};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::jetdata::{AugmentConfig, JetRecord};
use crate::masking::{sample_masks, MaskConfig, MaskSpec};
use crate::params::ParamStore;
use crate::rng;

pub const LOSS_CSV_HEADER: &str = "step,loss,lr,momentum,grad_norm";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub warmup_steps: u64,
    pub ema_momentum_start: f64,
    pub ema_momentum_end: f64,
    pub smooth_l1_beta: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Write an intermediate checkpoint every this many steps (0 = only at
    /// the end).
    pub checkpoint_every: u64,
    pub seed: u64,
    pub mask: MaskConfig,
    pub model: ModelConfig,
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            peak_lr: 1e-3,
            floor_lr: 1e-5,
            warmup_steps: 100,
            ema_momentum_start: 0.996,
            ema_momentum_end: 1.0,
            smooth_l1_beta: 1.0,
            weight_decay: 0.05,
            grad_clip: 1.0,
            checkpoint_every: 0,
            seed: 0,
            mask: MaskConfig::default(),
            model: ModelConfig::default(),
            augment: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.steps {
            return Err(Error::Config(format!("jepa.warmup_steps {} exceeds jepa.steps {}", self.warmup_steps, self.steps)));
        }
        let m = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("jepa.{name} {v} not in (0, 1]")))
            }
        };
        m("ema_momentum_start", self.ema_momentum_start)?;
        m("ema_momentum_end", self.ema_momentum_end)?;
        if self.batch_size == 0 {
            return Err(Error::Config("jepa.batch_size must be positive".into()));
        }
        if !(self.smooth_l1_beta > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config("jepa.smooth_l1_beta and jepa.grad_clip must be positive".into()));
        }
        if !(self.peak_lr >= 0.0 && self.floor_lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rates and weight decay must be non-negative".into()));
        }
        self.mask.validate()?;
        self.model.validate()
    }
}

pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    lr_at(step, cfg.steps, cfg.warmup_steps, cfg.peak_lr, cfg.floor_lr)
}

pub fn momentum_schedule(step: u64, cfg: &TrainConfig) -> f64 {
    momentum_at(step, cfg.steps, cfg.ema_momentum_start, cfg.ema_momentum_end)
}

/// `teacher ← m·teacher + (1 − m)·student`, elementwise.
pub fn ema_update(teacher: &mut [f64], student: &[f64], momentum: f64) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::Shape(format!("EMA over {} teacher and {} student scalars", teacher.len(), student.len())));
    }
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Config(format!("EMA momentum {momentum} not in [0, 1]")));
    }
    for (t, &s) in teacher.iter_mut().zip(student) {
        *t = momentum * *t + (1.0 - momentum) * s;
    }
    Ok(())
}

/// Applies [`ema_update`] to every `teacher.*` tensor from its `student.*`
/// twin.
pub fn update_teacher(store: &mut ParamStore, momentum: f64) -> Result<()> {
    let pairs: Vec<(usize, usize, usize)> = store
        .entries()
        .iter()
        .filter_map(|e| {
            let rest = e.name.strip_prefix(TEACHER_PREFIX)?;
            let s = store.entry(store.id(&format!("student.{rest}"))?);
            Some((e.offset, s.offset, e.rows * e.cols))
        })
        .collect();
    let data = store.data_mut();
    for (t, s, n) in pairs {
        let student = data[s..s + n].to_vec();
        ema_update(&mut data[t..t + n], &student, momentum)?;
    }
    Ok(())
}

/// Builds the JEPA objective of one jet. Returns the scalar loss node and
/// the teacher's token representations.
pub fn jet_objective(g: &mut Graph, model: &Model, input: &JetInput, masks: &MaskSpec, beta: f64) -> Result<(Var, Var)> {
    let tokens = model.token_embeddings(g, input)?;
    let full_bias = model.bias(g, &input.pairs)?;

    let teacher = model.encode(g, &model.teacher, tokens, &input.coords, full_bias)?;
    let frozen = g.detach(teacher);
    let targets = g.layer_norm(frozen, crate::nn::LN_EPS);

    let ctx = &masks.context_indices;
    let ctx_tokens = g.select_rows(tokens, ctx)?;
    let ctx_coords: Vec<[f64; 2]> = ctx.iter().map(|&i| input.coords[i]).collect();
    let ctx_bias = model.bias(g, &input.pairs.subset(ctx))?;
    let context = model.encode(g, &model.student, ctx_tokens, &ctx_coords, ctx_bias)?;

    let m = masks.target_blocks.len();
    let mut terms = Vec::with_capacity(m);
    for block in &masks.target_blocks {
        let coords: Vec<[f64; 2]> = block.iter().map(|&i| input.coords[i]).collect();
        let pred = model.predictor.forward(g, context, &ctx_coords, &coords)?;
        let target = g.select_rows(targets, block)?;
        terms.push((g.smooth_l1(pred, target, beta)?, 1.0 / m as f64));
    }
    Ok((g.weighted_sum(&terms)?, teacher))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub momentum: f64,
    pub grad_norm: f64,
    pub jets_used: usize,
    pub jets_skipped: usize,
    /// Mean over dimensions of the per-dimension standard deviation of the
    /// teacher's token outputs across the batch.
    pub teacher_std: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.loss, self.lr, self.momentum, self.grad_norm)
    }
}

/// Everything that evolves during pre-training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub optim: AdamW,
    pub step: u64,
    pub jets_skipped: u64,
    pub loss_sum: f64,
    /// Per-tensor trainability (student side, tokenizer, embedders,
    /// predictor).
    pub trainable: Vec<bool>,
}

fn decay_mask(store: &ParamStore, trainable: &[bool]) -> Vec<bool> {
    let by_tensor: Vec<bool> = store.entries().iter().zip(trainable).map(|(e, &t)| t && e.name.ends_with(".weight")).collect();
    store.scalar_mask(&by_tensor)
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(&cfg.model, cfg.seed)?;
        Ok(Self::from_model(model, cfg))
    }

    fn from_model(model: Model, cfg: &TrainConfig) -> Self {
        let trainable: Vec<bool> = model.store.mask_by_prefix(&[TEACHER_PREFIX, HEAD_PREFIX]).iter().map(|&f| !f).collect();
        let optim = AdamW::new(model.store.num_scalars(), cfg.weight_decay);
        Self { model, optim, step: 0, jets_skipped: 0, loss_sum: 0.0, trainable }
    }

    pub fn to_checkpoint(&self, config_text: &str) -> Checkpoint {
        let mut ck = Checkpoint::new(config_text.to_string(), self.step);
        let store = &self.model.store;
        for e in store.entries() {
            let id = store.require(&e.name).expect("own entry");
            ck.push(e.name.clone(), e.rows, e.cols, store.slice(id).to_vec());
        }
        for (prefix, buf) in [("optim.m.", &self.optim.m), ("optim.v.", &self.optim.v)] {
            for e in store.entries() {
                ck.push(format!("{prefix}{}", e.name), e.rows, e.cols, buf[e.offset..e.offset + e.rows * e.cols].to_vec());
            }
        }
        ck.push("optim.t", 1, 1, vec![self.optim.t as f64]);
        ck.push("train.stats", 1, 2, vec![self.jets_skipped as f64, self.loss_sum]);
        ck
    }

    /// Restores a state written by [`TrainState::to_checkpoint`]; optimizer
    /// tensors are optional so plain weight files load too.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        let mut model = Model::new(&cfg.model, cfg.seed)?;
        load_weights(&mut model.store, ck)?;
        let mut state = Self::from_model(model, cfg);
        state.step = ck.step;
        let store = &state.model.store;
        for (prefix, buf) in [("optim.m.", &mut state.optim.m), ("optim.v.", &mut state.optim.v)] {
            for e in store.entries() {
                if let Some(t) = ck.get(&format!("{prefix}{}", e.name)) {
                    if t.data.len() != e.rows * e.cols {
                        return Err(Error::Checkpoint { offset: 0, message: format!("{} has wrong size", t.name) });
                    }
                    buf[e.offset..e.offset + t.data.len()].copy_from_slice(&t.data);
                }
            }
        }
        if let Some(t) = ck.get("optim.t") {
            state.optim.t = t.data[0] as u64;
        }
        if let Some(t) = ck.get("train.stats") {
            state.jets_skipped = t.data[0] as u64;
            state.loss_sum = t.data[1];
        }
        Ok(state)
    }
}

/// Copies every model tensor from `ck` into `store`, checking shapes.
pub fn load_weights(store: &mut ParamStore, ck: &Checkpoint) -> Result<()> {
    for e in store.entries().to_vec() {
        let t = ck.require(&e.name)?;
        if (t.rows, t.cols) != (e.rows, e.cols) {
            return Err(Error::Checkpoint {
                offset: 0,
                message: format!("{} is {}x{}, expected {}x{}", e.name, t.rows, t.cols, e.rows, e.cols),
            });
        }
        let id = store.require(&e.name)?;
        store.slice_mut(id).copy_from_slice(&t.data);
    }
    Ok(())
}

/// Dataset indices of the batch used at `step`: consecutive slices of
/// per-epoch permutations seeded by `(seed, epoch)`.
pub fn batch_indices(n: usize, batch_size: usize, step: u64, seed: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch_size);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for i in 0..batch_size as u64 {
        let pos = step * batch_size as u64 + i;
        let epoch = pos / n as u64;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng::stream(seed, rng::stream_id(&[0xE90C, epoch])));
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().unwrap().1[(pos % n as u64) as usize]);
    }
    out
}

fn mean_dim_std(rows: &[Vec<f64>]) -> f64 {
    if rows.len() < 2 {
        return 0.0;
    }
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut total = 0.0;
    for j in 0..d {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        total += var.sqrt();
    }
    total / d as f64
}

struct JetResult {
    loss: f64,
    grads: Vec<f64>,
    teacher_rows: Vec<Vec<f64>>,
}

/// Mask stream of one jet at `step`, keyed by the jet's token coordinates so
/// the batch loss does not depend on the order of jets within the batch.
fn mask_stream(step: u64, input: &JetInput) -> u64 {
    let mut parts = vec![0x3A5C, step];
    parts.extend(input.coords.iter().flat_map(|c| [c[0].to_bits(), c[1].to_bits()]));
    rng::stream_id(&parts)
}

/// One optimization step on `batch`.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, batch: &[&JetInput]) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::Training("empty batch".into()));
    }
    let step = state.step;
    let model = &state.model;
    let tensor_mask = &state.trainable;
    let results: Vec<Option<JetResult>> = batch
        .par_iter()
        .map(|input| -> Result<Option<JetResult>> {
            if input.len() < 2 {
                return Ok(None);
            }
            let mut r = rng::stream(cfg.seed, mask_stream(step, input));
            let masks = match sample_masks(&input.coords, &cfg.mask, &mut r) {
                Ok(m) => m,
                Err(Error::EmptyContext) => return Ok(None),
                Err(e) => return Err(e),
            };
            let mut g = Graph::new(&model.store, Some(tensor_mask));
            let (loss, teacher) = jet_objective(&mut g, model, input, &masks, cfg.smooth_l1_beta)?;
            let grads = g.param_gradients(loss);
            let t = g.value(teacher);
            let teacher_rows = (0..t.rows).map(|i| t.row(i).to_vec()).collect();
            Ok(Some(JetResult { loss: g.value(loss).item(), grads, teacher_rows }))
        })
        .collect::<Result<_>>()?;

    let used = results.iter().filter(|r| r.is_some()).count();
    let skipped = batch.len() - used;
    if used == 0 {
        return Err(Error::Training(format!("every jet in the batch at step {step} was skipped")));
    }
    let n = model.store.num_scalars();
    let mut grads = vec![0.0; n];
    let mut loss = 0.0;
    let mut teacher_rows = Vec::new();
    for r in results.into_iter().flatten() {
        loss += r.loss;
        for (a, b) in grads.iter_mut().zip(&r.grads) {
            *a += b;
        }
        teacher_rows.extend(r.teacher_rows);
    }
    let inv = 1.0 / used as f64;
    loss *= inv;
    grads.iter_mut().for_each(|g| *g *= inv);
    if !loss.is_finite() {
        return Err(Error::Training(format!("non-finite loss {loss} at step {step}")));
    }

    let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
    let lr = lr_schedule(step, cfg);
    let momentum = momentum_schedule(step, cfg);
    let scalar_mask = state.model.store.scalar_mask(&state.trainable);
    let decay = decay_mask(&state.model.store, &state.trainable);
    state.optim.step(state.model.store.data_mut(), &grads, &scalar_mask, &decay, lr)?;
    update_teacher(&mut state.model.store, momentum)?;
    state.step += 1;
    state.jets_skipped += skipped as u64;
    state.loss_sum += loss;
    Ok(StepMetrics {
        step,
        loss,
        lr,
        momentum,
        grad_norm,
        jets_used: used,
        jets_skipped: skipped,
        teacher_std: mean_dim_std(&teacher_rows),
    })
}

/// Tokenizes every jet once; jets that fail to tokenize become `None`.
pub fn prepare_inputs(jets: &[JetRecord], model: &ModelConfig) -> Vec<Option<JetInput>> {
    jets.par_iter().map(|j| JetInput::prepare(j, &model.tokenizer).ok()).collect()
}

#[derive(Clone, Debug)]
pub struct PretrainOptions {
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    /// Metrics of the steps run by this call.
    pub metrics: Vec<StepMetrics>,
    pub state: TrainState,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("checkpoint-{step:06}.jjck")
}

pub const FINAL_CHECKPOINT: &str = "model.jjck";
pub const LOSS_CSV: &str = "loss.csv";

/// Runs pre-training to `run.train.steps`, writing `loss.csv`, periodic
/// checkpoints and `model.jjck` under `opts.out_dir`.
pub fn pretrain(run: &RunConfig, jets: &[JetRecord], opts: &PretrainOptions) -> Result<PretrainOutput> {
    let cfg = &run.train;
    cfg.validate()?;
    if jets.is_empty() {
        return Err(Error::Training("pre-training dataset is empty".into()));
    }
    let text = run.to_text();
    std::fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let csv_path = opts.out_dir.join(LOSS_CSV);

    let mut state = match &opts.resume {
        Some(p) => TrainState::from_checkpoint(&Checkpoint::load(p)?, cfg)?,
        None => TrainState::new(cfg)?,
    };
    let mut csv = String::from(LOSS_CSV_HEADER);
    csv.push('\n');
    if opts.resume.is_some() {
        if let Ok(old) = std::fs::read_to_string(&csv_path) {
            for line in old.lines().skip(1) {
                let s: u64 = line.split(',').next().and_then(|v| v.parse().ok()).unwrap_or(u64::MAX);
                if s < state.step {
                    csv.push_str(line);
                    csv.push('\n');
                }
            }
        }
    }

    let cached = if cfg.augment.is_none() { Some(prepare_inputs(jets, &cfg.model)) } else { None };
    let mut metrics = Vec::new();
    while state.step < cfg.steps {
        let step = state.step;
        let idx = batch_indices(jets.len(), cfg.batch_size, step, cfg.seed);
        let owned: Vec<Option<JetInput>>;
        let batch: Vec<&JetInput> = match (&cached, &cfg.augment) {
            (Some(c), _) => idx.iter().filter_map(|&i| c[i].as_ref()).collect(),
            (None, Some(aug)) => {
                owned = idx
                    .par_iter()
                    .map(|&i| {
                        let seed = rng::stream_id(&[cfg.seed, 0xA11, step, i as u64]);
                        aug.apply(&jets[i], seed).ok().and_then(|j| JetInput::prepare(&j, &cfg.model.tokenizer).ok())
                    })
                    .collect();
                owned.iter().flatten().collect()
            }
            (None, None) => unreachable!(),
        };
        let m = match train_step(&mut state, cfg, &batch) {
            Ok(m) => m,
            Err(Error::Training(msg)) => {
                let dump = opts.out_dir.join(format!("failed-batch-{step:06}.txt"));
                let list: Vec<String> = idx.iter().map(|i| i.to_string()).collect();
                let _ = std::fs::write(&dump, format!("step {step}\njet indices {}\n", list.join(",")));
                return Err(Error::Training(format!("{msg}; batch jet indices [{}] written to {}", list.join(","), dump.display())));
            }
            Err(e) => return Err(e),
        };
        writeln!(csv, "{}", m.csv_row()).expect("string write");
        metrics.push(m);
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && state.step < cfg.steps {
            state.to_checkpoint(&text).save(&opts.out_dir.join(checkpoint_name(state.step)))?;
            write_atomic(&csv_path, csv.as_bytes())?;
        }
    }
    write_atomic(&csv_path, csv.as_bytes())?;
    let final_path = opts.out_dir.join(FINAL_CHECKPOINT);
    state.to_checkpoint(&text).save(&final_path)?;
    Ok(PretrainOutput { checkpoint: final_path, loss_csv: csv_path, metrics, state })
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
