//! Downstream evaluation: pooled embeddings, linear probes, frozen and
//! fine-tuned classification, label-fraction sweeps and embedding export.

pub mod probe;

pub use probe::{argmax, fit_linear, LinearClassifier, ProbeLoss, PROBE_TOLERANCE};

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::autograd::{Graph, Tensor};
use crate::backbone::{JetInput, Model, BACKBONE_PREFIXES, HEAD_PREFIX};
use crate::error::{Error, Result};
use crate::jepa::optim::{clip_grad_norm, AdamW};
use crate::jepa::schedule::lr_at;
use crate::jepa::train::{batch_indices, write_atomic};
use crate::jetdata::JetRecord;
use crate::rng;

pub const VAL_CSV_HEADER: &str = "step,val_loss,val_acc";

/// `concat(max over tokens, mean over tokens)`.
pub fn pool_embeddings(tokens: &Tensor) -> Result<Vec<f64>> {
    let (c, d) = tokens.shape();
    if c == 0 {
        return Err(Error::Shape("pooling needs at least one token".into()));
    }
    let mut max = tokens.row(0).to_vec();
    let mut mean = vec![0.0; d];
    for i in 0..c {
        for (j, &v) in tokens.row(i).iter().enumerate() {
            if v > max[j] {
                max[j] = v;
            }
            mean[j] += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= c as f64);
    max.extend(mean);
    Ok(max)
}

/// Accuracy of every class that occurs in `labels`, indexed by class id
/// (`None` for absent classes).
pub fn per_class_accuracy(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<Vec<Option<f64>>> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    let k = num_classes.max(labels.iter().map(|&l| l + 1).max().unwrap_or(0));
    let mut hit = vec![0usize; k];
    let mut tot = vec![0usize; k];
    for (&p, &l) in predictions.iter().zip(labels) {
        tot[l] += 1;
        if p == l {
            hit[l] += 1;
        }
    }
    Ok(hit.iter().zip(&tot).map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64)).collect())
}

/// Unweighted mean of per-class accuracies over the classes present in
/// `labels`.
pub fn macro_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Shape("macro accuracy of an empty label set".into()));
    }
    let per = per_class_accuracy(predictions, labels, 0)?;
    let mut present: Vec<f64> = per.into_iter().flatten().collect();
    // Summed in sorted order so relabeling classes cannot change the result.
    present.sort_by(f64::total_cmp);
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Scratch,
    Frozen,
    FineTuned,
    /// Linear classifier on pooled embeddings.
    LinearProbe,
}

impl std::str::FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(Self::Scratch),
            "frozen" => Ok(Self::Frozen),
            "fine-tuned" | "finetuned" | "fine_tuned" => Ok(Self::FineTuned),
            "linear-probe" => Ok(Self::LinearProbe),
            _ => Err(Error::Config(format!("unknown regime {s:?} (expected scratch, frozen or fine-tuned)"))),
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Scratch => "scratch",
            Self::Frozen => "frozen",
            Self::FineTuned => "fine-tuned",
            Self::LinearProbe => "linear-probe",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub regime: Regime,
    pub label_fraction: f64,
    pub macro_accuracy: f64,
    pub per_class: Vec<f64>,
    /// Step with the lowest validation loss (0 for linear probes).
    pub steps_to_best: u64,
    pub best_val_loss: f64,
    pub train_samples: usize,
    pub per_class_train: Vec<usize>,
    pub seed: u64,
    pub config_hash: String,
}

impl ProbeReport {
    /// Flat `key = value` text.
    pub fn to_text(&self) -> String {
        let join = |v: Vec<String>| v.join(",");
        let mut s = String::new();
        writeln!(s, "regime = {}", self.regime).unwrap();
        writeln!(s, "label_fraction = {}", self.label_fraction).unwrap();
        writeln!(s, "macro_accuracy = {}", self.macro_accuracy).unwrap();
        writeln!(s, "per_class_accuracy = {}", join(self.per_class.iter().map(|v| v.to_string()).collect())).unwrap();
        writeln!(s, "steps_to_best = {}", self.steps_to_best).unwrap();
        writeln!(s, "best_val_loss = {}", self.best_val_loss).unwrap();
        writeln!(s, "train_samples = {}", self.train_samples).unwrap();
        writeln!(s, "per_class_train = {}", join(self.per_class_train.iter().map(|v| v.to_string()).collect())).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        writeln!(s, "config_hash = {}", self.config_hash).unwrap();
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }
}

/// Indices of a class-stratified subsample keeping `round(fraction·n_c)`
/// (at least one) members of every class, in ascending order.
pub fn stratified_subsample(labels: &[usize], num_classes: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("label fraction {fraction} not in (0, 1]")));
    }
    let mut out = Vec::new();
    for c in 0..num_classes {
        let mut members: Vec<usize> = labels.iter().enumerate().filter(|(_, &l)| l == c).map(|(i, _)| i).collect();
        if members.is_empty() {
            return Err(Error::Config(format!("class {c} has no labeled samples at label fraction {fraction}")));
        }
        members.shuffle(&mut rng::stream(seed, rng::stream_id(&[0x57A7, c as u64])));
        let take = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len());
        out.extend_from_slice(&members[..take]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Deterministic split of `n` items into (train, validation) index lists.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, rng::stream_id(&[0x5B11])));
    let nv = ((val_fraction * n as f64).round() as usize).min(n);
    let mut val = idx[..nv].to_vec();
    let mut train = idx[nv..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Validate every this many steps.
    pub eval_every: u64,
    pub val_fraction: f64,
    pub label_fractions: Vec<f64>,
    pub probe_reg: f64,
    pub probe_loss: ProbeLoss,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 32,
            peak_lr: 1e-3,
            floor_lr: 1e-5,
            warmup_steps: 10,
            weight_decay: 0.05,
            grad_clip: 1.0,
            eval_every: 1,
            val_fraction: 0.2,
            label_fractions: vec![0.0005, 0.005, 0.02, 0.1, 1.0],
            probe_reg: 1e-3,
            probe_loss: ProbeLoss::Logistic,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("evalkit.batch_size and evalkit.eval_every must be positive".into()));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::Config("evalkit.warmup_steps exceeds evalkit.steps".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("evalkit.val_fraction {} not in (0, 1)", self.val_fraction)));
        }
        if let Some(f) = self.label_fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::Config(format!("evalkit.label_fractions entry {f} not in (0, 1]")));
        }
        if !(self.probe_reg >= 0.0) {
            return Err(Error::Config("evalkit.probe_reg must be non-negative".into()));
        }
        Ok(())
    }
}

/// A labeled jet ready for the model.
#[derive(Clone, Debug)]
pub struct LabeledInput {
    pub input: JetInput,
    pub label: usize,
}

/// Tokenizes labeled jets; unlabeled or untokenizable jets are an error.
pub fn prepare_labeled(jets: &[JetRecord], model: &Model) -> Result<Vec<LabeledInput>> {
    jets.par_iter()
        .enumerate()
        .map(|(i, j)| {
            let label = j.label.ok_or_else(|| Error::InvalidJet { jet: i, message: "jet has no label".into() })? as usize;
            if label >= model.cfg.num_classes {
                return Err(Error::InvalidJet {
                    jet: i,
                    message: format!("label {label} exceeds the head's {} classes", model.cfg.num_classes),
                });
            }
            Ok(LabeledInput { input: JetInput::prepare(j, &model.cfg.tokenizer)?, label })
        })
        .collect()
}

/// Pooled student embeddings of `inputs`, in order.
pub fn embed_inputs(model: &Model, inputs: &[&JetInput]) -> Result<Vec<Vec<f64>>> {
    inputs.par_iter().map(|i| pool_embeddings(&model.represent(i)?)).collect()
}

/// One row of the per-step validation curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValPoint {
    pub step: u64,
    pub val_loss: f64,
    pub val_acc: f64,
}

pub fn curve_csv(curve: &[ValPoint]) -> String {
    let mut s = format!("{VAL_CSV_HEADER}\n");
    for p in curve {
        writeln!(s, "{},{},{}", p.step, p.val_loss, p.val_acc).unwrap();
    }
    s
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub report: ProbeReport,
    pub curve: Vec<ValPoint>,
    pub model: Model,
}

/// First step at which `curve` reaches a validation loss at or below
/// `threshold`.
pub fn steps_to_reach(curve: &[ValPoint], threshold: f64) -> Option<u64> {
    curve.iter().find(|p| p.val_loss <= threshold).map(|p| p.step)
}

enum Features<'a> {
    Jets(&'a [LabeledInput]),
    Frozen(Vec<Tensor>),
}

/// Trains a class-attention head (and, unless frozen, the backbone) on a
/// stratified `label_fraction` of `train`, validating on `val`.
///
/// `pretrained` supplies the starting backbone for the frozen and
/// fine-tuned regimes; scratch ignores it and draws fresh weights.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    pretrained: &Model,
    train: &[LabeledInput],
    val: &[LabeledInput],
    regime: Regime,
    label_fraction: f64,
    cfg: &EvalConfig,
    seed: u64,
    config_hash: &str,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let k = pretrained.cfg.num_classes;
    let labels: Vec<usize> = train.iter().map(|l| l.label).collect();
    let subset = stratified_subsample(&labels, k, label_fraction, seed)?;
    let per_class_train = (0..k).map(|c| subset.iter().filter(|&&i| labels[i] == c).count()).collect();
    if val.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }

    let mut model = match regime {
        Regime::Scratch => Model::new(&pretrained.cfg, rng::stream_id(&[seed, 0x5C]))?,
        Regime::Frozen | Regime::FineTuned => {
            let mut m = pretrained.clone();
            m.reset_head(rng::stream_id(&[seed, 0x4EAD]))?;
            m
        }
        Regime::LinearProbe => return Err(Error::Config("use linear_probe for the linear-probe regime".into())),
    };
    let prefixes: Vec<&str> = match regime {
        Regime::Frozen => vec![HEAD_PREFIX],
        _ => BACKBONE_PREFIXES.iter().copied().chain([HEAD_PREFIX]).collect(),
    };
    let trainable = model.store.mask_by_prefix(&prefixes);
    let scalar_mask = model.store.scalar_mask(&trainable);
    let decay_tensors: Vec<bool> = model.store.entries().iter().zip(&trainable).map(|(e, &t)| t && e.name.ends_with(".weight")).collect();
    let decay = model.store.scalar_mask(&decay_tensors);
    let mut optim = AdamW::new(model.store.num_scalars(), cfg.weight_decay);

    let (train_feats, val_feats) = if regime == Regime::Frozen {
        let rep = |xs: &[LabeledInput]| -> Result<Vec<Tensor>> { xs.par_iter().map(|l| model.represent(&l.input)).collect() };
        let tr: Vec<LabeledInput> = subset.iter().map(|&i| train[i].clone()).collect();
        (Features::Frozen(rep(&tr)?), Features::Frozen(rep(val)?))
    } else {
        (Features::Jets(train), Features::Jets(val))
    };
    let train_labels: Vec<usize> = match &train_feats {
        Features::Frozen(_) => subset.iter().map(|&i| labels[i]).collect(),
        Features::Jets(_) => labels.clone(),
    };
    let val_labels: Vec<usize> = val.iter().map(|l| l.label).collect();

    // Per-sample (loss, gradient, logits) for item `i` of `feats`.
    let forward = |model: &Model, feats: &Features, i: usize, label: usize, grads: bool| -> Result<(f64, Option<Vec<f64>>, usize)> {
        let mut g = Graph::new(&model.store, Some(&trainable));
        let logits = match feats {
            Features::Jets(xs) => model.classify(&mut g, &xs[i].input)?,
            Features::Frozen(reps) => {
                let z = g.constant(reps[i].clone());
                model.head.forward(&mut g, z)?
            }
        };
        let pred = argmax(&g.value(logits).data);
        let loss = g.cross_entropy(logits, &[label])?;
        let grad = grads.then(|| g.param_gradients(loss));
        Ok((g.value(loss).item(), grad, pred))
    };

    let validate = |model: &Model| -> Result<(f64, f64)> {
        let out: Vec<(f64, Option<Vec<f64>>, usize)> =
            (0..val_labels.len()).into_par_iter().map(|i| forward(model, &val_feats, i, val_labels[i], false)).collect::<Result<_>>()?;
        let loss = out.iter().map(|o| o.0).sum::<f64>() / out.len() as f64;
        let preds: Vec<usize> = out.iter().map(|o| o.2).collect();
        Ok((loss, macro_accuracy(&preds, &val_labels)?))
    };

    // Positions into `train_feats` for the training subset.
    let pool: Vec<usize> = match &train_feats {
        Features::Frozen(_) => (0..subset.len()).collect(),
        Features::Jets(_) => subset.clone(),
    };
    let mut curve = Vec::new();
    let mut best = (f64::INFINITY, 0u64);
    let mut best_acc = 0.0;
    let mut best_preds: Option<Vec<f64>> = None;
    for step in 0..cfg.steps {
        let bs = cfg.batch_size.min(pool.len());
        let batch: Vec<usize> = batch_indices(pool.len(), bs, step, rng::stream_id(&[seed, 0xF1])).into_iter().map(|i| pool[i]).collect();
        let results: Vec<(f64, Option<Vec<f64>>, usize)> =
            batch.par_iter().map(|&i| forward(&model, &train_feats, i, train_labels[i], true)).collect::<Result<_>>()?;
        let mut grads = vec![0.0; model.store.num_scalars()];
        let mut loss = 0.0;
        for (l, g, _) in &results {
            loss += l;
            for (a, b) in grads.iter_mut().zip(g.as_ref().unwrap()) {
                *a += b;
            }
        }
        let inv = 1.0 / results.len() as f64;
        grads.iter_mut().for_each(|g| *g *= inv);
        if !(loss * inv).is_finite() {
            return Err(Error::Training(format!("non-finite fine-tuning loss at step {step}")));
        }
        clip_grad_norm(&mut grads, cfg.grad_clip);
        let lr = lr_at(step, cfg.steps, cfg.warmup_steps, cfg.peak_lr, cfg.floor_lr);
        optim.step(model.store.data_mut(), &grads, &scalar_mask, &decay, lr)?;

        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            let (vl, va) = validate(&model)?;
            curve.push(ValPoint { step: done, val_loss: vl, val_acc: va });
            if vl < best.0 {
                best = (vl, done);
            }
            if va > best_acc || best_preds.is_none() {
                best_acc = va;
                best_preds = Some(per_class_val(&model, &val_feats, &val_labels, &forward)?);
            }
        }
    }
    if curve.is_empty() {
        let (vl, va) = validate(&model)?;
        curve.push(ValPoint { step: 0, val_loss: vl, val_acc: va });
        best = (vl, 0);
        best_acc = va;
        best_preds = Some(per_class_val(&model, &val_feats, &val_labels, &forward)?);
    }
    let report = ProbeReport {
        regime,
        label_fraction,
        macro_accuracy: best_acc,
        per_class: best_preds.unwrap_or_default(),
        steps_to_best: best.1,
        best_val_loss: best.0,
        train_samples: subset.len(),
        per_class_train,
        seed,
        config_hash: config_hash.to_string(),
    };
    Ok(FinetuneOutcome { report, curve, model })
}

type ForwardFn<'a> = dyn Fn(&Model, &Features, usize, usize, bool) -> Result<(f64, Option<Vec<f64>>, usize)> + Sync + 'a;

fn per_class_val(model: &Model, feats: &Features, labels: &[usize], forward: &ForwardFn) -> Result<Vec<f64>> {
    let preds: Vec<usize> =
        (0..labels.len()).into_par_iter().map(|i| forward(model, feats, i, labels[i], false).map(|o| o.2)).collect::<Result<_>>()?;
    Ok(per_class_accuracy(&preds, labels, model.cfg.num_classes)?.into_iter().map(|a| a.unwrap_or(0.0)).collect())
}

/// Linear classifier on pooled embeddings of a stratified `label_fraction`
/// of the training embeddings.
#[allow(clippy::too_many_arguments)]
pub fn linear_probe(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    val_x: &[Vec<f64>],
    val_y: &[usize],
    num_classes: usize,
    cfg: &EvalConfig,
    label_fraction: f64,
    seed: u64,
    config_hash: &str,
) -> Result<ProbeReport> {
    let subset = stratified_subsample(train_y, num_classes, label_fraction, seed)?;
    let x: Vec<Vec<f64>> = subset.iter().map(|&i| train_x[i].clone()).collect();
    let y: Vec<usize> = subset.iter().map(|&i| train_y[i]).collect();
    let clf = fit_linear(&x, &y, num_classes, cfg.probe_reg, cfg.probe_loss)?;
    let preds: Vec<usize> = val_x.iter().map(|v| clf.predict(v)).collect();
    let per = per_class_accuracy(&preds, val_y, num_classes)?;
    Ok(ProbeReport {
        regime: Regime::LinearProbe,
        label_fraction,
        macro_accuracy: macro_accuracy(&preds, val_y)?,
        per_class: per.into_iter().map(|a| a.unwrap_or(0.0)).collect(),
        steps_to_best: 0,
        best_val_loss: 0.0,
        train_samples: y.len(),
        per_class_train: (0..num_classes).map(|c| y.iter().filter(|&&l| l == c).count()).collect(),
        seed,
        config_hash: config_hash.to_string(),
    })
}

/// Writes `jet_id,label,e_1..e_2d` rows of pooled student embeddings.
pub fn export_embeddings(jets: &[JetRecord], model: &Model, path: &Path) -> Result<usize> {
    let inputs: Vec<JetInput> =
        jets.par_iter().map(|j| JetInput::prepare(j, &model.cfg.tokenizer)).collect::<Result<_>>()?;
    let refs: Vec<&JetInput> = inputs.iter().collect();
    let emb = embed_inputs(model, &refs)?;
    let dim = emb.first().map_or(2 * model.cfg.encoder.dim, |e| e.len());
    let mut s = String::from("jet_id,label");
    for i in 1..=dim {
        write!(s, ",e_{i}").unwrap();
    }
    s.push('\n');
    for (i, (j, e)) in jets.iter().zip(&emb).enumerate() {
        write!(s, "{i},{}", j.label.map(|l| l.to_string()).unwrap_or_default()).unwrap();
        for v in e {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())?;
    Ok(jets.len())
}
