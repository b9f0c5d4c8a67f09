//! `jetjepa` command-line entry point.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use jetjepa::backbone::{analytic_param_count, Model};
use jetjepa::checkpoint::Checkpoint;
use jetjepa::config::RunConfig;
use jetjepa::evalkit::{
    curve_csv, embed_inputs, export_embeddings, finetune, linear_probe, prepare_labeled, split_indices, stratified_subsample,
    LabeledInput, Regime,
};
use jetjepa::jepa::{load_weights, pretrain, PretrainOptions};
use jetjepa::jetdata::{gen_synthetic, load_dataset, write_dataset, DataFormat, JetRecord};
use jetjepa::plot::{load_series, render_svg};

const THREADS_ENV: &str = "JETJEPA_THREADS";
const CI_ENV: &str = "JETJEPA_CI";

#[derive(Parser)]
#[command(name = "jetjepa", version, about = "Latent-prediction pre-training and evaluation for particle jets")]
struct Cli {
    /// Configuration file (`[section]` headers with `key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set jepa.steps=200` (repeatable).
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for every random stream (required when JETJEPA_CI is set).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic prong-jet dataset.
    GenSynth {
        #[arg(long)]
        jets: Option<usize>,
        /// Comma-separated prong count per class, e.g. 1,2,3.
        #[arg(long)]
        classes: Option<String>,
        /// Output file; `.csv` selects csv, anything else binary.
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-supervised pre-training.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Total number of optimization steps (overrides jepa.steps).
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Linear probe on pooled embeddings.
    Probe(EvalArgs),
    /// Train a classification head (scratch, frozen or fine-tuned).
    Finetune {
        #[command(flatten)]
        eval: EvalArgs,
        /// scratch, frozen or fine-tuned.
        #[arg(long, default_value = "fine-tuned")]
        regime: String,
    },
    /// Export pooled embeddings as csv.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a checkpoint.
    Inspect { checkpoint: PathBuf },
    /// Render step-indexed csv files as an SVG line chart.
    Plot {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Value column (default: the second column).
        #[arg(long)]
        column: Option<String>,
        #[arg(long, default_value = "")]
        title: String,
    },
}

#[derive(Args)]
struct EvalArgs {
    /// Pre-trained checkpoint (optional for the scratch regime).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    label_fraction: f64,
    /// Run every fraction in evalkit.label_fractions.
    #[arg(long)]
    sweep: bool,
}

/// Stable error category printed as `error[<kind>]:`.
fn kind(err: &anyhow::Error) -> &'static str {
    use jetjepa::Error as E;
    match err.downcast_ref::<E>() {
        Some(E::Config(_)) => "config",
        Some(E::Io { .. }) => "io",
        Some(E::Checkpoint { .. }) => "checkpoint",
        Some(E::Parse { .. } | E::InvalidJet { .. } | E::EmptyJet | E::NonPhysical { .. }) => "data",
        Some(E::Training(_)) => "training",
        Some(_) => "internal",
        None => "usage",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e:#}", kind(&e));
            ExitCode::FAILURE
        }
    }
}

fn init_threads() -> Result<()> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| anyhow!("{THREADS_ENV} must be a positive integer, got {v:?}"))?,
        Err(_) => num_cpus::get_physical(),
    };
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("starting worker threads")?;
    Ok(())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    if std::env::var_os(CI_ENV).is_some() && cli.seed.is_none() {
        bail!("--seed is required when {CI_ENV} is set");
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::GenSynth { jets, classes, out } => {
            if let Some(n) = jets {
                if n == 0 {
                    bail!("invalid --jets value 0: must be positive");
                }
                cfg.synth.jets = n;
            }
            if let Some(c) = classes {
                let prongs: Vec<usize> = c
                    .split(',')
                    .map(|v| v.trim().parse::<usize>().ok().filter(|&p| p > 0))
                    .collect::<Option<_>>()
                    .ok_or_else(|| anyhow!("invalid --classes value {c:?}: expected comma-separated positive prong counts"))?;
                cfg.synth.spec.prongs = prongs;
                cfg.synth.spec.validate().map_err(|e| anyhow!("invalid --classes value {c:?}: {e}"))?;
            }
            let data = gen_synthetic(cfg.synth.jets, &cfg.synth.spec, cfg.seed())?;
            write_dataset(&data, &out, DataFormat::from_path(&out))?;
            println!("wrote {} jets ({} classes) to {}", data.len(), cfg.synth.spec.prongs.len(), out.display());
        }
        Command::Pretrain { data, out, steps, resume } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
                cfg.train.warmup_steps = cfg.train.warmup_steps.min(s);
            }
            cfg.validate()?;
            let jets = read_jets(&data)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            std::fs::write(out.join("config.txt"), cfg.to_text()).with_context(|| format!("writing config to {}", out.display()))?;
            let res = pretrain(&cfg, &jets, &PretrainOptions { out_dir: out.clone(), resume })?;
            let last = res.metrics.last();
            println!(
                "pretrained to step {} ({} steps this run), final loss {}, checkpoint {}, config hash {}",
                res.state.step,
                res.metrics.len(),
                last.map_or("n/a".to_string(), |m| m.loss.to_string()),
                res.checkpoint.display(),
                cfg.hash()
            );
            if res.state.jets_skipped > 0 {
                println!("skipped {} jets with fewer than 2 tokens or an empty context", res.state.jets_skipped);
            }
        }
        Command::Probe(args) => cmd_probe(&cfg, &args)?,
        Command::Finetune { eval, regime } => {
            let regime: Regime = regime.parse().map_err(|e| anyhow!("invalid --regime: {e}"))?;
            if regime == Regime::LinearProbe {
                bail!("invalid --regime linear-probe: use the probe subcommand");
            }
            cmd_finetune(&cfg, &eval, regime)?;
        }
        Command::Embed { checkpoint, data, out } => {
            let (model, _) = load_model(&checkpoint)?;
            let jets = read_jets(&data)?;
            let n = export_embeddings(&jets, &model, &out)?;
            println!("wrote {n} embeddings of width {} to {}", 2 * model.cfg.encoder.dim, out.display());
        }
        Command::Inspect { checkpoint } => cmd_inspect(&checkpoint)?,
        Command::Plot { csv, out, column, title } => {
            let files = csv
                .iter()
                .map(|p| {
                    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
                    Ok((name, text))
                })
                .collect::<Result<Vec<_>>>()?;
            let series = load_series(&files, column.as_deref())?;
            let header = jetjepa::plot::csv_header(&files[0].1);
            let y = column.unwrap_or_else(|| header.get(1).cloned().unwrap_or_default());
            let svg = render_svg(&series, &title, &header[0], &y)?;
            std::fs::write(&out, svg).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} series to {}", series.len(), out.display());
        }
    }
    Ok(())
}

/// Model structure and weights from a checkpoint, with the run
/// configuration stored in its header.
fn load_model(path: &Path) -> Result<(Model, RunConfig)> {
    let ck = Checkpoint::load(path)?;
    let run = RunConfig::from_text(&ck.config)?;
    let mut model = Model::new(run.model(), run.seed())?;
    load_weights(&mut model.store, &ck)?;
    Ok((model, run))
}

fn read_jets(path: &Path) -> Result<Vec<JetRecord>> {
    Ok(load_dataset(path, DataFormat::from_path(path))?)
}

fn fractions(cfg: &RunConfig, args: &EvalArgs) -> Vec<f64> {
    if args.sweep {
        cfg.eval.label_fractions.clone()
    } else {
        vec![args.label_fraction]
    }
}

struct Split {
    train: Vec<LabeledInput>,
    val: Vec<LabeledInput>,
}

fn split(jets: &[JetRecord], model: &Model, cfg: &RunConfig) -> Result<Split> {
    let labeled = prepare_labeled(jets, model)?;
    let (tr, va) = split_indices(labeled.len(), cfg.eval.val_fraction, cfg.seed());
    Ok(Split { train: tr.iter().map(|&i| labeled[i].clone()).collect(), val: va.iter().map(|&i| labeled[i].clone()).collect() })
}

fn log_counts(train: &[LabeledInput], k: usize, fraction: f64, seed: u64) -> Result<()> {
    let labels: Vec<usize> = train.iter().map(|l| l.label).collect();
    let idx = stratified_subsample(&labels, k, fraction, seed)?;
    let counts: Vec<String> = (0..k).map(|c| format!("class {c}: {}", idx.iter().filter(|&&i| labels[i] == c).count())).collect();
    println!("label fraction {fraction}: stratified counts {}", counts.join(", "));
    Ok(())
}

fn cmd_probe(cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    let ckpt = args.checkpoint.as_ref().ok_or_else(|| anyhow!("probe requires --checkpoint"))?;
    let (model, _) = load_model(ckpt)?;
    let jets = read_jets(&args.data)?;
    let s = split(&jets, &model, cfg)?;
    let k = model.cfg.num_classes;
    let embed = |xs: &[LabeledInput]| embed_inputs(&model, &xs.iter().map(|l| &l.input).collect::<Vec<_>>());
    let (tx, vx) = (embed(&s.train)?, embed(&s.val)?);
    let ty: Vec<usize> = s.train.iter().map(|l| l.label).collect();
    let vy: Vec<usize> = s.val.iter().map(|l| l.label).collect();
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    for f in fractions(cfg, args) {
        log_counts(&s.train, k, f, cfg.seed())?;
        let report = linear_probe(&tx, &ty, &vx, &vy, k, &cfg.eval, f, cfg.seed(), &cfg.hash())?;
        let path = args.out.join(format!("probe-{f}.txt"));
        report.save(&path)?;
        println!("linear probe at fraction {f}: macro accuracy {} ({})", report.macro_accuracy, path.display());
    }
    Ok(())
}

fn cmd_finetune(cfg: &RunConfig, args: &EvalArgs, regime: Regime) -> Result<()> {
    let model = match (&args.checkpoint, regime) {
        (Some(p), _) => load_model(p)?.0,
        (None, Regime::Scratch) => Model::new(cfg.model(), cfg.seed())?,
        (None, _) => bail!("--regime {regime} requires --checkpoint"),
    };
    let jets = read_jets(&args.data)?;
    let s = split(&jets, &model, cfg)?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    for f in fractions(cfg, args) {
        log_counts(&s.train, model.cfg.num_classes, f, cfg.seed())?;
        let out = finetune(&model, &s.train, &s.val, regime, f, &cfg.eval, cfg.seed(), &cfg.hash())?;
        let report = args.out.join(format!("report-{regime}-{f}.txt"));
        out.report.save(&report)?;
        let curve = args.out.join(format!("val-{regime}-{f}.csv"));
        std::fs::write(&curve, curve_csv(&out.curve)).with_context(|| format!("writing {}", curve.display()))?;
        println!(
            "{regime} at fraction {f}: macro accuracy {}, best validation loss {} at step {} ({})",
            out.report.macro_accuracy,
            out.report.best_val_loss,
            out.report.steps_to_best,
            report.display()
        );
    }
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<()> {
    let ck = Checkpoint::load(path)?;
    let run = RunConfig::from_text(&ck.config)?;
    let model = Model::new(run.model(), run.seed())?;
    let is_model = |name: &str| model.store.id(name).is_some();
    let params: usize = ck.tensors.iter().filter(|t| is_model(&t.name)).map(|t| t.data.len()).sum();
    let tensors = ck.tensors.iter().filter(|t| is_model(&t.name)).count();
    println!("checkpoint: {}", path.display());
    println!("step: {}", ck.step);
    println!("config hash: {}", run.hash());
    println!("parameter tensors: {tensors}");
    println!("parameters: {params}");
    println!("analytic parameter count: {}", analytic_param_count(run.model()));
    println!("encoder: depth {} dim {} heads {} registers {}", run.model().encoder.depth, run.model().encoder.dim, run.model().encoder.heads, run.model().encoder.registers);
    println!("state tensors: {}", ck.tensors.len() - tensors);
    Ok(())
}
