use jetjepa::autograd::Graph;
use jetjepa::backbone::{JetInput, TEACHER_PREFIX};
use jetjepa::checkpoint::Checkpoint;
use jetjepa::config::RunConfig;
use jetjepa::jepa::*;
use jetjepa::jetdata::gen_synthetic;
use jetjepa::masking::sample_masks;
use jetjepa::rng;

const DESK: &str = include_str!("../../../configs/desk.conf");

fn small_run() -> RunConfig {
    let mut run = RunConfig::default();
    run.train.model.encoder.depth = 1;
    run.train.batch_size = 6;
    run.train.steps = 8;
    run.train.warmup_steps = 2;
    run.train.seed = 5;
    run
}

fn inputs(run: &RunConfig, n: usize, seed: u64) -> Vec<JetInput> {
    gen_synthetic(n, &run.synth.spec, seed)
        .unwrap()
        .iter()
        .map(|j| JetInput::prepare(j, &run.train.model.tokenizer).unwrap())
        .collect()
}

fn teacher_values(state: &TrainState) -> Vec<f64> {
    let s = &state.model.store;
    s.entries().iter().filter(|e| e.name.starts_with(TEACHER_PREFIX)).flat_map(|e| s.data()[e.offset..e.offset + e.rows * e.cols].to_vec()).collect()
}

fn student_values(state: &TrainState) -> Vec<f64> {
    let s = &state.model.store;
    s.entries().iter().filter(|e| e.name.starts_with("student.")).flat_map(|e| s.data()[e.offset..e.offset + e.rows * e.cols].to_vec()).collect()
}

#[test]
fn identical_states_give_identical_metrics() {
    let run = small_run();
    let xs = inputs(&run, 12, 1);
    let batch: Vec<&JetInput> = xs.iter().take(6).collect();
    let mut a = TrainState::new(&run.train).unwrap();
    train_step(&mut a, &run.train, &batch).unwrap();
    let ck = a.to_checkpoint(&run.to_text());
    let mut b = TrainState::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), &run.train).unwrap();
    for _ in 0..3 {
        let ma = train_step(&mut a, &run.train, &batch).unwrap();
        let mb = train_step(&mut b, &run.train, &batch).unwrap();
        assert_eq!(ma, mb);
    }
    assert_eq!(a.model.store.data(), b.model.store.data());
}

#[test]
fn zero_learning_rate_keeps_student_and_forced_momentum_keeps_teacher() {
    let mut run = small_run();
    run.train.ema_momentum_start = 1.0;
    let xs = inputs(&run, 6, 2);
    let batch: Vec<&JetInput> = xs.iter().collect();
    let mut s = TrainState::new(&run.train).unwrap();
    let before = s.model.store.data().to_vec();
    let m = train_step(&mut s, &run.train, &batch).unwrap();
    assert_eq!(m.lr, 0.0);
    assert_eq!(m.momentum, 1.0);
    assert_eq!(s.model.store.data(), &before[..]);

    // A real step moves the student; momentum 1 still pins the teacher.
    let teacher = teacher_values(&s);
    let student = student_values(&s);
    train_step(&mut s, &run.train, &batch).unwrap();
    assert_ne!(student_values(&s), student);
    assert_eq!(teacher_values(&s), teacher);
}

#[test]
fn batch_order_does_not_change_loss() {
    let run = small_run();
    let xs = inputs(&run, 6, 3);
    let fwd: Vec<&JetInput> = xs.iter().collect();
    let rev: Vec<&JetInput> = xs.iter().rev().collect();
    let mut a = TrainState::new(&run.train).unwrap();
    let mut b = a.clone();
    for _ in 0..3 {
        let la = train_step(&mut a, &run.train, &fwd).unwrap().loss;
        let lb = train_step(&mut b, &run.train, &rev).unwrap().loss;
        assert!((la - lb).abs() <= 1e-6, "{la} vs {lb}");
    }
}

#[test]
fn no_gradient_reaches_the_teacher() {
    let run = small_run();
    let xs = inputs(&run, 10, 4);
    let mut state = TrainState::new(&run.train).unwrap();
    let batch: Vec<&JetInput> = xs.iter().take(6).collect();
    for _ in 0..3 {
        train_step(&mut state, &run.train, &batch).unwrap();
    }
    let store = &state.model.store;
    for (i, x) in xs.iter().enumerate() {
        let masks = sample_masks(&x.coords, &run.train.mask, &mut rng::stream(i as u64, 1)).unwrap();
        // Every parameter is tracked here, so only the graph structure can
        // keep gradient away from the teacher.
        let mut g = Graph::new(store, None);
        let (loss, _) = jet_objective(&mut g, &state.model, x, &masks, 1.0).unwrap();
        let grads = g.param_gradients(loss);
        for e in store.entries().iter().filter(|e| e.name.starts_with(TEACHER_PREFIX)) {
            assert!(grads[e.offset..e.offset + e.rows * e.cols].iter().all(|&v| v == 0.0), "{}", e.name);
        }
        assert!(grads.iter().any(|&v| v != 0.0));
    }
}

#[test]
fn teacher_is_replayable_from_student_snapshots() {
    let run = small_run();
    let xs = inputs(&run, 20, 5);
    let mut state = TrainState::new(&run.train).unwrap();
    let mut replay = teacher_values(&state);
    for step in 0..6 {
        let batch: Vec<&JetInput> = batch_indices(xs.len(), 6, step, 5).iter().map(|&i| &xs[i]).collect();
        let m = train_step(&mut state, &run.train, &batch).unwrap();
        ema_update(&mut replay, &student_values(&state), m.momentum).unwrap();
    }
    assert_eq!(replay, teacher_values(&state));
}

#[test]
fn fully_skipped_batch_is_an_error() {
    let mut run = small_run();
    run.train.model.tokenizer.min_centers = 1;
    run.train.model.tokenizer.center_ratio = 0.01;
    let xs = inputs(&run, 3, 6);
    assert!(xs.iter().all(|x| x.len() < 2));
    let mut state = TrainState::new(&run.train).unwrap();
    let batch: Vec<&JetInput> = xs.iter().collect();
    assert!(matches!(train_step(&mut state, &run.train, &batch), Err(jetjepa::Error::Training(_))));
}

#[test]
fn zero_steps_writes_the_initialization() {
    let mut run = small_run();
    run.train.steps = 0;
    run.train.warmup_steps = 0;
    let jets = gen_synthetic(10, &run.synth.spec, 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = pretrain(&run, &jets, &PretrainOptions { out_dir: dir.path().into(), resume: None }).unwrap();
    assert!(out.metrics.is_empty());
    let ck = Checkpoint::load(&out.checkpoint).unwrap();
    let init = TrainState::new(&run.train).unwrap();
    let mut store = init.model.store.clone();
    load_weights(&mut store, &ck).unwrap();
    assert_eq!(store.data(), init.model.store.data());
    assert_eq!(std::fs::read_to_string(out.loss_csv).unwrap().trim(), LOSS_CSV_HEADER);
}

#[test]
fn resume_continues_bit_exactly() {
    let mut run = small_run();
    run.train.checkpoint_every = 4;
    let jets = gen_synthetic(30, &run.synth.spec, 8).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let full = pretrain(&run, &jets, &PretrainOptions { out_dir: a.path().into(), resume: None }).unwrap();
    let resumed = pretrain(&run, &jets, &PretrainOptions { out_dir: b.path().into(), resume: Some(a.path().join("checkpoint-000004.jjck")) }).unwrap();
    assert_eq!(resumed.metrics[..], full.metrics[4..]);
    assert_eq!(std::fs::read(full.checkpoint).unwrap(), std::fs::read(resumed.checkpoint).unwrap());

    // Resuming into the original directory rewrites the same csv.
    let csv = std::fs::read(a.path().join(LOSS_CSV)).unwrap();
    pretrain(&run, &jets, &PretrainOptions { out_dir: a.path().into(), resume: Some(a.path().join("checkpoint-000004.jjck")) }).unwrap();
    assert_eq!(std::fs::read(a.path().join(LOSS_CSV)).unwrap(), csv);
}

#[test]
fn exploding_learning_rate_aborts_with_a_batch_dump() {
    let mut run = small_run();
    run.train.peak_lr = 1e300;
    run.train.floor_lr = 1e300;
    run.train.warmup_steps = 0;
    run.train.steps = 20;
    let jets = gen_synthetic(30, &run.synth.spec, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = pretrain(&run, &jets, &PretrainOptions { out_dir: dir.path().into(), resume: None }).unwrap_err();
    assert!(matches!(err, jetjepa::Error::Training(_)), "{err}");
    let dumps: Vec<_> = std::fs::read_dir(dir.path()).unwrap().filter_map(|e| e.ok()).filter(|e| e.file_name().to_string_lossy().starts_with("failed-batch-")).collect();
    assert_eq!(dumps.len(), 1);
    assert!(std::fs::read_to_string(dumps[0].path()).unwrap().contains("jet indices"));
}

fn window_mean(losses: &[f64], first: bool, n: usize) -> f64 {
    let w = if first { &losses[..n] } else { &losses[losses.len() - n..] };
    w.iter().sum::<f64>() / n as f64
}

#[test]
fn two_hundred_steps_halve_the_loss() {
    let mut run = RunConfig::default();
    run.train.model.encoder.depth = 2;
    run.train.steps = 200;
    run.train.warmup_steps = 20;
    run.train.seed = 1;
    let jets = gen_synthetic(512, &run.synth.spec, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = pretrain(&run, &jets, &PretrainOptions { out_dir: dir.path().into(), resume: None }).unwrap();
    let losses: Vec<f64> = out.metrics.iter().map(|m| m.loss).collect();
    let (first, last) = (window_mean(&losses, true, 20), window_mean(&losses, false, 20));
    assert!(last < 0.5 * first, "first {first} last {last}");
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn desk_preset_loss_trends_down() {
    let run = RunConfig::from_text(DESK).unwrap();
    let jets = gen_synthetic(run.synth.jets, &run.synth.spec, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = pretrain(&run, &jets, &PretrainOptions { out_dir: dir.path().into(), resume: None }).unwrap();
    let losses: Vec<f64> = out.metrics.iter().map(|m| m.loss).collect();
    let smoothed: Vec<f64> = losses.windows(50).map(|w| w.iter().sum::<f64>() / 50.0).collect();
    let steps: Vec<f64> = (0..smoothed.len()).map(|i| i as f64).collect();
    let rho = pearson(&ranks(&steps), &ranks(&smoothed));
    assert!(rho < -0.8, "spearman {rho}");

    let tail = &out.metrics[out.metrics.len() * 9 / 10..];
    let std = tail.iter().map(|m| m.teacher_std).sum::<f64>() / tail.len() as f64;
    assert!(std > 1e-3, "teacher std {std}");
}
