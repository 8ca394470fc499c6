use protoau::config::TrainConfig;
use protoau::data::{DatasetSplit, EpochSampler, Interaction, InteractionGraph};
use protoau::objectives::{LossWeights, Mode};
use protoau::optim::{
    freeze, loss_and_gradients, train_step, AdamConfig, AdamState, Gradients, ModelState, StepConfig, TrainContext,
};
use protoau::propagation::{make_view, Augmentation};
use protoau::trainer::{fit, Dataset, EpochRecord, RunLock, RunLog, BEST_CHECKPOINT, LAST_CHECKPOINT, RUN_LOG};

/// Two disjoint 10 × 10 blocks, every user linked to 7 items of its block.
fn blocked() -> Dataset {
    let mut all = Vec::new();
    for block in 0..2 {
        for u in 0..10 {
            for j in 0..7 {
                all.push(Interaction::new(block * 10 + u, block * 10 + (u + j) % 10));
            }
        }
    }
    let graph = InteractionGraph::from_indexed(20, 20, all.clone()).unwrap();
    let (mut train, mut valid) = (Vec::new(), Vec::new());
    for (n, it) in all.into_iter().enumerate() {
        if n % 7 == 3 {
            valid.push(it)
        } else {
            train.push(it)
        }
    }
    Dataset::from_split(graph, DatasetSplit { train, valid, test: Vec::new(), seed: 0 }).unwrap()
}

fn small_config(mode: Mode) -> TrainConfig {
    TrainConfig {
        dim: 8,
        k: 6,
        batch_size: 16,
        lr: 0.01,
        mode,
        eval_ks: vec![5, 20],
        early_stop_k: 5,
        max_epochs: 3,
        ..TrainConfig::default()
    }
}

fn run_steps(data: &Dataset, cfg: &TrainConfig, steps: usize) -> (ModelState<f32>, Vec<f64>) {
    let mut params = ModelState::<f32>::init(20, 20, cfg.dim, cfg.k, cfg.init_std, cfg.rng_seed).unwrap();
    let mut opt = AdamState::new(&params, cfg.adam());
    let ctx = TrainContext { train: &data.split.train, adjacency: &data.adjacency, seed: cfg.rng_seed };
    let step = cfg.step_config();
    let mut bpr = Vec::new();
    let mut epoch = 0;
    while bpr.len() < steps {
        epoch += 1;
        let s = EpochSampler::new(&data.split.train, &data.index, cfg.batch_size, cfg.rng_seed, epoch).unwrap();
        for b in s.batches().take(steps - bpr.len()) {
            bpr.push(train_step(&mut params, &mut opt, &b, &ctx, &step).unwrap().bpr);
            let norms_ok = [&params.user_bank, &params.item_bank]
                .iter()
                .all(|bank| bank.matrix().rows().into_iter().all(|r| (r.dot(&r).sqrt() - 1.0).abs() < 1e-6));
            assert!(norms_ok, "banks left the unit sphere");
        }
    }
    (params, bpr)
}

#[test]
fn backbone_loss_falls_on_blocked_graph() {
    let data = blocked();
    let cfg = TrainConfig { batch_size: 32, ..small_config(Mode::BackboneOnly) };
    let (_, bpr) = run_steps(&data, &cfg, 50);
    let first: f64 = bpr[..4].iter().sum();
    let last: f64 = bpr[46..].iter().sum();
    assert!(last < first, "first {first}, last {last}");
}

#[test]
fn zero_weights_collapse_to_backbone_bitwise() {
    let data = blocked();
    let backbone = run_steps(&data, &small_config(Mode::BackboneOnly), 20).0;
    let zeroed = TrainConfig { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, ..small_config(Mode::Full) };
    let full = run_steps(&data, &zeroed, 20).0;
    assert_eq!(backbone, full);
    let on = run_steps(&data, &small_config(Mode::Full), 20).0;
    assert_ne!(backbone.embeddings, on.embeddings);
}

#[test]
fn every_mode_stays_finite() {
    let data = blocked();
    for mode in Mode::ALL {
        let (params, bpr) = run_steps(&data, &small_config(mode), 100);
        assert!(bpr.iter().all(|v| v.is_finite()), "{mode}");
        assert!(params.embeddings.matrix().iter().all(|v| v.is_finite()), "{mode}");
    }
}

#[test]
fn steps_do_not_depend_on_thread_count() {
    let data = blocked();
    let cfg = small_config(Mode::Full);
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_steps(&data, &cfg, 10))
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn total_gradient_is_weighted_sum_of_parts() {
    let data = blocked();
    let params = ModelState::<f64>::init(20, 20, 6, 4, 0.1, 5).unwrap();
    let s = EpochSampler::new(&data.split.train, &data.index, 12, 1, 1).unwrap();
    let batch = s.batch(0);
    let view = |seed| make_view(&data.split.train, 20, 20, 0.1, seed, Augmentation::EdgeDropout).unwrap().adjacency;
    let (vt, vs) = (view(1), view(2));
    let views = Some((&vt, &vs));
    let grads = |w: LossWeights, mode: Mode| -> Gradients<f64> {
        let cfg = StepConfig { weights: w, mode, ..StepConfig::default() };
        let fz = freeze(&params, &batch, views, &cfg).unwrap();
        loss_and_gradients(&params, &batch, &data.adjacency, views, &fz, &cfg).unwrap().1
    };
    let w = LossWeights { lambda1: 0.7, lambda2: 0.3, lambda3: 1.3 };
    let total = grads(w, Mode::Full);
    let none = grads(LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0 }, Mode::Full);
    let only = |l1, l2, l3| grads(LossWeights { lambda1: l1, lambda2: l2, lambda3: l3 }, Mode::Full);
    let parts = [only(w.lambda1, 0.0, 0.0), only(0.0, w.lambda2, 0.0), only(0.0, 0.0, w.lambda3)];
    let mut e = none.embeddings.clone();
    let mut ub = ndarray::Array2::<f64>::zeros(params.user_bank.matrix().raw_dim());
    for p in &parts {
        e += &(&p.embeddings - &none.embeddings);
        if let Some(g) = &p.user_bank {
            ub += g;
        }
    }
    let close = |a: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>| (a - b).iter().all(|v| v.abs() < 1e-12);
    assert!(close(&e, &total.embeddings));
    assert!(close(&ub, total.user_bank.as_ref().unwrap()));
    assert!(none.user_bank.is_none());
}

fn strip_time(log: &RunLog) -> Vec<EpochRecord> {
    log.records()
        .iter()
        .cloned()
        .map(|mut r| {
            r.wall_time = 0.0;
            r.valid.wall_time = 0.0;
            r
        })
        .collect()
}

#[test]
fn fit_is_reproducible_and_logs_every_epoch() {
    let data = blocked();
    let cfg = small_config(Mode::Full);
    let a = fit(&cfg, &data, None, false).unwrap();
    let b = fit(&cfg, &data, None, false).unwrap();
    assert_eq!(strip_time(&a.log), strip_time(&b.log));
    assert_eq!(a.best, b.best);
    let epochs: Vec<usize> = a.log.records().iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, vec![1, 2, 3]);
}

#[test]
fn zero_epochs_writes_initial_checkpoint_only() {
    let data = blocked();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { max_epochs: 0, ..small_config(Mode::Full) };
    let out = fit(&cfg, &data, Some(dir.path()), false).unwrap();
    assert_eq!(out.epochs_run, 0);
    assert!(dir.path().join(BEST_CHECKPOINT).exists() && dir.path().join(LAST_CHECKPOINT).exists());
    assert!(RunLog::read(&dir.path().join(RUN_LOG)).unwrap().records().is_empty());
    let ck = protoau::checkpoint::load_checkpoint(&dir.path().join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(ck.opt.step, 0);
    assert_eq!(ck.params, out.best);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = blocked();
    let full_dir = tempfile::tempdir().unwrap();
    let cfg4 = TrainConfig { max_epochs: 4, patience: 100, ..small_config(Mode::Full) };
    let whole = fit(&cfg4, &data, Some(full_dir.path()), false).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let cfg2 = TrainConfig { max_epochs: 2, ..cfg4.clone() };
    fit(&cfg2, &data, Some(dir.path()), false).unwrap();
    let resumed = fit(&cfg4, &data, Some(dir.path()), true).unwrap();
    assert_eq!(resumed.epochs_run, 2);
    assert_eq!(resumed.last, whole.last);
    let on_disk = RunLog::read(&dir.path().join(RUN_LOG)).unwrap();
    assert_eq!(strip_time(&on_disk), strip_time(&whole.log));
}

#[test]
fn run_directory_is_exclusive() {
    let dir = tempfile::tempdir().unwrap();
    let _held = RunLock::acquire(dir.path()).unwrap();
    let err = fit(&small_config(Mode::BackboneOnly), &blocked(), Some(dir.path()), false).unwrap_err();
    assert!(matches!(err, protoau::Error::Locked(_)));
}

#[test]
fn run_log_lines_round_trip() {
    let out = fit(&TrainConfig { max_epochs: 2, ..small_config(Mode::WoProto) }, &blocked(), None, false).unwrap();
    for r in out.log.records() {
        assert_eq!(&EpochRecord::parse(&r.emit()).unwrap(), r);
    }
    assert!(out.log.records()[0].loss.unwrap().infonce.is_some());
}

#[test]
fn invalid_config_is_rejected_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = TrainConfig { lr: -1.0, k: 0, ..small_config(Mode::Full) };
    let err = fit(&cfg, &blocked(), Some(&run), false).unwrap_err();
    assert_eq!(err.class(), protoau::error::ErrorClass::Config);
    assert!(!run.exists());
}

#[test]
fn adam_defaults() {
    let c = AdamConfig::default();
    assert_eq!((c.beta1, c.beta2, c.eps), (0.9, 0.999, 1e-8));
}
