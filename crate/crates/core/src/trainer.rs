//! Epoch loop, early stopping, run directories, and the mode ablation.

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use crate::config::TrainConfig;
use crate::data::{
    build_adjacency, build_split, read_cache, DatasetSplit, EpochSampler, InteractionGraph, Manifest,
    NormalizedAdjacency, UserItemIndex, CACHE_FILE, MANIFEST_FILE,
};
use crate::eval::{eval_record, split_targets, EvalRecord, EvalSplit, EvalTargets, RankingMetrics};
use crate::objectives::{mean_report, LossReport, Mode};
use crate::optim::{train_step, AdamState, ModelState, TrainContext};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const RUN_LOG: &str = "runlog.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
const LOCK_FILE: &str = "train.lock";

/// A split interaction graph ready for training.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub graph: InteractionGraph,
    pub split: DatasetSplit,
    pub adjacency: NormalizedAdjacency,
    pub index: UserItemIndex,
}

impl Dataset {
    pub fn from_graph(graph: InteractionGraph, split_seed: u64) -> Result<Self> {
        let split = build_split(&graph, split_seed);
        Self::from_split(graph, split)
    }

    pub fn from_split(graph: InteractionGraph, split: DatasetSplit) -> Result<Self> {
        let (nu, ni) = (graph.num_users(), graph.num_items());
        let adjacency = build_adjacency(&split.train, nu, ni)?;
        let index = UserItemIndex::new(&split.train, nu, ni);
        Ok(Self { graph, split, adjacency, index })
    }

    /// Reads the cache written by ingestion.
    pub fn load(dir: &Path, split_seed: u64) -> Result<Self> {
        let graph = read_cache(&dir.join(CACHE_FILE))?;
        Self::from_graph(graph, split_seed)
    }

    pub fn num_users(&self) -> usize {
        self.graph.num_users()
    }

    pub fn num_items(&self) -> usize {
        self.graph.num_items()
    }

    pub fn targets(&self, which: EvalSplit, exclude_valid_on_test: bool) -> EvalTargets {
        split_targets(self.num_users(), &self.split, which, exclude_valid_on_test)
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let p = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
    serde_json::from_str(&text).map_err(|e| crate::data::DataError::CorruptCache(format!("{}: {e}", p.display())).into())
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mode: Mode,
    pub loss: Option<LossReport>,
    pub valid: EvalRecord,
    pub best: bool,
    pub wall_time: f64,
}

impl EpochRecord {
    pub fn emit(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }

    pub fn parse(line: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}

/// Append-only per-epoch history.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    records: Vec<EpochRecord>,
}

impl RunLog {
    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn push(&mut self, r: EpochRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.epoch <= last.epoch {
                return Err(crate::optim::OptimError::Invalid(format!(
                    "run log epochs must increase: {} after {}",
                    r.epoch, last.epoch
                ))
                .into());
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let mut log = RunLog::default();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = EpochRecord::parse(&line).map_err(|e| crate::data::DataError::Malformed {
                path: path.to_path_buf(),
                line: n as u64 + 1,
                reason: e.to_string(),
            })?;
            log.push(rec)?;
        }
        Ok(log)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for r in &self.records {
            text.push_str(&r.emit());
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn valid_metric(&self, k: usize) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.valid.metrics.get(&k).map(|m| m.recall)).collect()
    }
}

/// Exclusive claim on a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.display().to_string())),
            Err(e) => Err(Error::io(format!("creating {}", path.display()), e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub best: ModelState<f32>,
    pub last: ModelState<f32>,
    pub best_epoch: Option<usize>,
    pub best_valid: Option<f64>,
    pub epochs_run: usize,
    pub log: RunLog,
}

struct Progress {
    epoch: usize,
    best_epoch: Option<usize>,
    best_metric: Option<f64>,
    bad_epochs: usize,
}

fn meta(config: &TrainConfig, p: &Progress, step: u64) -> CheckpointMeta {
    CheckpointMeta {
        config: config.clone(),
        rng_seed: config.rng_seed,
        split_seed: config.split_seed,
        epoch: p.epoch,
        step,
        best_epoch: p.best_epoch,
        best_metric: p.best_metric,
        bad_epochs: p.bad_epochs,
    }
}

/// Trains with per-epoch validation and early stopping. With `run_dir`, the
/// directory is locked, checkpoints and the run log are written there, and
/// `resume` continues from `last.ckpt` when present.
pub fn fit(config: &TrainConfig, data: &Dataset, run_dir: Option<&Path>, resume: bool) -> Result<FitOutcome> {
    config.validate()?;
    let _lock = match run_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
            Some(RunLock::acquire(d)?)
        }
        None => None,
    };
    let step_cfg = config.step_config();
    let (nu, ni) = (data.num_users(), data.num_items());
    let valid_targets = data.targets(EvalSplit::Valid, config.exclude_valid_on_test);

    let mut log = RunLog::default();
    let mut progress = Progress { epoch: 0, best_epoch: None, best_metric: None, bad_epochs: 0 };
    let resumed = match run_dir.map(|d| d.join(LAST_CHECKPOINT)) {
        Some(p) if resume && p.exists() => Some(load_checkpoint(&p)?),
        _ => None,
    };
    let (mut params, mut opt, mut best) = match resumed {
        Some(ck) => {
            let dir = run_dir.expect("resume implies run dir");
            progress = Progress {
                epoch: ck.meta.epoch,
                best_epoch: ck.meta.best_epoch,
                best_metric: ck.meta.best_metric,
                bad_epochs: ck.meta.bad_epochs,
            };
            let log_path = dir.join(RUN_LOG);
            if log_path.exists() {
                for r in RunLog::read(&log_path)?.records {
                    if r.epoch <= progress.epoch {
                        log.push(r)?;
                    }
                }
            }
            let best = match load_checkpoint(&dir.join(BEST_CHECKPOINT)) {
                Ok(b) => b.params,
                Err(_) => ck.params.clone(),
            };
            (ck.params, ck.opt, best)
        }
        None => {
            let p = ModelState::<f32>::init(nu, ni, config.dim, config.k, config.init_std, config.rng_seed)?;
            let o = AdamState::new(&p, config.adam());
            (p.clone(), o, p)
        }
    };
    if let Some(d) = run_dir {
        std::fs::write(d.join(CONFIG_FILE), config.to_toml()).map_err(|e| Error::io("writing config", e))?;
        if progress.epoch == 0 && log.records().is_empty() {
            let ck = Checkpoint { params: params.clone(), opt: opt.clone(), meta: meta(config, &progress, opt.step) };
            save_checkpoint(&d.join(LAST_CHECKPOINT), &ck)?;
            save_checkpoint(&d.join(BEST_CHECKPOINT), &ck)?;
            log.write(&d.join(RUN_LOG))?;
        }
    }

    let ctx = TrainContext { train: &data.split.train, adjacency: &data.adjacency, seed: config.rng_seed };
    let mut epochs_run = 0;
    while progress.epoch < config.max_epochs && progress.bad_epochs < config.patience.max(1) {
        let t0 = Instant::now();
        let epoch = progress.epoch + 1;
        let sampler = EpochSampler::new(&data.split.train, &data.index, config.batch_size, config.rng_seed, epoch as u64)?;
        let n_batches = match config.max_batches_per_epoch {
            0 => sampler.num_batches(),
            m => m.min(sampler.num_batches()),
        };
        let mut reports = Vec::with_capacity(n_batches);
        for b in 0..n_batches {
            let batch = sampler.batch(b);
            reports.push(train_step(&mut params, &mut opt, &batch, &ctx, &step_cfg)?);
        }
        let (rec, metrics) =
            eval_record(&params, &data.adjacency, config.layers, &valid_targets, &config.eval_ks, epoch, EvalSplit::Valid)?;
        let score = metrics.recall(config.early_stop_k).unwrap_or(0.0);
        let improved = progress.best_metric.is_none_or(|b| score > b);
        progress.epoch = epoch;
        if improved {
            progress.best_metric = Some(score);
            progress.best_epoch = Some(epoch);
            progress.bad_epochs = 0;
            best = params.clone();
        } else {
            progress.bad_epochs += 1;
        }
        let loss = mean_report(&reports);
        log::info!(
            "epoch {epoch}: loss {:.4} valid recall@{} {:.4}{}",
            loss.map_or(f64::NAN, |l| l.total),
            config.early_stop_k,
            score,
            if improved { " *" } else { "" }
        );
        let record = EpochRecord {
            epoch,
            mode: config.mode,
            loss,
            valid: rec,
            best: improved,
            wall_time: t0.elapsed().as_secs_f64(),
        };
        if let Some(d) = run_dir {
            let mut f = OpenOptions::new()
                .append(true)
                .create(true)
                .open(d.join(RUN_LOG))
                .map_err(|e| Error::io("opening run log", e))?;
            writeln!(f, "{}", record.emit()).map_err(|e| Error::io("appending run log", e))?;
            let ck = Checkpoint { params: params.clone(), opt: opt.clone(), meta: meta(config, &progress, opt.step) };
            save_checkpoint(&d.join(LAST_CHECKPOINT), &ck)?;
            if improved {
                save_checkpoint(&d.join(BEST_CHECKPOINT), &ck)?;
            }
        }
        log.push(record)?;
        epochs_run += 1;
    }
    Ok(FitOutcome {
        best,
        last: params,
        best_epoch: progress.best_epoch,
        best_valid: progress.best_metric,
        epochs_run,
        log,
    })
}

/// Test metrics of `params`.
pub fn test_metrics(config: &TrainConfig, data: &Dataset, params: &ModelState<f32>) -> Result<RankingMetrics> {
    let t = data.targets(EvalSplit::Test, config.exclude_valid_on_test);
    Ok(crate::eval::evaluate_split(params, &data.adjacency, config.layers, &t, &config.eval_ks)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: Mode,
    pub best_epoch: Option<usize>,
    pub valid_recall: f64,
    pub test: RankingMetrics,
    pub recall: f64,
    /// Relative change of test recall against the backbone row, in percent.
    pub improvement_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub k: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, mode: Mode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn render(&self) -> String {
        let mut s = format!("{:<15} {:>10} {:>10}\n", "model", format!("Recall@{}", self.k), "improv.");
        for r in &self.rows {
            let imp = r.improvement_pct.map_or("-".to_string(), |p| format!("{p:+.2}%"));
            s.push_str(&format!("{:<15} {:>10.4} {:>10}\n", r.mode.name(), r.recall, imp));
        }
        s
    }
}

/// Trains each mode from the same seeds and tabulates test recall.
pub fn ablate(config: &TrainConfig, data: &Dataset, modes: &[Mode], run_root: Option<&Path>) -> Result<AblationTable> {
    config.validate()?;
    let k = config.early_stop_k;
    let mut rows = Vec::new();
    for &mode in modes {
        let c = TrainConfig { mode, ..config.clone() };
        let dir = run_root.map(|r| r.join(mode.name()));
        let out = fit(&c, data, dir.as_deref(), false)?;
        let test = test_metrics(&c, data, &out.best)?;
        rows.push(AblationRow {
            mode,
            best_epoch: out.best_epoch,
            valid_recall: out.best_valid.unwrap_or(0.0),
            recall: test.recall(k).unwrap_or(0.0),
            test,
            improvement_pct: None,
        });
    }
    if let Some(base) = rows.iter().find(|r| r.mode == Mode::BackboneOnly).map(|r| r.recall) {
        for r in &mut rows {
            if r.mode != Mode::BackboneOnly && base > 0.0 {
                r.improvement_pct = Some(100.0 * (r.recall - base) / base);
            }
        }
    }
    Ok(AblationTable { k, rows })
}
