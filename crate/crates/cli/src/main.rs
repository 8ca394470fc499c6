use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use protoau::checkpoint::{load_checkpoint, Checkpoint};
use protoau::config::{run_root, ConfigError, TrainConfig, RUN_ROOT_ENV};
use protoau::data::{
    prepare_dataset, read_records, sweep_rating_thresholds, DataError, IngestOptions, InputFormat,
};
use protoau::error::ErrorClass;
use protoau::eval::{eval_record, EvalSplit};
use protoau::objectives::Mode;
use protoau::propagation::propagate;
use protoau::prototypes::{compute_scores, hard_assign};
use protoau::trainer::{ablate, fit, Dataset, BEST_CHECKPOINT};
use std::fmt::Display;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "protoau", version, about = "Prototypical contrastive graph collaborative filtering", args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter, deduplicate and split a raw interaction file into a dataset cache.
    Ingest(IngestArgs),
    /// Train one model, writing checkpoints and a run log.
    Train(TrainArgs),
    /// Score a checkpoint on the validation or test split.
    Evaluate(EvaluateArgs),
    /// Train every mode from shared seeds and tabulate test recall.
    Ablate(AblateArgs),
    /// Write embeddings, prototypes or prototype assignments as text.
    Export(ExportArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Raw interaction file.
    #[arg(long)]
    input: PathBuf,
    /// movielens-dat, csv or tsv.
    #[arg(long, default_value = "movielens-dat")]
    format: InputFormat,
    /// Output directory for the cache and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Drop records rated below this value (MovieLens-1M: 3).
    #[arg(long, conflicts_with = "target_count")]
    rating_threshold: Option<f64>,
    /// Iterative k-core filter.
    #[arg(long)]
    kcore: Option<usize>,
    #[arg(long, default_value_t = 2024)]
    split_seed: u64,
    /// Print the interaction count for each integer threshold and stop.
    #[arg(long)]
    sweep: bool,
    /// Pick the integer threshold that yields exactly this many interactions.
    #[arg(long)]
    target_count: Option<usize>,
}

macro_rules! config_overrides {
    ($($field:ident: $kind:ident),* $(,)?) => {
        /// One flag per config field. Values use TOML syntax (`--eval-ks 10,20`
        /// or `--eval-ks "[10, 20]"`, `--mode wo_au`).
        #[derive(Args, Default)]
        struct Overrides {
            $(#[arg(long, value_name = "VALUE", allow_hyphen_values = true, help_heading = "Config overrides")] $field: Option<String>,)*
        }

        impl Overrides {
            fn pairs(&self) -> Vec<(&'static str, &str, Kind)> {
                let mut out = Vec::new();
                $(if let Some(v) = &self.$field {
                    out.push((stringify!($field), v.as_str(), Kind::$kind));
                })*
                out
            }
        }
    };
}

#[derive(Clone, Copy)]
#[allow(non_camel_case_types)]
enum Kind {
    str,
    raw,
    list,
}

config_overrides! {
    data_dir: str, split_seed: raw, dim: raw, layers: raw, batch_size: raw, lr: raw, k: raw,
    tau: raw, epsilon: raw, sinkhorn_iters: raw, sinkhorn_tol: raw, normalize_inputs: raw,
    drop_rate: raw, augmentation: str, alpha: raw, beta: raw, uniformity_log: raw,
    uniformity_pairs: raw, lambda1: raw, lambda2: raw, lambda3: raw, reg_weight: raw,
    bpr_reduction: str, mode: str, max_epochs: raw, patience: raw, eval_ks: list,
    early_stop_k: raw, exclude_valid_on_test: raw, init_std: raw, adam_beta1: raw,
    adam_beta2: raw, adam_eps: raw, rng_seed: raw, max_batches_per_epoch: raw,
}

fn override_value(raw: &str, kind: Kind) -> toml::Value {
    let parse = |s: &str| s.parse::<toml::Table>().ok().and_then(|mut t| t.remove("v"));
    let text = || toml::Value::String(raw.to_string());
    match kind {
        Kind::str => text(),
        Kind::raw => parse(&format!("v = {raw}")).unwrap_or_else(text),
        Kind::list => match parse(&format!("v = {raw}")) {
            Some(v @ toml::Value::Array(_)) => v,
            _ => parse(&format!("v = [{raw}]")).unwrap_or_else(text),
        },
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

impl ConfigArgs {
    /// Config file plus overrides, validated with every violation listed.
    fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let base = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        let mut table: toml::Table = toml::from_str(&base.to_toml()).expect("config round-trips");
        for (key, raw, kind) in self.overrides.pairs() {
            table.insert(key.to_string(), override_value(raw, kind));
        }
        let config: TrainConfig = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse {
            path: PathBuf::from("command-line overrides"),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Run directory name under the run root.
    #[arg(long)]
    run_name: Option<String>,
    /// Explicit run directory, overriding the run root and name.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Continue from the run directory's last checkpoint.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: EvalSplit,
    /// Cutoffs, defaulting to the checkpoint's config.
    #[arg(long, value_delimiter = ',')]
    ks: Vec<usize>,
    /// Dataset directory, defaulting to the checkpoint's config.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// JSON output path, defaulting to `<checkpoint>.<split>.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Modes to train, in table order.
    #[arg(long, value_delimiter = ',', default_value = "backbone_only,wo_proto,wo_au,full")]
    modes: Vec<Mode>,
    /// Directory for the per-mode runs and the table.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportWhat {
    Embeddings,
    Prototypes,
    Assignments,
}

#[derive(Clone, Copy, ValueEnum)]
enum Side {
    User,
    Item,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum)]
    what: ExportWhat,
    /// Prototype bank used by `prototypes` and `assignments`.
    #[arg(long, value_enum, default_value = "item")]
    side: Side,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate(a) => run_ablation(a),
        Command::Export(a) => export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e);
            ExitCode::from(exit_code(&e))
        }
    }
}

fn report_error(e: &anyhow::Error) {
    let violations = e.chain().find_map(|c| match c.downcast_ref::<ConfigError>() {
        Some(ConfigError::Invalid(v)) => Some(v.clone()),
        _ => match c.downcast_ref::<protoau::Error>() {
            Some(protoau::Error::Config(ConfigError::Invalid(v))) => Some(v.clone()),
            _ => None,
        },
    });
    match violations {
        Some(v) => {
            eprintln!("error: invalid configuration ({} problems)", v.len());
            for line in v {
                eprintln!("  - {line}");
            }
        }
        None => eprintln!("error: {e:#}"),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<protoau::Error>() {
            return match err.class() {
                ErrorClass::Config => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numerical => 3,
            };
        }
        if cause.is::<ConfigError>() {
            return 1;
        }
        if cause.is::<DataError>() || cause.is::<std::io::Error>() {
            return 2;
        }
    }
    2
}

fn ingest(a: IngestArgs) -> anyhow::Result<()> {
    if a.sweep || a.target_count.is_some() {
        let records = read_records(&a.input, a.format)?;
        let sweep = sweep_rating_thresholds(&records, a.kcore);
        if a.sweep {
            println!("threshold\tinteractions");
            for (t, n) in &sweep {
                println!("{t}\t{n}");
            }
            return Ok(());
        }
        let want = a.target_count.expect("checked above");
        let Some(&(t, _)) = sweep.iter().find(|&&(_, n)| n == want) else {
            return Err(DataError::Inconsistent(format!(
                "no integer rating threshold yields {want} interactions (sweep: {sweep:?})"
            ))
            .into());
        };
        log::info!("threshold {t} yields {want} interactions");
        return prepare(&a, Some(t));
    }
    prepare(&a, a.rating_threshold)
}

fn prepare(a: &IngestArgs, threshold: Option<f64>) -> anyhow::Result<()> {
    let options = IngestOptions { rating_threshold: threshold, kcore: a.kcore };
    let out = prepare_dataset(&a.input, a.format, &options, a.split_seed, &a.out)?;
    let m = &out.manifest;
    if out.up_to_date {
        println!("up to date: {}", a.out.display());
    }
    println!(
        "users {} items {} interactions {} (train {} / valid {} / test {}), min degree user {} item {}",
        m.num_users, m.num_items, m.num_interactions, m.train, m.valid, m.test, m.min_user_degree, m.min_item_degree
    );
    Ok(())
}

fn load_dataset(dir: &Path, split_seed: u64) -> anyhow::Result<Dataset> {
    Dataset::load(dir, split_seed).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let config = a.config.resolve()?;
    let run_dir = a.run_dir.clone().unwrap_or_else(|| {
        let name = a.run_name.clone().unwrap_or_else(|| format!("{}-seed{}", config.mode.name(), config.rng_seed));
        run_root().join(name)
    });
    let data = load_dataset(&config.data_dir, config.split_seed)?;
    log::info!("run directory {} (root from ${RUN_ROOT_ENV})", run_dir.display());
    let out = fit(&config, &data, Some(&run_dir), a.resume)?;
    let best = out.best_valid.map_or("-".to_string(), |v| format!("{v:.4}"));
    println!(
        "epochs {} best epoch {} valid Recall@{} {} -> {}",
        out.epochs_run,
        out.best_epoch.map_or("-".to_string(), |e| e.to_string()),
        config.early_stop_k,
        best,
        run_dir.join(BEST_CHECKPOINT).display()
    );
    Ok(())
}

fn checkpoint_and_data(path: &Path, data_dir: Option<&Path>) -> anyhow::Result<(Checkpoint, Dataset)> {
    let ck = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let dir = data_dir.unwrap_or(&ck.meta.config.data_dir).to_path_buf();
    let data = load_dataset(&dir, ck.meta.split_seed)?;
    if (data.num_users(), data.num_items()) != (ck.params.num_users(), ck.params.num_items()) {
        return Err(DataError::Inconsistent(format!(
            "checkpoint has {} users / {} items but {} has {} / {}",
            ck.params.num_users(),
            ck.params.num_items(),
            dir.display(),
            data.num_users(),
            data.num_items()
        ))
        .into());
    }
    Ok((ck, data))
}

fn evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let (ck, data) = checkpoint_and_data(&a.checkpoint, a.data_dir.as_deref())?;
    let config = &ck.meta.config;
    let ks = if a.ks.is_empty() { config.eval_ks.clone() } else { a.ks.clone() };
    if ks.contains(&0) {
        return Err(ConfigError::Invalid(vec!["ks: cutoffs must be positive".into()]).into());
    }
    let targets = data.targets(a.split, config.exclude_valid_on_test);
    let (record, _) = eval_record(&ck.params, &data.adjacency, config.layers, &targets, &ks, ck.meta.epoch, a.split)
        .map_err(protoau::Error::from)?;
    for (k, m) in &record.metrics {
        println!("{} Recall@{k} {:.4} NDCG@{k} {:.4}", a.split, m.recall, m.ndcg);
    }
    println!("users evaluated {}", record.users_evaluated);
    let out = a.out.unwrap_or_else(|| {
        let mut p = a.checkpoint.clone().into_os_string();
        p.push(format!(".{}.json", a.split));
        PathBuf::from(p)
    });
    std::fs::write(&out, serde_json::to_string_pretty(&record)? + "\n")
        .with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn run_ablation(a: AblateArgs) -> anyhow::Result<()> {
    let config = a.config.resolve()?;
    let dir = a.run_dir.unwrap_or_else(|| run_root().join("ablation"));
    let data = load_dataset(&config.data_dir, config.split_seed)?;
    let table = ablate(&config, &data, &a.modes, Some(&dir))?;
    let rendered = table.render();
    print!("{rendered}");
    std::fs::write(dir.join("ablation.txt"), &rendered).context("writing ablation table")?;
    std::fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(&table)? + "\n")
        .context("writing ablation table")?;
    Ok(())
}

fn write_row<W: Write>(w: &mut W, id: impl Display, values: impl IntoIterator<Item = f32>) -> std::io::Result<()> {
    write!(w, "{id}")?;
    for v in values {
        write!(w, "\t{v}")?;
    }
    writeln!(w)
}

fn export(a: ExportArgs) -> anyhow::Result<()> {
    let (ck, data) = checkpoint_and_data(&a.checkpoint, a.data_dir.as_deref())?;
    let config = &ck.meta.config;
    let file = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut w = BufWriter::new(file);
    let nu = data.num_users();
    let bank = match a.side {
        Side::User => &ck.params.user_bank,
        Side::Item => &ck.params.item_bank,
    };
    match a.what {
        ExportWhat::Prototypes => {
            for (k, row) in bank.matrix().rows().into_iter().enumerate() {
                write_row(&mut w, k, row.iter().copied())?;
            }
        }
        ExportWhat::Embeddings | ExportWhat::Assignments => {
            let stack = propagate(&data.adjacency, &ck.params.embeddings, config.layers).map_err(protoau::Error::from)?;
            let emb = stack.final_embeddings();
            let ids = data
                .graph
                .user_ids()
                .iter()
                .map(|u| format!("user:{u}"))
                .chain(data.graph.item_ids().iter().map(|i| format!("item:{i}")));
            if let ExportWhat::Embeddings = a.what {
                for (id, row) in ids.zip(emb.rows()) {
                    write_row(&mut w, id, row.iter().copied())?;
                }
            } else {
                let (rows, ids): (_, Vec<String>) = match a.side {
                    Side::User => (emb.slice(ndarray::s![..nu, ..]), ids.take(nu).collect()),
                    Side::Item => (emb.slice(ndarray::s![nu.., ..]), ids.skip(nu).collect()),
                };
                let scores = compute_scores(rows, bank, config.normalize_inputs).map_err(protoau::Error::from)?;
                for (id, k) in ids.iter().zip(hard_assign(scores.view())) {
                    writeln!(w, "{id}\t{k}")?;
                }
            }
        }
    }
    w.flush().with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}
