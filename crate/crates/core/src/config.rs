//! Run configuration: TOML schema, defaults, and validation.

use crate::objectives::{LossWeights, Mode, Reduction};
use crate::optim::{AdamConfig, StepConfig};
use crate::propagation::Augmentation;
use crate::prototypes::{SinkhornConfig, SwapParams, UniformityOptions, UniformityPairs};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable naming the directory under which runs are created.
pub const RUN_ROOT_ENV: &str = "PROTOAU_RUN_ROOT";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl ConfigError {
    pub fn violations(&self) -> &[String] {
        match self {
            ConfigError::Invalid(v) => v,
            _ => &[],
        }
    }
}

/// Every knob of a training run. Each field has a default, so a config file
/// only lists what it changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Directory written by `ingest` (cache + manifest).
    pub data_dir: PathBuf,
    pub split_seed: u64,
    pub dim: usize,
    pub layers: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub k: usize,
    pub tau: f64,
    pub epsilon: f64,
    pub sinkhorn_iters: usize,
    pub sinkhorn_tol: f64,
    pub normalize_inputs: bool,
    pub drop_rate: f64,
    pub augmentation: Augmentation,
    pub alpha: f64,
    pub beta: f64,
    pub uniformity_log: bool,
    /// Sample this many prototype pairs per step instead of all of them.
    pub uniformity_pairs: Option<usize>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub reg_weight: f64,
    pub bpr_reduction: Reduction,
    pub mode: Mode,
    pub max_epochs: usize,
    pub patience: usize,
    pub eval_ks: Vec<usize>,
    pub early_stop_k: usize,
    pub exclude_valid_on_test: bool,
    pub init_std: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub rng_seed: u64,
    /// Stop after this many batches per epoch (0 = full epoch).
    pub max_batches_per_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            split_seed: 2024,
            dim: 64,
            layers: 3,
            batch_size: 4096,
            lr: 1e-3,
            k: 1500,
            tau: 0.1,
            epsilon: 0.05,
            sinkhorn_iters: 3,
            sinkhorn_tol: 1e-3,
            normalize_inputs: true,
            drop_rate: 0.1,
            augmentation: Augmentation::EdgeDropout,
            alpha: 2.0,
            beta: 2.0,
            uniformity_log: false,
            uniformity_pairs: None,
            lambda1: 1.0,
            lambda2: 0.5,
            lambda3: 0.5,
            reg_weight: 1e-4,
            bpr_reduction: Reduction::Sum,
            mode: Mode::Full,
            max_epochs: 300,
            patience: 10,
            eval_ks: vec![10, 20, 50],
            early_stop_k: 20,
            exclude_valid_on_test: true,
            init_std: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            rng_seed: 2024,
            max_batches_per_epoch: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.to_path_buf(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Every violated constraint, in field order.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut pos_int = |name: &str, x: usize| {
            if x == 0 {
                v.push(format!("{name} must be positive, got 0"));
            }
        };
        pos_int("dim", self.dim);
        pos_int("batch_size", self.batch_size);
        pos_int("sinkhorn_iters", self.sinkhorn_iters);
        pos_int("early_stop_k", self.early_stop_k);
        if self.k < 2 {
            v.push(format!("k must be at least 2, got {}", self.k));
        }
        for (name, x) in [
            ("lr", self.lr),
            ("tau", self.tau),
            ("epsilon", self.epsilon),
            ("sinkhorn_tol", self.sinkhorn_tol),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("init_std", self.init_std),
            ("adam_eps", self.adam_eps),
        ] {
            if !(x > 0.0 && x.is_finite()) {
                v.push(format!("{name} must be positive and finite, got {x}"));
            }
        }
        for (name, x) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("reg_weight", self.reg_weight),
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                v.push(format!("{name} must be non-negative and finite, got {x}"));
            }
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            v.push(format!("drop_rate must lie in [0, 1), got {}", self.drop_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                v.push(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            v.push(format!("eval_ks must be a non-empty list of positive cutoffs, got {:?}", self.eval_ks));
        }
        if !self.eval_ks.contains(&self.early_stop_k) {
            v.push(format!("early_stop_k {} is not among eval_ks {:?}", self.early_stop_k, self.eval_ks));
        }
        if self.uniformity_pairs == Some(0) {
            v.push("uniformity_pairs must be positive when set".to_string());
        }
        if self.mode == Mode::WoProto && self.batch_size < 2 {
            v.push("wo_proto needs batch_size of at least 2".to_string());
        }
        v
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(v))
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda1: self.lambda1, lambda2: self.lambda2, lambda3: self.lambda3 }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps }
    }

    pub fn step_config(&self) -> StepConfig {
        let pairs = match self.uniformity_pairs {
            Some(count) => UniformityPairs::Sampled { count, seed: self.rng_seed },
            None => UniformityPairs::All,
        };
        StepConfig {
            layers: self.layers,
            mode: self.mode,
            weights: self.weights(),
            swap: SwapParams {
                tau: self.tau,
                sinkhorn: SinkhornConfig {
                    epsilon: self.epsilon,
                    max_iters: self.sinkhorn_iters,
                    marginal_tol: self.sinkhorn_tol,
                },
                normalize_inputs: self.normalize_inputs,
            },
            alpha: self.alpha,
            beta: self.beta,
            uniformity: UniformityOptions { pairs, log: self.uniformity_log },
            reg_weight: self.reg_weight,
            bpr_reduction: self.bpr_reduction,
            drop_rate: self.drop_rate,
            augmentation: self.augmentation,
            lr: self.lr,
        }
    }
}

/// `$PROTOAU_RUN_ROOT`, falling back to `./runs`.
pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}
