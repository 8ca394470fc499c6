//! Parameter state, Adam, the per-batch training step, and the
//! finite-difference gradient audit.

mod audit;
mod step;

pub use audit::{gradient_audit, AuditConfig, AuditReport, BlockAudit};
pub use step::{freeze, loss_and_gradients, train_step, Frozen, StepConfig, TrainContext};

use crate::propagation::{EmbeddingTable, PropagationError};
use crate::prototypes::{EntityKind, PrototypeBank, PrototypeError};
use crate::rng::{keyed_rng, keys};
use crate::Real;
use ndarray::{Array2, Axis, Zip};
use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum OptimError {
    #[error("non-finite gradient in block `{block}`")]
    NonFiniteGradient { block: &'static str },
    #[error("gradient shape {found:?} does not match parameter block `{block}` {expected:?}")]
    ShapeMismatch { block: &'static str, expected: (usize, usize), found: (usize, usize) },
    #[error("learning rate must be positive, got {0}")]
    BadLearningRate(f64),
    #[error("{0}")]
    Invalid(String),
}

/// Every trainable parameter: base embeddings and both prototype banks.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub embeddings: EmbeddingTable<T>,
    pub user_bank: PrototypeBank<T>,
    pub item_bank: PrototypeBank<T>,
}

impl<T: Real> ModelState<T> {
    /// Gaussian base embeddings with standard deviation `init_std` and
    /// unit-norm Gaussian prototype banks, all from `seed`.
    pub fn init(
        num_users: usize,
        num_items: usize,
        dim: usize,
        k: usize,
        init_std: f64,
        seed: u64,
    ) -> Result<Self, crate::Error> {
        let mut rng = keyed_rng(seed, keys::INIT, 0, 0);
        let normal = Normal::new(0.0, init_std).map_err(|e| OptimError::Invalid(e.to_string()))?;
        let m = Array2::from_shape_simple_fn((num_users + num_items, dim), || T::of(rng.sample(normal)));
        let embeddings = EmbeddingTable::new(m, num_users)?;
        let user_bank = PrototypeBank::random(k, dim, EntityKind::User, &mut keyed_rng(seed, keys::INIT, 1, 0))?;
        let item_bank = PrototypeBank::random(k, dim, EntityKind::Item, &mut keyed_rng(seed, keys::INIT, 2, 0))?;
        Ok(Self { embeddings, user_bank, item_bank })
    }

    pub fn from_parts(
        embeddings: EmbeddingTable<T>,
        user_bank: PrototypeBank<T>,
        item_bank: PrototypeBank<T>,
    ) -> Result<Self, crate::Error> {
        let d = embeddings.dim();
        for bank in [&user_bank, &item_bank] {
            if bank.dim() != d {
                return Err(PrototypeError::DimensionMismatch { expected: d, found: bank.dim() }.into());
            }
        }
        if user_bank.k() != item_bank.k() {
            return Err(OptimError::Invalid(format!(
                "user and item banks differ in size: {} vs {}",
                user_bank.k(),
                item_bank.k()
            ))
            .into());
        }
        Ok(Self { embeddings, user_bank, item_bank })
    }

    pub fn num_users(&self) -> usize {
        self.embeddings.num_users()
    }

    pub fn num_items(&self) -> usize {
        self.embeddings.num_items()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim()
    }

    pub fn k(&self) -> usize {
        self.user_bank.k()
    }

    pub fn renormalize_banks(&mut self) -> Result<(), PrototypeError> {
        self.user_bank.renormalize_in_place()?;
        self.item_bank.renormalize_in_place()
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        let c = |m: &Array2<T>| m.mapv(|v| U::of(v.as_f64()));
        ModelState {
            embeddings: EmbeddingTable::new(c(self.embeddings.matrix()), self.num_users()).expect("same shape"),
            user_bank: PrototypeBank::new(c(self.user_bank.matrix()), EntityKind::User).expect("same shape"),
            item_bank: PrototypeBank::new(c(self.item_bank.matrix()), EntityKind::Item).expect("same shape"),
        }
    }
}

/// One gradient per parameter block. Absent bank gradients leave the bank
/// and its moments untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub embeddings: Array2<T>,
    pub user_bank: Option<Array2<T>>,
    pub item_bank: Option<Array2<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments for every block plus the shared step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m_embeddings: Array2<T>,
    pub v_embeddings: Array2<T>,
    pub m_user_bank: Array2<T>,
    pub v_user_bank: Array2<T>,
    pub m_item_bank: Array2<T>,
    pub v_item_bank: Array2<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ModelState<T>, config: AdamConfig) -> Self {
        let z = |m: &Array2<T>| Array2::zeros(m.raw_dim());
        Self {
            config,
            step: 0,
            m_embeddings: z(params.embeddings.matrix()),
            v_embeddings: z(params.embeddings.matrix()),
            m_user_bank: z(params.user_bank.matrix()),
            v_user_bank: z(params.user_bank.matrix()),
            m_item_bank: z(params.item_bank.matrix()),
            v_item_bank: z(params.item_bank.matrix()),
        }
    }
}

/// How rows without gradient are treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowPolicy {
    /// Every entry updated.
    Dense,
    /// Rows whose gradient is identically zero keep parameters and moments.
    Lazy,
}

/// Bias-corrected Adam on one block; `t` is the step number after increment.
#[allow(clippy::too_many_arguments)]
pub fn adam_update_block<T: Real>(
    param: &mut Array2<T>,
    grad: &Array2<T>,
    m: &mut Array2<T>,
    v: &mut Array2<T>,
    t: u64,
    config: &AdamConfig,
    lr: f64,
    policy: RowPolicy,
) {
    let b1 = T::of(config.beta1);
    let b2 = T::of(config.beta2);
    let one = T::one();
    let bc1 = 1.0 - config.beta1.powi(t as i32);
    let bc2 = 1.0 - config.beta2.powi(t as i32);
    let step_size = T::of(lr / bc1);
    let inv_sqrt_bc2 = T::of(1.0 / bc2.sqrt());
    let eps = T::of(config.eps);
    Zip::from(param.axis_iter_mut(Axis(0)))
        .and(grad.axis_iter(Axis(0)))
        .and(m.axis_iter_mut(Axis(0)))
        .and(v.axis_iter_mut(Axis(0)))
        .for_each(|mut p, g, mut m, mut v| {
            if policy == RowPolicy::Lazy && g.iter().all(|x| *x == T::zero()) {
                return;
            }
            Zip::from(&mut p).and(&g).and(&mut m).and(&mut v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p -= step_size * *m / ((*v).sqrt() * inv_sqrt_bc2 + eps);
            });
        });
}

fn check_block<T: Real>(block: &'static str, param: &Array2<T>, grad: &Array2<T>) -> Result<(), OptimError> {
    if param.dim() != grad.dim() {
        return Err(OptimError::ShapeMismatch { block, expected: param.dim(), found: grad.dim() });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(OptimError::NonFiniteGradient { block });
    }
    Ok(())
}

/// One Adam step across all blocks: lazy rows for embeddings, dense banks.
/// Nothing is modified when any gradient is rejected.
pub fn adam_step<T: Real>(
    state: &mut AdamState<T>,
    params: &mut ModelState<T>,
    grads: &Gradients<T>,
    lr: f64,
) -> Result<(), OptimError> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(OptimError::BadLearningRate(lr));
    }
    check_block("embeddings", params.embeddings.matrix(), &grads.embeddings)?;
    if let Some(g) = &grads.user_bank {
        check_block("user_bank", params.user_bank.matrix(), g)?;
    }
    if let Some(g) = &grads.item_bank {
        check_block("item_bank", params.item_bank.matrix(), g)?;
    }
    state.step += 1;
    let t = state.step;
    let cfg = state.config;
    adam_update_block(
        params.embeddings.matrix_mut(),
        &grads.embeddings,
        &mut state.m_embeddings,
        &mut state.v_embeddings,
        t,
        &cfg,
        lr,
        RowPolicy::Lazy,
    );
    if let Some(g) = &grads.user_bank {
        adam_update_block(
            params.user_bank.matrix_mut(),
            g,
            &mut state.m_user_bank,
            &mut state.v_user_bank,
            t,
            &cfg,
            lr,
            RowPolicy::Dense,
        );
    }
    if let Some(g) = &grads.item_bank {
        adam_update_block(
            params.item_bank.matrix_mut(),
            g,
            &mut state.m_item_bank,
            &mut state.v_item_bank,
            t,
            &cfg,
            lr,
            RowPolicy::Dense,
        );
    }
    Ok(())
}

impl From<PropagationError> for OptimError {
    fn from(e: PropagationError) -> Self {
        OptimError::Invalid(e.to_string())
    }
}
