use super::{positive, PrototypeError};
use crate::linalg::{argmax_rows, log_softmax_rows};
use crate::Real;
use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub marginal_tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self { epsilon: 0.05, max_iters: 3, marginal_tol: 1e-3 }
    }
}

/// Entropy-regularized transport plan between `K` prototypes and `B` samples.
#[derive(Clone, Debug)]
pub struct TransportPlan<T> {
    /// `K × B`, rows sum to `1/K` and columns to `1/B` at convergence.
    pub q: Array2<T>,
    /// Row scaling.
    pub mu: Vec<T>,
    /// Column scaling of the column-max-shifted kernel.
    pub nu: Vec<T>,
    pub iterations_run: usize,
    pub converged: bool,
    /// Max absolute deviation of a row sum from `1/K`.
    pub row_residual: f64,
    /// Max absolute deviation of a column sum from `1/B`.
    pub col_residual: f64,
}

/// Sinkhorn-Knopp scaling of `exp(scores / epsilon)` (`scores` is `K × B`).
///
/// Each iteration normalizes rows to `1/K` and then columns to `1/B`, so the
/// column marginal is the one satisfied last. Iteration stops after
/// `max_iters` or once both residuals drop below `marginal_tol`. Scores are
/// shifted by their column maximum before exponentiating; the shift is
/// absorbed by the column scaling.
pub fn sinkhorn_transport<T: Real>(
    scores: ArrayView2<'_, T>,
    config: &SinkhornConfig,
) -> Result<TransportPlan<T>, PrototypeError> {
    positive("epsilon", config.epsilon)?;
    let (k, b) = scores.dim();
    for ((row, col), v) in scores.indexed_iter() {
        if !v.is_finite() {
            return Err(PrototypeError::NonFinite { row, col });
        }
    }
    let eps = T::of(config.epsilon);
    let col_max: Vec<T> = scores
        .axis_iter(Axis(1))
        .map(|c| c.fold(T::neg_infinity(), |a, &v| a.max(v)))
        .collect();
    let mut q = scores.to_owned();
    for mut row in q.axis_iter_mut(Axis(0)) {
        for (v, &m) in row.iter_mut().zip(&col_max) {
            *v = ((*v - m) / eps).exp();
        }
    }
    let row_target = T::of(1.0 / k as f64);
    let col_target = T::of(1.0 / b as f64);
    let mut mu = vec![T::one(); k];
    let mut nu = vec![T::one(); b];
    let mut col_sums = vec![T::zero(); b];
    let mut plan_residuals = (f64::INFINITY, f64::INFINITY);
    let mut iterations_run = 0;
    let mut converged = false;
    for it in 0..config.max_iters {
        for (mut row, m) in q.axis_iter_mut(Axis(0)).zip(mu.iter_mut()) {
            let s = row.sum();
            if s > T::zero() {
                let f = row_target / s;
                row.mapv_inplace(|v| v * f);
                *m *= f;
            }
        }
        column_sums(&q, &mut col_sums);
        let factors: Vec<T> = col_sums
            .iter()
            .map(|&s| if s > T::zero() { col_target / s } else { T::one() })
            .collect();
        for mut row in q.axis_iter_mut(Axis(0)) {
            for (v, &f) in row.iter_mut().zip(&factors) {
                *v *= f;
            }
        }
        for (n, f) in nu.iter_mut().zip(&factors) {
            *n *= *f;
        }
        iterations_run = it + 1;
        plan_residuals = residuals(&q, &mut col_sums);
        if plan_residuals.0 < config.marginal_tol && plan_residuals.1 < config.marginal_tol {
            converged = true;
            break;
        }
    }
    if iterations_run == 0 {
        plan_residuals = residuals(&q, &mut col_sums);
    }
    Ok(TransportPlan {
        q,
        mu,
        nu,
        iterations_run,
        converged,
        row_residual: plan_residuals.0,
        col_residual: plan_residuals.1,
    })
}

fn column_sums<T: Real>(q: &Array2<T>, out: &mut [T]) {
    out.iter_mut().for_each(|s| *s = T::zero());
    for row in q.axis_iter(Axis(0)) {
        for (s, &v) in out.iter_mut().zip(row) {
            *s += v;
        }
    }
}

fn residuals<T: Real>(q: &Array2<T>, col_sums: &mut [T]) -> (f64, f64) {
    let (k, b) = q.dim();
    let row = q
        .axis_iter(Axis(0))
        .map(|r| (r.iter().map(|v| v.as_f64()).sum::<f64>() - 1.0 / k as f64).abs())
        .fold(0.0, f64::max);
    column_sums(q, col_sums);
    let col = col_sums.iter().map(|s| (s.as_f64() - 1.0 / b as f64).abs()).fold(0.0, f64::max);
    (row, col)
}

/// `-sum Q log Q`, with `0 log 0 = 0`.
pub fn transport_entropy<T: Real>(plan: &TransportPlan<T>) -> f64 {
    plan.q
        .iter()
        .map(|v| v.as_f64())
        .filter(|&v| v > 0.0)
        .map(|v| -v * v.ln())
        .sum()
}

/// `B × K` per-sample targets: the plan's columns, each rescaled to sum to 1.
pub fn transport_targets<T: Real>(plan: &TransportPlan<T>) -> Array2<T> {
    let mut t = plan.q.t().to_owned();
    for mut row in t.axis_iter_mut(Axis(0)) {
        let s = row.sum();
        if s > T::zero() {
            row.mapv_inplace(|v| v / s);
        }
    }
    t
}

/// Balanced targets, temperature softmax and hard argmax for one view.
#[derive(Clone, Debug)]
pub struct AssignmentResult<T> {
    pub targets: Array2<T>,
    pub softmax_probs: Array2<T>,
    pub hard_assign: Vec<usize>,
}

/// Everything derived from a `B × K` score matrix.
pub fn assignments<T: Real>(
    scores: ArrayView2<'_, T>,
    tau: f64,
    sinkhorn: &SinkhornConfig,
) -> Result<AssignmentResult<T>, PrototypeError> {
    positive("tau", tau)?;
    let plan = sinkhorn_transport(scores.t(), sinkhorn)?;
    Ok(AssignmentResult {
        targets: transport_targets(&plan),
        softmax_probs: log_softmax_rows(scores, T::of(tau)).mapv(|v| v.exp()),
        hard_assign: argmax_rows(scores),
    })
}
