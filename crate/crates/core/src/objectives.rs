//! Ranking and instance-contrastive losses, and assembly of the weighted
//! multi-task total.

use crate::data::TripleBatch;
use crate::linalg::{log_softmax_rows, normalize_backward, normalize_rows};
use crate::propagation::LayerStack;
use crate::Real;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error("loss weight {name} is negative ({value})")]
    NegativeWeight { name: &'static str, value: f64 },
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("InfoNCE needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("view shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("row {row} has zero norm")]
    ZeroNorm { row: usize },
    #[error("{kind} index {index} out of range (bound {bound})")]
    IndexOutOfRange { kind: &'static str, index: usize, bound: usize },
}

/// Gradient supported on a subset of embedding rows.
#[derive(Clone, Debug, PartialEq)]
pub struct RowGradient<T> {
    pub rows: Vec<usize>,
    pub values: Array2<T>,
}

impl<T: Real> RowGradient<T> {
    fn accumulate(dim: usize) -> RowAccumulator<T> {
        RowAccumulator { slot: HashMap::new(), rows: Vec::new(), values: Vec::new(), dim }
    }

    pub fn add_to(&self, dense: &mut Array2<T>) {
        for (k, &r) in self.rows.iter().enumerate() {
            let mut dst = dense.row_mut(r);
            dst += &self.values.row(k);
        }
    }

    pub fn to_dense(&self, rows: usize) -> Array2<T> {
        let mut d = Array2::zeros((rows, self.values.ncols()));
        self.add_to(&mut d);
        d
    }
}

struct RowAccumulator<T> {
    slot: HashMap<usize, usize>,
    rows: Vec<usize>,
    values: Vec<T>,
    dim: usize,
}

impl<T: Real> RowAccumulator<T> {
    fn add(&mut self, row: usize, scale: T, v: ndarray::ArrayView1<'_, T>) {
        let dim = self.dim;
        let k = *self.slot.entry(row).or_insert_with(|| {
            self.rows.push(row);
            self.values.extend(std::iter::repeat_n(T::zero(), dim));
            self.rows.len() - 1
        });
        for (dst, &x) in self.values[k * dim..(k + 1) * dim].iter_mut().zip(v) {
            *dst += scale * x;
        }
    }

    fn finish(self) -> RowGradient<T> {
        let n = self.rows.len();
        RowGradient { rows: self.rows, values: Array2::from_shape_vec((n, self.dim), self.values).expect("shape") }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_batch(batch: &TripleBatch, nu: usize, ni: usize) -> Result<(), ObjectiveError> {
    let oob = |kind, index, bound| ObjectiveError::IndexOutOfRange { kind, index, bound };
    for k in 0..batch.len() {
        if batch.users[k] >= nu {
            return Err(oob("user", batch.users[k], nu));
        }
        for i in [batch.pos_items[k], batch.neg_items[k]] {
            if i >= ni {
                return Err(oob("item", i, ni));
            }
        }
    }
    Ok(())
}

/// `-sum log sigmoid(y_ui - y_uj)` over the batch (or its mean), with the
/// gradient on the layer-mean embeddings of every touched row.
pub fn bpr_loss_and_grad<T: Real>(
    stack: &LayerStack<T>,
    batch: &TripleBatch,
    reduction: Reduction,
) -> Result<(f64, RowGradient<T>), ObjectiveError> {
    let nu = stack.num_users();
    check_batch(batch, nu, stack.num_items())?;
    let e = stack.final_embeddings();
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean if batch.is_empty() => 0.0,
        Reduction::Mean => 1.0 / batch.len() as f64,
    };
    let mut acc = RowGradient::accumulate(e.ncols());
    let mut loss = 0.0;
    for k in 0..batch.len() {
        let (u, i, j) = (batch.users[k], nu + batch.pos_items[k], nu + batch.neg_items[k]);
        let (eu, ei, ej) = (e.row(u), e.row(i), e.row(j));
        let margin = eu.dot(&ei).as_f64() - eu.dot(&ej).as_f64();
        loss += softplus(-margin);
        // d/d margin of softplus(-margin)
        let g = T::of(-sigmoid(-margin) * scale);
        let diff = &ei - &ej;
        acc.add(u, g, diff.view());
        acc.add(i, g, eu);
        acc.add(j, -g, eu);
    }
    Ok((loss * scale, acc.finish()))
}

/// `(weight / 2) * sum over triples of |e_u|^2 + |e_i|^2 + |e_j|^2` on the
/// base table, matching the summed BPR convention.
pub fn l2_reg_and_grad<T: Real>(
    base: &Array2<T>,
    num_users: usize,
    batch: &TripleBatch,
    weight: f64,
) -> Result<(f64, RowGradient<T>), ObjectiveError> {
    check_batch(batch, num_users, base.nrows() - num_users)?;
    let mut acc = RowGradient::accumulate(base.ncols());
    let mut loss = 0.0;
    let w = T::of(weight);
    for k in 0..batch.len() {
        for r in [batch.users[k], num_users + batch.pos_items[k], num_users + batch.neg_items[k]] {
            let row = base.row(r);
            loss += row.dot(&row).as_f64();
            acc.add(r, w, row);
        }
    }
    Ok((0.5 * weight * loss, acc.finish()))
}

#[derive(Clone, Debug)]
pub struct InfoNceOutput<T> {
    pub loss: f64,
    pub grad_z_t: Array2<T>,
    pub grad_z_s: Array2<T>,
}

/// In-batch InfoNCE on unit-normalized rows: row `i` of `z_t` is pulled to
/// row `i` of `z_s` against every other `z_s` row, summed over the batch.
pub fn infonce_loss_and_grad<T: Real>(
    z_t: ArrayView2<'_, T>,
    z_s: ArrayView2<'_, T>,
    tau: f64,
) -> Result<InfoNceOutput<T>, ObjectiveError> {
    if !(tau > 0.0) {
        return Err(ObjectiveError::BadTemperature(tau));
    }
    if z_t.dim() != z_s.dim() {
        return Err(ObjectiveError::ShapeMismatch(z_t.dim(), z_s.dim()));
    }
    let b = z_t.nrows();
    if b < 2 {
        return Err(ObjectiveError::BatchTooSmall(b));
    }
    let nt = normalize_rows(z_t).map_err(|row| ObjectiveError::ZeroNorm { row })?;
    let ns = normalize_rows(z_s).map_err(|row| ObjectiveError::ZeroNorm { row })?;
    let sim = nt.unit.dot(&ns.unit.t());
    let logp = log_softmax_rows(sim.view(), T::of(tau));
    let loss = -(0..b).map(|i| logp[[i, i]].as_f64()).sum::<f64>();
    // d loss / d sim = (P - I) / tau
    let inv_tau = T::of(1.0 / tau);
    let mut g = logp.mapv(|v| v.exp());
    for i in 0..b {
        g[[i, i]] -= T::one();
    }
    g.mapv_inplace(|v| v * inv_tau);
    let gu_t = g.dot(&ns.unit);
    let gu_s = g.t().dot(&nt.unit);
    Ok(InfoNceOutput {
        loss,
        grad_z_t: normalize_backward(&nt, gu_t.view()),
        grad_z_s: normalize_backward(&ns, gu_s.view()),
    })
}

/// Which auxiliary objectives join BPR.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// BPR + swapped prototype loss + alignment + uniformity.
    #[default]
    Full,
    /// Instance InfoNCE in place of the prototype loss.
    WoProto,
    /// Prototype loss without alignment and uniformity.
    WoAu,
    /// BPR (and regularization) only.
    BackboneOnly,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::BackboneOnly, Mode::WoProto, Mode::WoAu, Mode::Full];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::WoProto => "wo_proto",
            Mode::WoAu => "wo_au",
            Mode::BackboneOnly => "backbone_only",
        }
    }

    /// Weights after the mode switches terms off.
    pub fn effective(self, w: LossWeights) -> LossWeights {
        match self {
            Mode::Full | Mode::WoProto => w,
            Mode::WoAu => LossWeights { lambda2: 0.0, lambda3: 0.0, ..w },
            Mode::BackboneOnly => LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0 },
        }
    }

    pub fn uses_views(self) -> bool {
        self != Mode::BackboneOnly
    }

    pub fn uses_prototypes(self) -> bool {
        matches!(self, Mode::Full | Mode::WoAu | Mode::WoProto)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "full" => Ok(Mode::Full),
            "wo_proto" => Ok(Mode::WoProto),
            "wo_au" => Ok(Mode::WoAu),
            "backbone_only" | "backbone" | "lightgcn" => Ok(Mode::BackboneOnly),
            other => Err(format!("unknown mode `{other}` (full, wo_proto, wo_au, backbone_only)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 0.5, lambda3: 0.5 }
    }
}

/// Unweighted loss components of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub bpr: f64,
    pub proto: f64,
    pub align: f64,
    pub uniform: f64,
    pub infonce: Option<f64>,
    pub reg: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub bpr: f64,
    pub proto: f64,
    pub align: f64,
    pub uniform: f64,
    pub infonce: Option<f64>,
    pub reg: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

/// Weighted total; weights are reported after the mode's switches.
pub fn assemble_total(parts: &LossParts, weights: LossWeights, mode: Mode) -> Result<LossReport, ObjectiveError> {
    for (name, value) in [("lambda1", weights.lambda1), ("lambda2", weights.lambda2), ("lambda3", weights.lambda3)] {
        if value < 0.0 || value.is_nan() {
            return Err(ObjectiveError::NegativeWeight { name, value });
        }
    }
    let w = mode.effective(weights);
    let contrastive = match mode {
        Mode::WoProto => parts.infonce.unwrap_or(0.0),
        Mode::BackboneOnly => 0.0,
        Mode::Full | Mode::WoAu => parts.proto,
    };
    let mut total = parts.bpr + parts.reg;
    if w.lambda1 != 0.0 {
        total += w.lambda1 * contrastive;
    }
    if w.lambda2 != 0.0 {
        total += w.lambda2 * parts.align;
    }
    if w.lambda3 != 0.0 {
        total += w.lambda3 * parts.uniform;
    }
    Ok(LossReport {
        bpr: parts.bpr,
        proto: parts.proto,
        align: parts.align,
        uniform: parts.uniform,
        infonce: parts.infonce,
        reg: parts.reg,
        total,
        lambda1: w.lambda1,
        lambda2: w.lambda2,
        lambda3: w.lambda3,
    })
}

/// Elementwise mean of a non-empty sequence of reports.
pub fn mean_report(reports: &[LossReport]) -> Option<LossReport> {
    let first = *reports.first()?;
    let n = reports.len() as f64;
    let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Some(LossReport {
        bpr: avg(|r| r.bpr),
        proto: avg(|r| r.proto),
        align: avg(|r| r.align),
        uniform: avg(|r| r.uniform),
        infonce: first.infonce.map(|_| reports.iter().map(|r| r.infonce.unwrap_or(0.0)).sum::<f64>() / n),
        reg: avg(|r| r.reg),
        total: avg(|r| r.total),
        ..first
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_adjacency, Interaction};
    use crate::propagation::{propagate, EmbeddingTable};
    use ndarray::array;

    fn stack(m: Array2<f64>, nu: usize) -> LayerStack<f64> {
        let ni = m.nrows() - nu;
        let adj = build_adjacency(&[Interaction::new(0, 0)], nu, ni).unwrap();
        propagate(&adj, &EmbeddingTable::new(m, nu).unwrap(), 0).unwrap()
    }

    fn batch(u: &[usize], p: &[usize], n: &[usize]) -> TripleBatch {
        TripleBatch { users: u.to_vec(), pos_items: p.to_vec(), neg_items: n.to_vec() }
    }

    #[test]
    fn bpr_equal_scores_is_ln2() {
        let s = stack(array![[1.0, 0.0], [0.5, 0.5], [0.5, 0.5]], 1);
        let (l, _) = bpr_loss_and_grad(&s, &batch(&[0], &[0], &[1]), Reduction::Sum).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert!((l - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn bpr_asymptotes() {
        let big = stack(array![[1.0], [100.0], [-100.0]], 1);
        let (l, _) = bpr_loss_and_grad(&big, &batch(&[0], &[0], &[1]), Reduction::Sum).unwrap();
        assert!(l < 1e-80);
        let neg = stack(array![[1.0], [-25.0], [25.0]], 1);
        let (l, g) = bpr_loss_and_grad(&neg, &batch(&[0], &[0], &[1]), Reduction::Sum).unwrap();
        assert!((l - 50.0).abs() < 1e-12, "{l}");
        assert!(g.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn bpr_mean_reduction() {
        let s = stack(array![[1.0, 0.0], [0.5, 0.5], [0.2, 0.5]], 1);
        let b = batch(&[0, 0], &[0, 1], &[1, 0]);
        let (sum, gs) = bpr_loss_and_grad(&s, &b, Reduction::Sum).unwrap();
        let (mean, gm) = bpr_loss_and_grad(&s, &b, Reduction::Mean).unwrap();
        assert!((sum / 2.0 - mean).abs() < 1e-15);
        for (a, b) in gs.values.iter().zip(&gm.values) {
            assert!((a / 2.0 - b).abs() < 1e-15);
        }
    }

    #[test]
    fn bpr_rejects_bad_indices() {
        let s = stack(array![[1.0], [1.0], [1.0]], 1);
        assert!(bpr_loss_and_grad(&s, &batch(&[1], &[0], &[1]), Reduction::Sum).is_err());
        assert!(bpr_loss_and_grad(&s, &batch(&[0], &[0], &[2]), Reduction::Sum).is_err());
    }

    #[test]
    fn reg_value() {
        let base = array![[1.0, 2.0], [0.0, 1.0], [3.0, 0.0]];
        let (l, g) = l2_reg_and_grad(&base, 1, &batch(&[0], &[0], &[1]), 0.1).unwrap();
        assert!((l - 0.05 * (5.0 + 1.0 + 9.0)).abs() < 1e-15);
        assert_eq!(g.to_dense(3), base.mapv(|v| 0.1 * v));
    }

    #[test]
    fn infonce_uniform_similarities() {
        // All rows identical: every similarity equal.
        let z = Array2::from_elem((5, 3), 1.0f64);
        let out = infonce_loss_and_grad(z.view(), z.view(), 0.7).unwrap();
        assert!((out.loss - 5.0 * 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn infonce_two_orthogonal_samples() {
        let zt = array![[1.0, 0.0], [0.0, 1.0]];
        let out = infonce_loss_and_grad(zt.view(), zt.view(), 1.0).unwrap();
        let per = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((per - 0.31326).abs() < 1e-5);
        assert!((out.loss - 2.0 * per).abs() < 1e-14);
    }

    #[test]
    fn infonce_preconditions() {
        let z = array![[1.0, 0.0]];
        assert!(matches!(infonce_loss_and_grad(z.view(), z.view(), 1.0), Err(ObjectiveError::BatchTooSmall(1))));
        let z2 = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(matches!(infonce_loss_and_grad(z2.view(), z2.view(), 0.0), Err(ObjectiveError::BadTemperature(_))));
    }

    #[test]
    fn assemble_examples() {
        let parts = LossParts { bpr: 0.7, proto: 1.0, align: 1.0, uniform: 1.0, infonce: None, reg: 0.01 };
        let r = assemble_total(&parts, LossWeights::default(), Mode::BackboneOnly).unwrap();
        assert!((r.total - 0.71).abs() < 1e-15);

        let zero = LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0 };
        let a = assemble_total(&parts, zero, Mode::Full).unwrap();
        let b = assemble_total(&parts, zero, Mode::BackboneOnly).unwrap();
        assert_eq!(a.total, b.total);

        let parts = LossParts { bpr: 0.6, proto: 1.2, align: 0.3, uniform: 0.9, infonce: None, reg: 0.0 };
        let w = LossWeights { lambda1: 1.0, lambda2: 0.5, lambda3: 0.5 };
        let r = assemble_total(&parts, w, Mode::Full).unwrap();
        assert!((r.total - 2.4).abs() < 1e-12);

        let wo_au = assemble_total(&parts, w, Mode::WoAu).unwrap();
        assert!((wo_au.total - 1.8).abs() < 1e-12);
        assert_eq!((wo_au.lambda2, wo_au.lambda3), (0.0, 0.0));

        let with_nce = LossParts { infonce: Some(2.0), ..parts };
        let r = assemble_total(&with_nce, w, Mode::WoProto).unwrap();
        assert!((r.total - (0.6 + 2.0 + 0.15 + 0.45)).abs() < 1e-12);
    }

    #[test]
    fn negative_weight_rejected() {
        let w = LossWeights { lambda1: 1.0, lambda2: -0.1, lambda3: 0.0 };
        assert!(matches!(
            assemble_total(&LossParts::default(), w, Mode::Full),
            Err(ObjectiveError::NegativeWeight { name: "lambda2", .. })
        ));
    }

    #[test]
    fn mode_parsing() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert_eq!("wo-proto".parse::<Mode>().unwrap(), Mode::WoProto);
        assert!("nope".parse::<Mode>().is_err());
    }
}
