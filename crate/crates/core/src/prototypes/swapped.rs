use super::{compute_scores, positive, PrototypeBank, PrototypeError, SinkhornConfig};
use super::sinkhorn::{sinkhorn_transport, transport_targets};
use crate::linalg::{argmax_rows, log_softmax_rows, normalize_backward, normalize_rows, RowNormalized};
use crate::Real;
use ndarray::{Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapParams {
    pub tau: f64,
    pub sinkhorn: SinkhornConfig,
    pub normalize_inputs: bool,
}

impl Default for SwapParams {
    fn default() -> Self {
        Self { tau: 0.1, sinkhorn: SinkhornConfig::default(), normalize_inputs: true }
    }
}

#[derive(Clone, Debug)]
pub struct SwappedOutput<T> {
    pub loss: f64,
    pub grad_z_t: Array2<T>,
    pub grad_z_s: Array2<T>,
    pub grad_bank: Array2<T>,
    /// Argmax prototype per sample in each view.
    pub assign_t: Vec<usize>,
    pub assign_s: Vec<usize>,
}

struct ViewInputs<T> {
    normalized: Option<RowNormalized<T>>,
    scores: Array2<T>,
}

impl<T: Real> ViewInputs<T> {
    fn new(z: ArrayView2<'_, T>, bank: &PrototypeBank<T>, normalize: bool) -> Result<Self, PrototypeError> {
        if z.ncols() != bank.dim() {
            return Err(PrototypeError::DimensionMismatch { expected: bank.dim(), found: z.ncols() });
        }
        if normalize {
            let n = normalize_rows(z).map_err(|row| PrototypeError::ZeroNorm { row })?;
            let scores = n.unit.dot(&bank.matrix().t());
            Ok(Self { normalized: Some(n), scores })
        } else {
            Ok(Self { normalized: None, scores: z.dot(&bank.matrix().t()) })
        }
    }

    fn inputs<'a>(&'a self, raw: ArrayView2<'a, T>) -> ArrayView2<'a, T> {
        self.normalized.as_ref().map_or(raw, |n| n.unit.view())
    }
}

/// Balanced transport targets `(q_t, q_s)` for the two views, each `B × K`
/// with unit rows. These are constants for the gradient.
pub fn swapped_targets<T: Real>(
    z_t: ArrayView2<'_, T>,
    z_s: ArrayView2<'_, T>,
    bank: &PrototypeBank<T>,
    params: &SwapParams,
) -> Result<(Array2<T>, Array2<T>), PrototypeError> {
    let st = compute_scores(z_t, bank, params.normalize_inputs)?;
    let ss = compute_scores(z_s, bank, params.normalize_inputs)?;
    let qt = transport_targets(&sinkhorn_transport(st.t(), &params.sinkhorn)?);
    let qs = transport_targets(&sinkhorn_transport(ss.t(), &params.sinkhorn)?);
    Ok((qt, qs))
}

/// Swapped prediction with targets from Sinkhorn, treated as constants.
pub fn swapped_loss_and_grad<T: Real>(
    z_t: ArrayView2<'_, T>,
    z_s: ArrayView2<'_, T>,
    bank: &PrototypeBank<T>,
    params: &SwapParams,
) -> Result<SwappedOutput<T>, PrototypeError> {
    let (qt, qs) = swapped_targets(z_t, z_s, bank, params)?;
    swapped_loss_with_targets(z_t, z_s, bank, qt.view(), qs.view(), params)
}

/// `mean_b [ -sum_k q_s log p_t - sum_k q_t log p_s ] / 2` with
/// `p = softmax(scores / tau)`, and its gradient for fixed targets.
pub fn swapped_loss_with_targets<T: Real>(
    z_t: ArrayView2<'_, T>,
    z_s: ArrayView2<'_, T>,
    bank: &PrototypeBank<T>,
    q_t: ArrayView2<'_, T>,
    q_s: ArrayView2<'_, T>,
    params: &SwapParams,
) -> Result<SwappedOutput<T>, PrototypeError> {
    positive("tau", params.tau)?;
    if z_t.dim() != z_s.dim() {
        return Err(PrototypeError::LengthMismatch(z_t.nrows(), z_s.nrows()));
    }
    let vt = ViewInputs::new(z_t, bank, params.normalize_inputs)?;
    let vs = ViewInputs::new(z_s, bank, params.normalize_inputs)?;
    let b = z_t.nrows();
    let tau = T::of(params.tau);
    let logp_t = log_softmax_rows(vt.scores.view(), tau);
    let logp_s = log_softmax_rows(vs.scores.view(), tau);

    let cross = |q: ArrayView2<'_, T>, logp: &Array2<T>| -> f64 {
        Zip::from(&q).and(logp).fold(0.0, |acc, &qv, &lp| acc - qv.as_f64() * lp.as_f64())
    };
    let loss = if b == 0 { 0.0 } else { (cross(q_s, &logp_t) + cross(q_t, &logp_s)) / (2.0 * b as f64) };

    // d loss / d score = (p * sum(q) - q) / (2 B tau), per view.
    let scale = if b == 0 { T::zero() } else { T::of(1.0 / (2.0 * b as f64 * params.tau)) };
    let score_grad = |logp: &Array2<T>, q: ArrayView2<'_, T>| -> Array2<T> {
        let mut g = logp.mapv(|v| v.exp());
        Zip::from(g.axis_iter_mut(Axis(0))).and(q.axis_iter(Axis(0))).for_each(|mut gr, qr| {
            let mass = qr.sum();
            Zip::from(&mut gr).and(&qr).for_each(|p, &qv| *p = (*p * mass - qv) * scale);
        });
        g
    };
    let gs_t = score_grad(&logp_t, q_s);
    let gs_s = score_grad(&logp_s, q_t);

    let c = bank.matrix();
    let in_t = vt.inputs(z_t);
    let in_s = vs.inputs(z_s);
    let mut grad_bank = gs_t.t().dot(&in_t);
    grad_bank += &gs_s.t().dot(&in_s);
    let gu_t = gs_t.dot(c);
    let gu_s = gs_s.dot(c);
    let (grad_z_t, grad_z_s) = match (&vt.normalized, &vs.normalized) {
        (Some(nt), Some(ns)) => (normalize_backward(nt, gu_t.view()), normalize_backward(ns, gu_s.view())),
        _ => (gu_t, gu_s),
    };
    Ok(SwappedOutput {
        loss,
        grad_z_t,
        grad_z_s,
        grad_bank,
        assign_t: argmax_rows(vt.scores.view()),
        assign_s: argmax_rows(vs.scores.view()),
    })
}

/// Instance-to-prototype InfoNCE over raw inner products: the sum over
/// samples of `-log softmax(z . C / tau)[assigned]`. Diagnostic only.
pub fn naive_proto_loss<T: Real>(
    embeddings: ArrayView2<'_, T>,
    bank: &PrototypeBank<T>,
    assignment: &[usize],
    tau: f64,
) -> Result<f64, PrototypeError> {
    positive("tau", tau)?;
    if assignment.len() != embeddings.nrows() {
        return Err(PrototypeError::LengthMismatch(assignment.len(), embeddings.nrows()));
    }
    if let Some(&bad) = assignment.iter().find(|&&a| a >= bank.k()) {
        return Err(PrototypeError::InvalidIndex { index: bad, k: bank.k() });
    }
    let scores = compute_scores(embeddings, bank, false)?;
    let logp = log_softmax_rows(scores.view(), T::of(tau));
    Ok(assignment.iter().enumerate().map(|(b, &a)| -logp[[b, a]].as_f64()).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prototypes::EntityKind;
    use ndarray::array;

    fn bank(m: Array2<f64>) -> PrototypeBank<f64> {
        PrototypeBank::new(m, EntityKind::User).unwrap()
    }

    #[test]
    fn uniform_targets_and_probs_give_log_k() {
        let c = bank(Array2::eye(4));
        // Orthogonal to every prototype: scores all zero.
        let z = array![[0.0, 0.0, 0.0, 0.0, 1.0], [0.0, 0.0, 0.0, 0.0, 2.0]];
        let c5 = bank(ndarray::concatenate![Axis(1), c.matrix().clone(), Array2::zeros((4, 1))]);
        let out = swapped_loss_and_grad(z.view(), z.view(), &c5, &SwapParams::default()).unwrap();
        assert!((out.loss - 4f64.ln()).abs() < 1e-12);
        assert!((out.loss - 1.38629).abs() < 1e-5);
    }

    #[test]
    fn sharper_temperature_lowers_loss_on_matched_targets() {
        let c = bank(Array2::eye(3));
        let z = c.matrix().clone();
        let q = Array2::<f64>::eye(3);
        let losses: Vec<f64> = [1.0, 0.3, 0.1]
            .iter()
            .map(|&tau| {
                let p = SwapParams { tau, ..SwapParams::default() };
                swapped_loss_with_targets(z.view(), z.view(), &c, q.view(), q.view(), &p).unwrap().loss
            })
            .collect();
        assert!(losses[0] > losses[1] && losses[1] > losses[2], "{losses:?}");
        assert!(losses[2] < 1e-3);
    }

    #[test]
    fn bad_tau_rejected() {
        let c = bank(Array2::eye(2));
        let p = SwapParams { tau: 0.0, ..SwapParams::default() };
        assert!(swapped_loss_and_grad(c.matrix().view(), c.matrix().view(), &c, &p).is_err());
        assert!(naive_proto_loss(c.matrix().view(), &c, &[0, 1], -1.0).is_err());
    }

    #[test]
    fn naive_loss_closed_form() {
        let c = bank(Array2::eye(2));
        let z = array![[1.0, 0.0]];
        let l = naive_proto_loss(z.view(), &c, &[0], 1.0).unwrap();
        assert!((l - 0.31326).abs() < 1e-5);
        assert!((l - (-(1f64.exp() / (1f64.exp() + 1.0)).ln())).abs() < 1e-14);
        assert!(matches!(naive_proto_loss(z.view(), &c, &[2], 1.0), Err(PrototypeError::InvalidIndex { .. })));
    }

    #[test]
    fn naive_loss_uniform_scores() {
        let c = bank(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let z = array![[1.0, 1.0, 1.0], [-2.0, -2.0, -2.0]];
        let l = naive_proto_loss(z.view(), &c, &[1, 2], 0.5).unwrap();
        assert!((l - 2.0 * 3f64.ln()).abs() < 1e-12);
    }
}
