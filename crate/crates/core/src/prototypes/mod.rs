//! Prototype banks, balanced transport assignment, the swapped-prediction
//! loss, and prototype alignment / uniformity, each with closed-form
//! gradients.

mod geometry;
mod sinkhorn;
mod swapped;

pub use geometry::{alignment_loss_and_grad, uniformity_loss_and_grad, UniformityOptions, UniformityPairs};
pub use sinkhorn::{
    assignments, sinkhorn_transport, transport_entropy, transport_targets, AssignmentResult, SinkhornConfig,
    TransportPlan,
};
pub use swapped::{
    naive_proto_loss, swapped_loss_and_grad, swapped_loss_with_targets, swapped_targets, SwapParams,
    SwappedOutput,
};

use crate::linalg::{argmax_rows, normalize_rows};
use crate::Real;
use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum PrototypeError {
    #[error("embedding dimension {found} does not match bank dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("row {row} has zero norm")]
    ZeroNorm { row: usize },
    #[error("prototype {row} collapsed to zero norm")]
    CollapsedPrototype { row: usize },
    #[error("non-finite score at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("prototype index {index} out of range (K = {k})")]
    InvalidIndex { index: usize, k: usize },
    #[error("a prototype bank needs at least 2 rows, got {0}")]
    TooFewPrototypes(usize),
    #[error("assignment lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    User,
    Item,
}

/// `K × D` trainable prototype vectors for one entity kind.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank<T> {
    matrix: Array2<T>,
    kind: EntityKind,
}

impl<T: Real> PrototypeBank<T> {
    pub fn new(matrix: Array2<T>, kind: EntityKind) -> Result<Self, PrototypeError> {
        if matrix.nrows() < 2 {
            return Err(PrototypeError::TooFewPrototypes(matrix.nrows()));
        }
        Ok(Self { matrix, kind })
    }

    /// Standard-normal entries, then unit rows.
    pub fn random<R: Rng>(k: usize, dim: usize, kind: EntityKind, rng: &mut R) -> Result<Self, PrototypeError> {
        let m = Array2::from_shape_simple_fn((k, dim), || T::of(rng.sample::<f64, _>(StandardNormal)));
        renormalize(&Self::new(m, kind)?)
    }

    pub fn k(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn kind(&self) -> EntityKind {
        self.kind
    }

    pub fn matrix(&self) -> &Array2<T> {
        &self.matrix
    }

    pub fn matrix_mut(&mut self) -> &mut Array2<T> {
        &mut self.matrix
    }

    /// Scales every prototype to unit norm in place.
    pub fn renormalize_in_place(&mut self) -> Result<(), PrototypeError> {
        for (row, mut c) in self.matrix.axis_iter_mut(Axis(0)).enumerate() {
            let n = c.dot(&c).sqrt();
            if !(n > T::zero()) {
                return Err(PrototypeError::CollapsedPrototype { row });
            }
            c.mapv_inplace(|v| v / n);
        }
        Ok(())
    }
}

/// A copy of `bank` with every prototype at unit L2 norm.
pub fn renormalize<T: Real>(bank: &PrototypeBank<T>) -> Result<PrototypeBank<T>, PrototypeError> {
    let mut out = bank.clone();
    out.renormalize_in_place()?;
    Ok(out)
}

/// `B × K` inner products between (optionally unit-normalized) embeddings
/// and the prototypes.
pub fn compute_scores<T: Real>(
    embeddings: ArrayView2<'_, T>,
    bank: &PrototypeBank<T>,
    normalize_inputs: bool,
) -> Result<Array2<T>, PrototypeError> {
    if embeddings.ncols() != bank.dim() {
        return Err(PrototypeError::DimensionMismatch { expected: bank.dim(), found: embeddings.ncols() });
    }
    if normalize_inputs {
        let z = normalize_rows(embeddings).map_err(|row| PrototypeError::ZeroNorm { row })?;
        Ok(z.unit.dot(&bank.matrix.t()))
    } else {
        Ok(embeddings.dot(&bank.matrix.t()))
    }
}

/// Per-row argmax of a `B × K` score matrix, ties to the lowest index.
pub fn hard_assign<T: Real>(scores: ArrayView2<'_, T>) -> Vec<usize> {
    argmax_rows(scores)
}

pub(crate) fn positive(name: &'static str, value: f64) -> Result<(), PrototypeError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(PrototypeError::NonPositive { name, value })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn renormalize_345() {
        let b = PrototypeBank::new(array![[3.0f64, 4.0], [0.0, 2.0]], EntityKind::User).unwrap();
        let r = renormalize(&b).unwrap();
        assert!((r.matrix()[[0, 0]] - 0.6).abs() < 1e-15);
        assert!((r.matrix()[[0, 1]] - 0.8).abs() < 1e-15);
        let again = renormalize(&r).unwrap();
        for (a, b) in again.matrix().iter().zip(r.matrix()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn collapsed_prototype_is_an_error() {
        let b = PrototypeBank::new(array![[1.0f64, 0.0], [0.0, 0.0]], EntityKind::Item).unwrap();
        assert!(matches!(renormalize(&b), Err(PrototypeError::CollapsedPrototype { row: 1 })));
    }

    #[test]
    fn bank_needs_two_rows() {
        assert!(matches!(
            PrototypeBank::new(array![[1.0f64, 0.0]], EntityKind::User),
            Err(PrototypeError::TooFewPrototypes(1))
        ));
    }

    #[test]
    fn random_bank_is_unit_norm() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let b = PrototypeBank::<f32>::random(50, 16, EntityKind::User, &mut rng).unwrap();
        for row in b.matrix().rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn scores_of_own_prototype_peak_at_one() {
        let b = PrototypeBank::new(array![[1.0f64, 0.0], [0.0, 1.0], [0.6, 0.8]], EntityKind::User).unwrap();
        let z = array![[0.6f64, 0.8]];
        let s = compute_scores(z.view(), &b, false).unwrap();
        assert!((s[[0, 2]] - 1.0).abs() < 1e-15);
        assert!(s.iter().all(|&v| v <= 1.0 + 1e-15));
        let orth = array![[0.0f64, 5.0]];
        assert_eq!(compute_scores(orth.view(), &b, true).unwrap()[[0, 0]], 0.0);
    }

    #[test]
    fn zero_input_rejected_under_normalization() {
        let b = PrototypeBank::new(array![[1.0f64, 0.0], [0.0, 1.0]], EntityKind::User).unwrap();
        let z = array![[0.0f64, 0.0]];
        assert!(matches!(compute_scores(z.view(), &b, true), Err(PrototypeError::ZeroNorm { row: 0 })));
        assert!(compute_scores(z.view(), &b, false).is_ok());
        assert!(compute_scores(array![[1.0f64, 0.0, 0.0]].view(), &b, false).is_err());
    }

    #[test]
    fn hard_assign_examples() {
        assert_eq!(hard_assign(array![[0.1f64, 0.9]].view()), vec![1]);
        assert_eq!(hard_assign(array![[0.5f64, 0.5]].view()), vec![0]);
    }
}
