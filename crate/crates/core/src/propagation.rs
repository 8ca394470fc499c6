//! Linear graph convolution over the normalized bipartite adjacency, its
//! adjoint, inner-product scoring, and edge/node dropout views.

use crate::data::{build_adjacency, DataError, Interaction, NormalizedAdjacency};
use crate::rng::{keyed_rng, keys};
use crate::Real;
use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum PropagationError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{kind} index {index} out of range (bound {bound})")]
    IndexOutOfRange { kind: &'static str, index: usize, bound: usize },
    #[error("drop rate {0} outside [0, 1)")]
    InvalidDropRate(f64),
    #[error("view with seed {seed} dropped every edge")]
    EmptyView { seed: u64 },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Base embeddings: users in rows `0..num_users`, items after them.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<T> {
    matrix: Array2<T>,
    num_users: usize,
}

impl<T: Real> EmbeddingTable<T> {
    pub fn new(matrix: Array2<T>, num_users: usize) -> Result<Self, PropagationError> {
        if num_users > matrix.nrows() {
            return Err(PropagationError::DimensionMismatch { expected: matrix.nrows(), found: num_users });
        }
        Ok(Self { matrix, num_users })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.matrix.nrows() - self.num_users
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &Array2<T> {
        &self.matrix
    }

    pub fn matrix_mut(&mut self) -> &mut Array2<T> {
        &mut self.matrix
    }

    pub fn into_matrix(self) -> Array2<T> {
        self.matrix
    }
}

/// Every propagation layer plus their mean.
#[derive(Clone, Debug)]
pub struct LayerStack<T> {
    layers: Vec<Array2<T>>,
    final_: Array2<T>,
    num_users: usize,
}

impl<T: Real> LayerStack<T> {
    /// Layer 0 (the base table) through layer L.
    pub fn layers(&self) -> &[Array2<T>] {
        &self.layers
    }

    /// The layer mean used for scoring.
    pub fn final_embeddings(&self) -> &Array2<T> {
        &self.final_
    }

    pub fn into_final(self) -> Array2<T> {
        self.final_
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.final_.nrows() - self.num_users
    }

    pub fn user(&self, u: usize) -> ndarray::ArrayView1<'_, T> {
        self.final_.row(u)
    }

    pub fn item(&self, i: usize) -> ndarray::ArrayView1<'_, T> {
        self.final_.row(self.num_users + i)
    }
}

/// `out = A x` for a row-major dense `x`, parallel over output rows.
pub fn spmm<T: Real>(adj: &NormalizedAdjacency, x: ArrayView2<'_, T>) -> Array2<T> {
    let d = x.ncols();
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut out = Array2::<T>::zeros((adj.dimension(), d));
    if d == 0 {
        return out;
    }
    out.as_slice_mut()
        .expect("fresh array")
        .par_chunks_mut(d)
        .enumerate()
        .for_each(|(r, row)| {
            let (cols, weights) = adj.row(r);
            for (&c, &w) in cols.iter().zip(weights) {
                let w = T::of(w);
                let src = &xs[c * d..(c + 1) * d];
                for (o, &s) in row.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        });
    out
}

fn check_rows(adj: &NormalizedAdjacency, rows: usize) -> Result<(), PropagationError> {
    if adj.dimension() != rows {
        return Err(PropagationError::DimensionMismatch { expected: adj.dimension(), found: rows });
    }
    Ok(())
}

/// `e^(l+1) = A e^(l)` for `l < layers`; the result keeps every layer and
/// their `(layers + 1)`-term mean, layer 0 included.
pub fn propagate<T: Real>(
    adj: &NormalizedAdjacency,
    base: &EmbeddingTable<T>,
    layers: usize,
) -> Result<LayerStack<T>, PropagationError> {
    check_rows(adj, base.matrix.nrows())?;
    if base.num_users != adj.num_users() {
        return Err(PropagationError::DimensionMismatch { expected: adj.num_users(), found: base.num_users });
    }
    let mut stack = vec![base.matrix.clone()];
    let mut sum = base.matrix.clone();
    for l in 0..layers {
        let next = spmm(adj, stack[l].view());
        sum += &next;
        stack.push(next);
    }
    sum.mapv_inplace(|v| v * T::of(1.0 / (layers as f64 + 1.0)));
    Ok(LayerStack { layers: stack, final_: sum, num_users: base.num_users })
}

/// Pulls a gradient on the layer mean back to the base table:
/// `(1/(L+1)) * sum_l (A^T)^l g`. The operator is symmetric, so the transpose
/// product is the same row gather used by [`propagate`].
pub fn propagate_adjoint<T: Real>(
    adj: &NormalizedAdjacency,
    grad_final: ArrayView2<'_, T>,
    layers: usize,
) -> Result<Array2<T>, PropagationError> {
    check_rows(adj, grad_final.nrows())?;
    let mut acc = grad_final.to_owned();
    let mut cur = grad_final.to_owned();
    for _ in 0..layers {
        cur = spmm(adj, cur.view());
        acc += &cur;
    }
    acc.mapv_inplace(|v| v * T::of(1.0 / (layers as f64 + 1.0)));
    Ok(acc)
}

/// `score[k] = <e_users[k], e_items[k]>` on the layer-mean embeddings.
pub fn predict_scores<T: Real>(
    stack: &LayerStack<T>,
    users: &[usize],
    items: &[usize],
) -> Result<Vec<T>, PropagationError> {
    if users.len() != items.len() {
        return Err(PropagationError::DimensionMismatch { expected: users.len(), found: items.len() });
    }
    let (nu, ni) = (stack.num_users(), stack.num_items());
    users
        .iter()
        .zip(items)
        .map(|(&u, &i)| {
            if u >= nu {
                return Err(PropagationError::IndexOutOfRange { kind: "user", index: u, bound: nu });
            }
            if i >= ni {
                return Err(PropagationError::IndexOutOfRange { kind: "item", index: i, bound: ni });
            }
            Ok(stack.user(u).dot(&stack.item(i)))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Augmentation {
    /// Each edge kept independently with probability `1 - rate`.
    #[default]
    EdgeDropout,
    /// Each node kept independently with probability `1 - rate`; edges that lose
    /// either endpoint are removed.
    NodeDropout,
}

/// A perturbed copy of the training graph with its own normalized operator.
#[derive(Clone, Debug)]
pub struct GraphView {
    pub adjacency: NormalizedAdjacency,
    pub retained: Vec<Interaction>,
    pub dropped_edges: usize,
    pub seed: u64,
}

/// Edge (or node) dropout over `train`, degrees recomputed on what remains.
pub fn make_view(
    train: &[Interaction],
    num_users: usize,
    num_items: usize,
    drop_rate: f64,
    seed: u64,
    augmentation: Augmentation,
) -> Result<GraphView, PropagationError> {
    if !(0.0..1.0).contains(&drop_rate) {
        return Err(PropagationError::InvalidDropRate(drop_rate));
    }
    let keep = 1.0 - drop_rate;
    let mut rng = keyed_rng(seed, keys::VIEW, 0, 0);
    let retained: Vec<Interaction> = match augmentation {
        Augmentation::EdgeDropout => train.iter().copied().filter(|_| rng.random_bool(keep)).collect(),
        Augmentation::NodeDropout => {
            let alive: Vec<bool> = (0..num_users + num_items).map(|_| rng.random_bool(keep)).collect();
            train.iter().copied().filter(|it| alive[it.user] && alive[num_users + it.item]).collect()
        }
    };
    if retained.is_empty() && !train.is_empty() {
        return Err(PropagationError::EmptyView { seed });
    }
    let adjacency = build_adjacency(&retained, num_users, num_items)?;
    Ok(GraphView { dropped_edges: train.len() - retained.len(), adjacency, retained, seed })
}

/// Gathers rows `idx` of `m` into a new `idx.len() × D` matrix.
pub fn gather_rows<T: Real>(m: &Array2<T>, idx: &[usize]) -> Array2<T> {
    m.select(Axis(0), idx)
}

/// Adds row `k` of `g` into row `idx[k]` of `dst`.
pub fn scatter_add_rows<T: Real>(dst: &mut Array2<T>, idx: &[usize], g: ArrayView2<'_, T>) {
    for (k, &r) in idx.iter().enumerate() {
        let mut row = dst.row_mut(r);
        row += &g.row(k);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn edges(v: &[(usize, usize)]) -> Vec<Interaction> {
        v.iter().map(|&(u, i)| Interaction::new(u, i)).collect()
    }

    fn four_node() -> NormalizedAdjacency {
        build_adjacency(&edges(&[(0, 0), (0, 1), (1, 0)]), 2, 2).unwrap()
    }

    #[test]
    fn zero_layers_is_identity() {
        let base = EmbeddingTable::new(array![[1.0f64, 2.0], [3.0, -1.0], [0.5, 0.25], [7.0, 8.0]], 2).unwrap();
        let s = propagate(&four_node(), &base, 0).unwrap();
        assert_eq!(s.final_embeddings(), base.matrix());
        let g = array![[1.0f64, 0.0], [0.0, 2.0], [3.0, 3.0], [-1.0, 0.5]];
        assert_eq!(propagate_adjoint(&four_node(), g.view(), 0).unwrap(), g);
    }

    #[test]
    fn first_layer_matches_hand_computation() {
        let base = EmbeddingTable::new(array![[0.0f64, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], 2).unwrap();
        let s = propagate(&four_node(), &base, 1).unwrap();
        let l1 = &s.layers()[1];
        assert!((l1[[0, 0]] - 0.5).abs() < 1e-12);
        assert!((l1[[0, 1]] - 0.70711).abs() < 1e-5);
        assert_eq!(s.layers().len(), 2);
    }

    #[test]
    fn final_is_layer_mean() {
        let base = EmbeddingTable::new(array![[0.3f32, -0.2], [0.1, 0.9], [1.0, 0.0], [0.0, 1.0]], 2).unwrap();
        let s = propagate(&four_node(), &base, 3).unwrap();
        let mut mean = Array2::<f32>::zeros((4, 2));
        for l in s.layers() {
            mean += l;
        }
        mean /= 4.0;
        for (a, b) in mean.iter().zip(s.final_embeddings()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let base = EmbeddingTable::new(Array2::<f64>::zeros((3, 2)), 2).unwrap();
        assert!(matches!(propagate(&four_node(), &base, 1), Err(PropagationError::DimensionMismatch { .. })));
        let g = Array2::<f64>::zeros((5, 2));
        assert!(propagate_adjoint(&four_node(), g.view(), 1).is_err());
    }

    #[test]
    fn scores() {
        let base = EmbeddingTable::new(array![[1.0f64, 2.0], [0.0, 0.0], [3.0, -1.0], [0.0, 0.0]], 2).unwrap();
        let s = propagate(&four_node(), &base, 0).unwrap();
        assert_eq!(predict_scores(&s, &[0, 1], &[0, 1]).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(predict_scores(&s, &[2], &[0]), Err(PropagationError::IndexOutOfRange { kind: "user", .. })));
        assert!(matches!(predict_scores(&s, &[0], &[2]), Err(PropagationError::IndexOutOfRange { kind: "item", .. })));
        assert!(predict_scores(&s, &[0, 1], &[0]).is_err());
    }

    #[test]
    fn view_without_dropout_is_original() {
        let train = edges(&[(0, 0), (0, 1), (1, 0), (1, 2)]);
        let v = make_view(&train, 2, 3, 0.0, 5, Augmentation::EdgeDropout).unwrap();
        assert_eq!(v.adjacency, build_adjacency(&train, 2, 3).unwrap());
        assert_eq!(v.dropped_edges, 0);
    }

    #[test]
    fn view_is_deterministic_in_seed() {
        let train: Vec<_> = (0..200).map(|k| Interaction::new(k % 10, k / 10)).collect();
        let a = make_view(&train, 10, 20, 0.3, 42, Augmentation::EdgeDropout).unwrap();
        let b = make_view(&train, 10, 20, 0.3, 42, Augmentation::EdgeDropout).unwrap();
        let c = make_view(&train, 10, 20, 0.3, 43, Augmentation::EdgeDropout).unwrap();
        assert_eq!(a.retained, b.retained);
        assert_ne!(a.retained, c.retained);
        assert_eq!(a.dropped_edges, train.len() - a.retained.len());
        let n = make_view(&train, 10, 20, 0.3, 42, Augmentation::NodeDropout).unwrap();
        assert_eq!(n.dropped_edges, train.len() - n.retained.len());
    }

    #[test]
    fn invalid_drop_rates() {
        let train = edges(&[(0, 0)]);
        assert!(matches!(make_view(&train, 1, 1, 1.0, 0, Augmentation::EdgeDropout), Err(PropagationError::InvalidDropRate(_))));
        assert!(make_view(&train, 1, 1, -0.1, 0, Augmentation::EdgeDropout).is_err());
    }

    #[test]
    fn dropping_everything_is_an_error() {
        let train = edges(&[(0, 0)]);
        let failing = (0..200).find_map(|s| make_view(&train, 1, 1, 0.99, s, Augmentation::EdgeDropout).err());
        assert!(matches!(failing, Some(PropagationError::EmptyView { .. })));
    }
}
