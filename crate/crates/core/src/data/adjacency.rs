use super::graph::check_bounds;
use super::{DataError, Interaction};

/// Symmetric bipartite propagation operator in compressed-row layout.
///
/// Rows `0..num_users` are users and rows `num_users..` are items. The entry
/// between user `u` and item `i` carries `1/sqrt(deg(u) * deg(i))`, with
/// degrees taken from the interaction list the operator was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    num_users: usize,
    num_items: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    weights: Vec<f64>,
    degrees: Vec<usize>,
}

/// Builds the operator; duplicate pairs in `interactions` are not merged.
pub fn build_adjacency(
    interactions: &[Interaction],
    num_users: usize,
    num_items: usize,
) -> Result<NormalizedAdjacency, DataError> {
    let n = num_users + num_items;
    let mut degrees = vec![0usize; n];
    for &it in interactions {
        check_bounds(it, num_users, num_items)?;
        degrees[it.user] += 1;
        degrees[num_users + it.item] += 1;
    }
    let mut row_ptr = vec![0usize; n + 1];
    for (r, d) in degrees.iter().enumerate() {
        row_ptr[r + 1] = row_ptr[r] + d;
    }
    let nnz = row_ptr[n];
    let mut col_idx = vec![0usize; nnz];
    let mut fill = row_ptr[..n].to_vec();
    for &it in interactions {
        let (u, i) = (it.user, num_users + it.item);
        col_idx[fill[u]] = i;
        fill[u] += 1;
        col_idx[fill[i]] = u;
        fill[i] += 1;
    }
    let mut weights = vec![0.0; nnz];
    for r in 0..n {
        let cols = &mut col_idx[row_ptr[r]..row_ptr[r + 1]];
        cols.sort_unstable();
        for (k, &c) in cols.iter().enumerate() {
            weights[row_ptr[r] + k] = 1.0 / ((degrees[r] * degrees[c]) as f64).sqrt();
        }
    }
    Ok(NormalizedAdjacency { num_users, num_items, row_ptr, col_idx, weights, degrees })
}

impl NormalizedAdjacency {
    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    /// Number of rows (and columns): users plus items.
    pub fn dimension(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    /// An operator without edges is valid but propagates nothing.
    pub fn is_empty(&self) -> bool {
        self.col_idx.is_empty()
    }

    pub fn degree(&self, node: usize) -> usize {
        self.degrees[node]
    }

    /// Column indices and weights of one row.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        (&self.col_idx[span.clone()], &self.weights[span])
    }

    /// Weight of entry `(r, c)`, if present.
    pub fn get(&self, r: usize, c: usize) -> Option<f64> {
        let (cols, w) = self.row(r);
        cols.binary_search(&c).ok().map(|k| w[k])
    }

    /// All entries as `(row, col, weight)` in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.dimension()).flat_map(move |r| {
            let (cols, w) = self.row(r);
            cols.iter().zip(w).map(move |(&c, &w)| (r, c, w))
        })
    }
}
