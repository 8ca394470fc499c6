//! Small dense helpers shared by the loss kernels.

use crate::Real;
use ndarray::{Array2, ArrayView2, Axis, Zip};

/// Rows scaled to unit L2 norm, with the norms kept for the backward pass.
#[derive(Clone, Debug)]
pub struct RowNormalized<T> {
    pub unit: Array2<T>,
    pub norms: Vec<T>,
}

/// Fails with the index of the first zero-norm row.
pub fn normalize_rows<T: Real>(z: ArrayView2<'_, T>) -> Result<RowNormalized<T>, usize> {
    let mut unit = z.to_owned();
    let mut norms = Vec::with_capacity(z.nrows());
    for (r, mut row) in unit.axis_iter_mut(Axis(0)).enumerate() {
        let n = row.dot(&row).sqrt();
        if !(n > T::zero()) {
            return Err(r);
        }
        row.mapv_inplace(|v| v / n);
        norms.push(n);
    }
    Ok(RowNormalized { unit, norms })
}

/// Gradient through `z -> z / |z|`: `(g - u (u . g)) / |z|`.
pub fn normalize_backward<T: Real>(normalized: &RowNormalized<T>, grad_unit: ArrayView2<'_, T>) -> Array2<T> {
    let mut out = grad_unit.to_owned();
    Zip::from(out.axis_iter_mut(Axis(0)))
        .and(normalized.unit.axis_iter(Axis(0)))
        .and(&normalized.norms)
        .for_each(|mut g, u, &n| {
            let proj = u.dot(&g);
            Zip::from(&mut g).and(&u).for_each(|gv, &uv| *gv = (*gv - uv * proj) / n);
        });
    out
}

/// Row-wise log-softmax of `x / temperature`, max-shifted.
pub fn log_softmax_rows<T: Real>(x: ArrayView2<'_, T>, temperature: T) -> Array2<T> {
    let mut out = x.mapv(|v| v / temperature);
    for mut row in out.axis_iter_mut(Axis(0)) {
        let m = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows<T: Real>(x: ArrayView2<'_, T>) -> Vec<usize> {
    x.axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
