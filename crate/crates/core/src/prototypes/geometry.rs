use super::{positive, PrototypeBank, PrototypeError};
use crate::rng::{keyed_rng, keys};
use crate::Real;
use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// `mean_b |c[assign_t[b]] - c[assign_s[b]]|^alpha` and its gradient on the
/// bank. Assignments are constants; a pair on the same prototype contributes
/// nothing, and neither does a pair at zero distance.
pub fn alignment_loss_and_grad<T: Real>(
    bank: &PrototypeBank<T>,
    assign_t: &[usize],
    assign_s: &[usize],
    alpha: f64,
) -> Result<(f64, Array2<T>), PrototypeError> {
    positive("alpha", alpha)?;
    if assign_t.len() != assign_s.len() {
        return Err(PrototypeError::LengthMismatch(assign_t.len(), assign_s.len()));
    }
    let k = bank.k();
    if let Some(&bad) = assign_t.iter().chain(assign_s).find(|&&a| a >= k) {
        return Err(PrototypeError::InvalidIndex { index: bad, k });
    }
    let c = bank.matrix();
    let mut grad = Array2::<T>::zeros(c.raw_dim());
    let n = assign_t.len();
    if n == 0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    for (&t, &s) in assign_t.iter().zip(assign_s) {
        if t == s {
            continue;
        }
        let diff = &c.row(t) - &c.row(s);
        let dist = diff.dot(&diff).as_f64().sqrt();
        if dist == 0.0 {
            continue;
        }
        loss += dist.powf(alpha);
        let f = T::of(alpha * dist.powf(alpha - 2.0) / n as f64);
        grad.row_mut(t).scaled_add(f, &diff);
        grad.row_mut(s).scaled_add(-f, &diff);
    }
    Ok((loss / n as f64, grad))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum UniformityPairs {
    /// Every unordered pair of distinct prototypes.
    #[default]
    All,
    /// `count` pairs drawn uniformly, with replacement, from a seeded stream.
    Sampled { count: usize, seed: u64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UniformityOptions {
    pub pairs: UniformityPairs,
    /// Take the logarithm of the mean potential.
    pub log: bool,
}

/// Mean Gaussian potential `exp(-beta |c_t - c_s|^2)` over distinct
/// prototype pairs, and its gradient.
pub fn uniformity_loss_and_grad<T: Real>(
    bank: &PrototypeBank<T>,
    beta: f64,
    options: &UniformityOptions,
) -> Result<(f64, Array2<T>), PrototypeError> {
    positive("beta", beta)?;
    let k = bank.k();
    if k < 2 {
        return Err(PrototypeError::TooFewPrototypes(k));
    }
    let (mean, mut grad) = match options.pairs {
        UniformityPairs::All => all_pairs(bank.matrix(), beta),
        UniformityPairs::Sampled { count, seed } => sampled_pairs(bank.matrix(), beta, count, seed),
    };
    if options.log {
        let inv = T::of(1.0 / mean);
        grad.mapv_inplace(|g| g * inv);
        Ok((mean.ln(), grad))
    } else {
        Ok((mean, grad))
    }
}

fn all_pairs<T: Real>(c: &Array2<T>, beta: f64) -> (f64, Array2<T>) {
    let k = c.nrows();
    let gram = c.dot(&c.t());
    let sq: Vec<T> = gram.diag().to_vec();
    let b = T::of(beta);
    let mut w = gram;
    for ((t, s), v) in w.indexed_iter_mut() {
        *v = if t == s {
            T::zero()
        } else {
            let d2 = (sq[t] + sq[s] - T::of(2.0) * *v).max(T::zero());
            (-b * d2).exp()
        };
    }
    let pairs = (k * (k - 1) / 2) as f64;
    let total: f64 = w.iter().map(|v| v.as_f64()).sum::<f64>() / 2.0;
    // d/dc_t = -2 beta / P * (rowsum(W)_t c_t - (W C)_t)
    let row_sums = w.sum_axis(Axis(1));
    let mut grad = w.dot(c);
    let f = T::of(-2.0 * beta / pairs);
    for ((mut g, ct), &r) in grad.axis_iter_mut(Axis(0)).zip(c.axis_iter(Axis(0))).zip(&row_sums) {
        ndarray::Zip::from(&mut g).and(&ct).for_each(|gv, &cv| *gv = f * (r * cv - *gv));
    }
    (total / pairs, grad)
}

fn sampled_pairs<T: Real>(c: &Array2<T>, beta: f64, count: usize, seed: u64) -> (f64, Array2<T>) {
    let k = c.nrows();
    let mut grad = Array2::<T>::zeros(c.raw_dim());
    if count == 0 {
        return (0.0, grad);
    }
    let mut rng = keyed_rng(seed, keys::UNIFORMITY_PAIRS, 0, 0);
    let mut total = 0.0;
    let f = -2.0 * beta / count as f64;
    for _ in 0..count {
        let t = rng.random_range(0..k);
        let mut s = rng.random_range(0..k - 1);
        if s >= t {
            s += 1;
        }
        let diff = &c.row(t) - &c.row(s);
        let w = (-beta * diff.dot(&diff).as_f64()).exp();
        total += w;
        grad.row_mut(t).scaled_add(T::of(f * w), &diff);
        grad.row_mut(s).scaled_add(T::of(-f * w), &diff);
    }
    (total / count as f64, grad)
}
