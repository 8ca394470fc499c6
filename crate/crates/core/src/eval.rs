//! Full-catalog top-K ranking metrics.

use crate::data::{DatasetSplit, Interaction, NormalizedAdjacency};
use crate::optim::ModelState;
use crate::propagation::{propagate, LayerStack, PropagationError};
use crate::Real;
use ndarray::{s, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::time::Instant;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AtK {
    pub recall: f64,
    pub ndcg: f64,
}

/// Averages over users with at least one relevant item.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub at: BTreeMap<usize, AtK>,
    pub users_evaluated: usize,
}

impl RankingMetrics {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.at.get(&k).map(|m| m.recall)
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.at.get(&k).map(|m| m.ndcg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Valid,
    Test,
}

impl std::fmt::Display for EvalSplit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalSplit::Valid => "valid",
            EvalSplit::Test => "test",
        })
    }
}

impl std::str::FromStr for EvalSplit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "valid" | "validation" => Ok(EvalSplit::Valid),
            "test" => Ok(EvalSplit::Test),
            other => Err(format!("unknown split `{other}` (valid, test)")),
        }
    }
}

/// One line of the evaluation log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub split: EvalSplit,
    pub metrics: BTreeMap<usize, AtK>,
    pub users_evaluated: usize,
    pub wall_time: f64,
}

fn by_score_then_index(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Items for `user` in descending score order, ties by ascending index,
/// `exclusions` removed.
pub fn rank_items<T: Real>(stack: &LayerStack<T>, user: usize, exclusions: &[usize]) -> Vec<usize> {
    let eu = stack.user(user);
    let scores: Vec<f64> = (0..stack.num_items()).map(|i| eu.dot(&stack.item(i)).as_f64()).collect();
    let mut excluded = vec![false; scores.len()];
    for &i in exclusions {
        excluded[i] = true;
    }
    top_k(&scores, &excluded, scores.len())
}

/// The best `k` non-excluded indices of `scores`, in rank order.
pub fn top_k(scores: &[f64], excluded: &[bool], k: usize) -> Vec<usize> {
    let mut cand: Vec<usize> = (0..scores.len()).filter(|&i| !excluded[i]).collect();
    let cmp = by_score_then_index(scores);
    if k < cand.len() {
        if k == 0 {
            return Vec::new();
        }
        cand.select_nth_unstable_by(k - 1, &cmp);
        cand.truncate(k);
    }
    cand.sort_unstable_by(&cmp);
    cand
}

/// Recall@K and NDCG@K of one ranking; `None` when nothing is relevant.
/// `relevant` must be free of duplicates.
pub fn metrics_at_k(ranked: &[usize], relevant: &[usize], ks: &[usize]) -> Option<BTreeMap<usize, AtK>> {
    if relevant.is_empty() {
        return None;
    }
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let hits: Vec<bool> = ranked.iter().take(max_k).map(|i| relevant.contains(i)).collect();
    let mut out = BTreeMap::new();
    for &k in ks {
        let mut found = 0usize;
        let mut dcg = 0.0;
        for (r, &h) in hits.iter().take(k).enumerate() {
            if h {
                found += 1;
                dcg += 1.0 / ((r + 2) as f64).log2();
            }
        }
        let idcg: f64 = (0..k.min(relevant.len())).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
        let ndcg = if idcg > 0.0 { dcg / idcg } else { 0.0 };
        out.insert(k, AtK { recall: found as f64 / relevant.len() as f64, ndcg });
    }
    Some(out)
}

/// Per-user ground truth and exclusions for one evaluation pass.
#[derive(Clone, Debug, Default)]
pub struct EvalTargets {
    pub relevant: Vec<Vec<usize>>,
    pub excluded: Vec<Vec<usize>>,
}

impl EvalTargets {
    pub fn new(num_users: usize, relevant: &[Interaction], excluded: &[&[Interaction]]) -> Self {
        let mut r = vec![Vec::new(); num_users];
        for it in relevant {
            r[it.user].push(it.item);
        }
        let mut x = vec![Vec::new(); num_users];
        for block in excluded {
            for it in *block {
                x[it.user].push(it.item);
            }
        }
        for v in r.iter_mut().chain(x.iter_mut()) {
            v.sort_unstable();
            v.dedup();
        }
        Self { relevant: r, excluded: x }
    }
}

const USER_BLOCK: usize = 256;

/// Metrics of `stack` against `targets`, averaged in user order.
pub fn evaluate_stack<T: Real>(stack: &LayerStack<T>, targets: &EvalTargets, ks: &[usize]) -> RankingMetrics {
    let nu = stack.num_users();
    let fin = stack.final_embeddings();
    let users_m = fin.slice(s![..nu, ..]);
    let items_m = fin.slice(s![nu.., ..]);
    let max_k = ks.iter().copied().max().unwrap_or(0);
    let starts: Vec<usize> = (0..nu).step_by(USER_BLOCK).collect();
    let per_user: Vec<Option<BTreeMap<usize, AtK>>> = starts
        .par_iter()
        .flat_map_iter(|&start| {
            let end = (start + USER_BLOCK).min(nu);
            let scores = users_m.slice(s![start..end, ..]).dot(&items_m.t());
            let mut excluded = vec![false; items_m.nrows()];
            let mut out = Vec::with_capacity(end - start);
            for (row, u) in scores.axis_iter(Axis(0)).zip(start..end) {
                let rel = targets.relevant.get(u).map_or(&[][..], |v| v.as_slice());
                if rel.is_empty() {
                    out.push(None);
                    continue;
                }
                let ex = targets.excluded.get(u).map_or(&[][..], |v| v.as_slice());
                for &i in ex {
                    excluded[i] = true;
                }
                let sc: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
                let ranked = top_k(&sc, &excluded, max_k);
                for &i in ex {
                    excluded[i] = false;
                }
                out.push(metrics_at_k(&ranked, rel, ks));
            }
            out
        })
        .collect();
    let mut sums: BTreeMap<usize, AtK> = ks.iter().map(|&k| (k, AtK::default())).collect();
    let mut n = 0usize;
    for m in per_user.into_iter().flatten() {
        n += 1;
        for (k, v) in m {
            let acc = sums.get_mut(&k).expect("same ks");
            acc.recall += v.recall;
            acc.ndcg += v.ndcg;
        }
    }
    if n > 0 {
        for v in sums.values_mut() {
            v.recall /= n as f64;
            v.ndcg /= n as f64;
        }
    }
    RankingMetrics { at: sums, users_evaluated: n }
}

/// Targets for `split`: validation excludes training pairs; test excludes
/// training pairs and, when `exclude_valid_on_test`, validation pairs too.
pub fn split_targets(num_users: usize, split: &DatasetSplit, which: EvalSplit, exclude_valid_on_test: bool) -> EvalTargets {
    match which {
        EvalSplit::Valid => EvalTargets::new(num_users, &split.valid, &[&split.train]),
        EvalSplit::Test if exclude_valid_on_test => EvalTargets::new(num_users, &split.test, &[&split.train, &split.valid]),
        EvalSplit::Test => EvalTargets::new(num_users, &split.test, &[&split.train]),
    }
}

/// Propagates once over the clean training graph and scores `which`.
pub fn evaluate_split<T: Real>(
    params: &ModelState<T>,
    adjacency: &NormalizedAdjacency,
    layers: usize,
    targets: &EvalTargets,
    ks: &[usize],
) -> Result<RankingMetrics, PropagationError> {
    let stack = propagate(adjacency, &params.embeddings, layers)?;
    Ok(evaluate_stack(&stack, targets, ks))
}

/// [`evaluate_split`] wrapped into a timed log record.
pub fn eval_record<T: Real>(
    params: &ModelState<T>,
    adjacency: &NormalizedAdjacency,
    layers: usize,
    targets: &EvalTargets,
    ks: &[usize],
    epoch: usize,
    split: EvalSplit,
) -> Result<(EvalRecord, RankingMetrics), PropagationError> {
    let t0 = Instant::now();
    let m = evaluate_split(params, adjacency, layers, targets, ks)?;
    let rec = EvalRecord {
        epoch,
        split,
        metrics: m.at.clone(),
        users_evaluated: m.users_evaluated,
        wall_time: t0.elapsed().as_secs_f64(),
    };
    Ok((rec, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_adjacency;
    use crate::propagation::EmbeddingTable;
    use ndarray::array;

    fn stack(m: ndarray::Array2<f64>, nu: usize) -> LayerStack<f64> {
        let ni = m.nrows() - nu;
        propagate(&build_adjacency(&[], nu, ni).unwrap(), &EmbeddingTable::new(m, nu).unwrap(), 0).unwrap()
    }

    #[test]
    fn ranks_by_score() {
        let s = stack(array![[1.0], [0.9], [0.1]], 1);
        assert_eq!(rank_items(&s, 0, &[]), vec![0, 1]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let s = stack(array![[1.0], [0.5], [0.5], [0.5]], 1);
        assert_eq!(rank_items(&s, 0, &[]), vec![0, 1, 2]);
        assert_eq!(rank_items(&s, 0, &[1]), vec![0, 2]);
    }

    #[test]
    fn single_hit_at_rank_two() {
        let m = metrics_at_k(&[1, 3, 2], &[3], &[3]).unwrap();
        assert_eq!(m[&3].recall, 1.0);
        assert!((m[&3].ndcg - 0.63093).abs() < 1e-5);
    }

    #[test]
    fn ideal_ranking_is_perfect() {
        let m = metrics_at_k(&[4, 2, 0, 1, 3], &[2, 4], &[2, 3, 5]).unwrap();
        for v in m.values() {
            assert_eq!((v.recall, v.ndcg), (1.0, 1.0));
        }
    }

    #[test]
    fn miss_scores_zero() {
        let m = metrics_at_k(&[0, 1, 2, 3], &[3], &[2]).unwrap();
        assert_eq!((m[&2].recall, m[&2].ndcg), (0.0, 0.0));
        assert!(metrics_at_k(&[0], &[], &[1]).is_none());
    }

    #[test]
    fn top_k_agrees_with_full_sort() {
        let scores = [0.3, 0.9, 0.3, -1.0, 0.9, 0.0];
        let excluded = [false, false, false, false, true, false];
        let full = top_k(&scores, &excluded, 6);
        assert_eq!(full, vec![1, 0, 2, 5, 3]);
        assert_eq!(top_k(&scores, &excluded, 2), vec![1, 0]);
    }

    #[test]
    fn users_without_relevance_are_skipped() {
        let s = stack(array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]], 2);
        let val = [Interaction { user: 0, item: 0 }];
        let t = EvalTargets::new(2, &val, &[]);
        let m = evaluate_stack(&s, &t, &[1]);
        assert_eq!(m.users_evaluated, 1);
        assert_eq!(m.recall(1), Some(1.0));
    }
}
