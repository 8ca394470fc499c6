use ndarray::Array2;
use proptest::prelude::*;
use protoau::data::{build_adjacency, Interaction};
use protoau::eval::{evaluate_stack, metrics_at_k, rank_items, EvalTargets};
use protoau::propagation::{propagate, EmbeddingTable, LayerStack};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

fn flat(m: Array2<f64>, nu: usize) -> LayerStack<f64> {
    let ni = m.nrows() - nu;
    propagate(&build_adjacency(&[], nu, ni).unwrap(), &EmbeddingTable::new(m, nu).unwrap(), 0).unwrap()
}

struct Instance {
    stack: LayerStack<f64>,
    relevant: Vec<Interaction>,
    excluded: Vec<Interaction>,
    nu: usize,
    ni: usize,
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nu = rng.random_range(1..8);
    let ni = rng.random_range(2..30);
    let d = rng.random_range(1..5);
    // coarse values so ties are common
    let m = Array2::from_shape_simple_fn((nu + ni, d), || rng.random_range(-3i32..=3) as f64 * 0.5);
    let mut relevant = Vec::new();
    let mut excluded = Vec::new();
    for u in 0..nu {
        for i in 0..ni {
            match rng.random_range(0..10) {
                0 | 1 => relevant.push(Interaction::new(u, i)),
                2 | 3 => excluded.push(Interaction::new(u, i)),
                _ => {}
            }
        }
    }
    Instance { stack: flat(m, nu), relevant, excluded, nu, ni }
}

/// Sorts every non-excluded item and applies the metric definitions directly.
fn brute_force(inst: &Instance, ks: &[usize]) -> (Vec<(f64, f64)>, usize) {
    let mut sums = vec![(0.0, 0.0); ks.len()];
    let mut users = 0;
    for u in 0..inst.nu {
        let rel: HashSet<usize> = inst.relevant.iter().filter(|x| x.user == u).map(|x| x.item).collect();
        if rel.is_empty() {
            continue;
        }
        users += 1;
        let ex: HashSet<usize> = inst.excluded.iter().filter(|x| x.user == u).map(|x| x.item).collect();
        let score = |i: usize| -> f64 { (0..inst.stack.user(u).len()).map(|c| inst.stack.user(u)[c] * inst.stack.item(i)[c]).sum() };
        let mut items: Vec<usize> = (0..inst.ni).filter(|i| !ex.contains(i)).collect();
        items.sort_by(|&a, &b| score(b).partial_cmp(&score(a)).unwrap().then(a.cmp(&b)));
        for (slot, &k) in ks.iter().enumerate() {
            let top = &items[..k.min(items.len())];
            let hits = top.iter().filter(|i| rel.contains(i)).count();
            let dcg: f64 = top.iter().enumerate().filter(|(_, i)| rel.contains(i)).map(|(r, _)| 1.0 / (r as f64 + 2.0).log2()).sum();
            let idcg: f64 = (0..k.min(rel.len())).map(|r| 1.0 / (r as f64 + 2.0).log2()).sum();
            sums[slot].0 += hits as f64 / rel.len() as f64;
            sums[slot].1 += dcg / idcg;
        }
    }
    for s in &mut sums {
        *s = (s.0 / users.max(1) as f64, s.1 / users.max(1) as f64);
    }
    (sums, users)
}

#[test]
fn matches_brute_force_on_random_instances() {
    let ks = [1, 3, 5, 10, 20];
    for seed in 0..100 {
        let inst = instance(seed);
        let t = EvalTargets::new(inst.nu, &inst.relevant, &[&inst.excluded]);
        let m = evaluate_stack(&inst.stack, &t, &ks);
        let (want, users) = brute_force(&inst, &ks);
        assert_eq!(m.users_evaluated, users);
        for (&k, &(r, n)) in ks.iter().zip(&want) {
            assert!((m.recall(k).unwrap() - r).abs() < 1e-12, "seed {seed} recall@{k}");
            assert!((m.ndcg(k).unwrap() - n).abs() < 1e-12, "seed {seed} ndcg@{k}");
        }
    }
}

#[test]
fn full_ranking_matches_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = Array2::from_shape_simple_fn((31, 3), || rng.random_range(-1.0..1.0));
    let s = flat(m, 1);
    let scores: Vec<f64> = (0..30).map(|i| s.user(0).dot(&s.item(i))).collect();
    let mut want: Vec<usize> = (0..30).collect();
    want.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    assert_eq!(rank_items(&s, 0, &[]), want);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn metrics_grow_with_k_and_ignore_scale(seed in any::<u64>(), exp in -6i32..6) {
        // powers of two keep the many exact ties of these instances exact
        let scale = 2f64.powi(exp);
        let inst = instance(seed);
        let scaled = Instance { stack: flat(inst.stack.final_embeddings() * scale, inst.nu), ..instance(seed) };
        for u in 0..inst.nu {
            let ex: Vec<usize> = inst.excluded.iter().filter(|x| x.user == u).map(|x| x.item).collect();
            let ranked = rank_items(&inst.stack, u, &ex);
            prop_assert_eq!(&ranked, &rank_items(&scaled.stack, u, &ex));
            let rel: Vec<usize> = inst.relevant.iter().filter(|x| x.user == u).map(|x| x.item).collect();
            if let Some(m) = metrics_at_k(&ranked, &rel, &[1, 2, 4, 8, 16, 32]) {
                let v: Vec<_> = m.iter().collect();
                for w in v.windows(2) {
                    let ((&k0, a), (_, b)) = (w[0], w[1]);
                    prop_assert!(b.recall >= a.recall);
                    // the ideal DCG stops growing once K covers every relevant item
                    if k0 >= rel.len() {
                        prop_assert!(b.ndcg >= a.ndcg - 1e-15);
                    }
                }
                let v: Vec<_> = m.values().collect();
                prop_assert!(v.iter().all(|x| (0.0..=1.0).contains(&x.recall) && (0.0..=1.0 + 1e-12).contains(&x.ndcg)));
            }
        }
        let t = EvalTargets::new(inst.nu, &inst.relevant, &[&inst.excluded]);
        prop_assert_eq!(evaluate_stack(&inst.stack, &t, &[5]), evaluate_stack(&scaled.stack, &t, &[5]));
    }
}

#[test]
fn arbitrary_scale_keeps_tie_free_rankings() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..50 {
        let m = Array2::from_shape_simple_fn((41, 4), || rng.random_range(-1.0..1.0));
        let scale = rng.random_range(0.01..100.0);
        let (a, b) = (flat(m.clone(), 1), flat(m * scale, 1));
        assert_eq!(rank_items(&a, 0, &[3, 7]), rank_items(&b, 0, &[3, 7]));
    }
}

#[test]
fn random_embeddings_score_near_chance() {
    let (nu, ni, k) = (400, 500, 20);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let m = Array2::from_shape_simple_fn((nu + ni, 8), || rng.random_range(-1.0..1.0));
    let stack = flat(m, nu);
    let mut relevant = Vec::new();
    for u in 0..nu {
        let mut picked = HashSet::new();
        while picked.len() < 5 {
            picked.insert(rng.random_range(0..ni));
        }
        relevant.extend(picked.into_iter().map(|i| Interaction::new(u, i)));
    }
    let t = EvalTargets::new(nu, &relevant, &[]);
    let r = evaluate_stack(&stack, &t, &[k]).recall(k).unwrap();
    // each relevant item lands in the top k with probability k / ni
    let p = k as f64 / ni as f64;
    let sd = (p * (1.0 - p) / (5.0 * nu as f64)).sqrt();
    assert!(r > 0.0 && r < 0.5);
    assert!((r - p).abs() < 3.0 * sd, "recall {r} vs {p} (sd {sd})");
}
