use ndarray::Array2;
use proptest::prelude::*;
use protoau::data::{build_adjacency, TripleBatch};
use protoau::objectives::{bpr_loss_and_grad, infonce_loss_and_grad, Mode, Reduction};
use protoau::optim::{gradient_audit, AuditConfig, StepConfig};
use protoau::propagation::{propagate, EmbeddingTable};
use protoau::prototypes::{UniformityOptions, UniformityPairs};

fn audit(mode: Mode, severed: bool, seed: u64) -> protoau::optim::AuditReport {
    let cfg = AuditConfig { severed, step: StepConfig { mode, ..AuditConfig::default().step }, ..Default::default() };
    gradient_audit(&cfg, seed).unwrap()
}

#[test]
fn every_mode_passes_on_many_seeds() {
    for mode in Mode::ALL {
        for seed in 0..6 {
            let r = audit(mode, true, seed);
            assert!(r.passes(1e-4), "{mode} seed {seed}: {:?}", r.failing(1e-4));
        }
    }
}

#[test]
fn unsevered_targets_are_flagged() {
    for seed in 0..4 {
        let r = audit(Mode::Full, false, seed);
        let bad: Vec<&str> = r.failing(1e-4).iter().map(|b| b.name.as_str()).collect();
        assert!(bad.contains(&"swapped.z_t") && bad.contains(&"total.embeddings"), "seed {seed}: {bad:?}");
        // terms that never touch the transport stay clean
        assert!(r.block("uniformity.bank").unwrap().max_rel_error < 1e-4);
        assert!(r.block("bpr").unwrap().max_rel_error < 1e-4);
    }
}

#[test]
fn backbone_audit_skips_prototype_blocks() {
    let r = audit(Mode::BackboneOnly, true, 1);
    let names: Vec<&str> = r.blocks.iter().map(|b| b.name.as_str()).collect();
    assert_eq!(names, ["bpr", "propagation_adjoint", "l2_reg", "total.embeddings"]);
    assert!(r.passes(1e-4));
}

#[test]
fn variants_of_the_auxiliary_terms_pass() {
    let base = AuditConfig::default();
    let variants = [
        StepConfig { uniformity: UniformityOptions { log: true, ..Default::default() }, ..base.step },
        StepConfig {
            uniformity: UniformityOptions { pairs: UniformityPairs::Sampled { count: 7, seed: 3 }, log: false },
            ..base.step
        },
        StepConfig { alpha: 3.0, beta: 0.7, ..base.step },
        StepConfig { bpr_reduction: Reduction::Mean, ..base.step },
        StepConfig { swap: protoau::prototypes::SwapParams { normalize_inputs: false, ..base.step.swap }, ..base.step },
        StepConfig { layers: 0, ..base.step },
        StepConfig { augmentation: protoau::propagation::Augmentation::NodeDropout, drop_rate: 0.15, ..base.step },
    ];
    for (n, step) in variants.into_iter().enumerate() {
        let r = gradient_audit(&AuditConfig { step, ..base }, 11 + n as u64).unwrap();
        assert!(r.passes(1e-4), "variant {n}: {:?}", r.failing(1e-4));
    }
}

#[test]
fn oversized_instances_are_refused() {
    assert!(gradient_audit(&AuditConfig { num_users: 8, num_items: 8, ..Default::default() }, 0).is_err());
    assert!(gradient_audit(&AuditConfig { dim: 9, ..Default::default() }, 0).is_err());
}

fn flat_stack(m: Array2<f64>, nu: usize) -> protoau::propagation::LayerStack<f64> {
    let ni = m.nrows() - nu;
    propagate(&build_adjacency(&[], nu, ni).unwrap(), &EmbeddingTable::new(m, nu).unwrap(), 0).unwrap()
}

#[test]
fn bpr_known_values() {
    let batch = TripleBatch { users: vec![0], pos_items: vec![0], neg_items: vec![1] };
    let equal = flat_stack(ndarray::array![[1.0, 0.0], [0.5, 0.5], [0.5, 0.5]], 1);
    let (l, _) = bpr_loss_and_grad(&equal, &batch, Reduction::Sum).unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    let far = flat_stack(ndarray::array![[1.0], [-25.0], [25.0]], 1);
    let (l, g) = bpr_loss_and_grad(&far, &batch, Reduction::Sum).unwrap();
    assert!((l - 50.0).abs() < 1e-12 && l.is_finite());
    assert!(g.values.iter().all(|v| v.is_finite()));
    let near = flat_stack(ndarray::array![[1.0], [400.0], [-400.0]], 1);
    assert!(bpr_loss_and_grad(&near, &batch, Reduction::Sum).unwrap().0 < 1e-300);
}

#[test]
fn infonce_known_values() {
    let z = ndarray::array![[1.0, 0.0], [0.0, 1.0]];
    let out = infonce_loss_and_grad(z.view(), z.view(), 1.0).unwrap();
    let per = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    assert!((per - 0.31326).abs() < 1e-5);
    assert!((out.loss - 2.0 * per).abs() < 1e-12);
    let same = ndarray::Array2::from_elem((4, 3), 1.0);
    let out = infonce_loss_and_grad(same.view(), same.view(), 0.3).unwrap();
    assert!((out.loss - 4.0 * 4f64.ln()).abs() < 1e-12);
    assert!(infonce_loss_and_grad(z.view(), z.view(), 0.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bpr_never_increases_with_positive_score(m in proptest::collection::vec(-2.0f64..2.0, 12), bump in 0.0f64..3.0) {
        let e = Array2::from_shape_vec((4, 3), m).unwrap();
        let batch = TripleBatch { users: vec![0, 0], pos_items: vec![0, 1], neg_items: vec![2, 2] };
        let before = bpr_loss_and_grad(&flat_stack(e.clone(), 1), &batch, Reduction::Sum).unwrap().0;
        // moving item 0 along the user's embedding raises only y_u0
        let mut moved = e.clone();
        let u = e.row(0).to_owned();
        let norm = u.dot(&u).max(1e-12);
        moved.row_mut(1).scaled_add(bump / norm, &u);
        let after = bpr_loss_and_grad(&flat_stack(moved, 1), &batch, Reduction::Sum).unwrap().0;
        prop_assert!(after <= before + 1e-12);
    }
}
