mod common;

use common::{central_diff, loss_of_logits, rel_err, Instance, Loss, ALL_LOSSES};
use music_core::classifier::{
    ce_loss_grad, entropy_loss_grad, l2_normalize, masked_softmax, negce_loss_grad, sgd_train, ClassifierParams,
    LossKind, LossTerm, Objective, TrainSpec,
};
use proptest::prelude::*;

fn library_grad(kind: Loss, z: &[f64], mask: &[bool], target: usize) -> (f64, Vec<f64>) {
    let p = masked_softmax(z, mask).unwrap();
    let lg = match kind {
        Loss::Ce => ce_loss_grad(&p, target),
        Loss::NegCe => negce_loss_grad(&p, target),
        Loss::Entropy => entropy_loss_grad(&p),
    }
    .unwrap();
    (lg.loss, lg.grad)
}

#[test]
fn logit_gradients_match_finite_differences() {
    let mut rng = common::rng(11);
    for _ in 0..100 {
        let inst = Instance::random(&mut rng);
        let z = inst.logits(&inst.weights);
        for kind in ALL_LOSSES {
            let (loss, grad) = library_grad(kind, &z, &inst.mask, inst.target);
            let f = |zz: &[f64]| loss_of_logits(kind, zz, &inst.mask, inst.target);
            assert!((loss - f(&z)).abs() < 1e-10, "{kind:?} value {loss} vs {}", f(&z));
            let fd = central_diff(f, &z, &inst.mask, 1e-6);
            let err = rel_err(&grad, &fd);
            assert!(err < 1e-6, "{kind:?}: relative error {err:e}");
            for (k, &m) in inst.mask.iter().enumerate() {
                if !m {
                    assert_eq!(grad[k], 0.0);
                }
            }
        }
    }
}

#[test]
fn weight_gradients_match_finite_differences() {
    let mut rng = common::rng(12);
    for _ in 0..30 {
        let inst = Instance::random(&mut rng);
        let params = ClassifierParams::from_weights(inst.classes, inst.dim, inst.weights.clone(), None).unwrap();
        for (kind, lk) in [
            (Loss::Ce, LossKind::CrossEntropy),
            (Loss::NegCe, LossKind::NegativeCrossEntropy),
            (Loss::Entropy, LossKind::MinEntropy),
        ] {
            let mut term = LossTerm::new(lk, 0.7);
            term.push(&inst.x_unit, inst.mask.clone(), inst.target);
            let obj = Objective::default().with(term);
            let (value, gw, _, _) = obj.value_and_grad(&params).unwrap();
            let f = |w: &[f64]| 0.7 * loss_of_logits(kind, &inst.logits(w), &inst.mask, inst.target);
            assert!((value - f(&inst.weights)).abs() < 1e-10);
            let active = vec![true; inst.weights.len()];
            let fd = central_diff(f, &inst.weights, &active, 1e-6);
            let err = rel_err(&gw, &fd);
            assert!(err < 1e-6, "{kind:?}: relative error {err:e}");
        }
    }
}

#[test]
fn objective_is_non_increasing_with_small_learning_rate() {
    let store = music_core::feature_store::generate_synthetic(&music_core::feature_store::SyntheticConfig {
        num_classes: 5,
        dim: 16,
        samples_per_class: 10,
        separation: 4.0,
        noise_sigma: 1.0,
        seed: 5,
    })
    .unwrap();
    let xs: Vec<(Vec<f64>, usize)> = store
        .records()
        .map(|(c, v)| {
            let v: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            (l2_normalize(&v).unwrap(), c as usize)
        })
        .collect();
    let mut term = LossTerm::new(LossKind::CrossEntropy, 1.0);
    for (x, y) in &xs {
        term.push(x, vec![true; 5], *y);
    }
    let obj = Objective::default().with(term);
    let init = ClassifierParams::init(5, 16, false, 9);
    let spec = TrainSpec {
        steps: 200,
        learning_rate: 0.01,
        momentum: 0.9,
    };
    let out = sgd_train(&init, &obj, &spec).unwrap();
    for pair in out.objective_trace.windows(2) {
        assert!(pair[1] <= pair[0] + 1e-12, "objective rose: {} -> {}", pair[0], pair[1]);
    }
    assert!(out.objective_trace.last().unwrap() < &out.objective_trace[0]);
}

fn logits_and_mask() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..12).prop_flat_map(|c| {
        (
            prop::collection::vec(-30.0f64..30.0, c),
            prop::collection::vec(any::<bool>(), c),
            0..c,
        )
            .prop_map(|(z, mut mask, keep)| {
                mask[keep] = true;
                (z, mask)
            })
    })
}

proptest! {
    #[test]
    fn masked_softmax_is_a_distribution((z, mask) in logits_and_mask()) {
        let p = masked_softmax(&z, &mask).unwrap();
        let sum: f64 = p.probs.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        for (k, &m) in mask.iter().enumerate() {
            if m {
                prop_assert!(p.probs[k] >= 0.0);
            } else {
                prop_assert_eq!(p.probs[k], 0.0);
            }
        }
    }

    #[test]
    fn masked_softmax_is_shift_invariant((z, mask) in logits_and_mask(), shift in -50.0f64..50.0) {
        let p = masked_softmax(&z, &mask).unwrap();
        let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
        let q = masked_softmax(&shifted, &mask).unwrap();
        for (a, b) in p.probs.iter().zip(&q.probs) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn normalization_is_scale_invariant(
        v in prop::collection::vec(-10.0f64..10.0, 1..64),
        alpha in 1e-3f64..1e3,
    ) {
        prop_assume!(common::norm(&v) > 1e-3);
        let a = l2_normalize(&v).unwrap();
        let scaled: Vec<f64> = v.iter().map(|x| x * alpha).collect();
        let b = l2_normalize(&scaled).unwrap();
        prop_assert!((common::norm(&a) - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn losses_are_non_negative((z, mask) in logits_and_mask(), pick in any::<prop::sample::Index>()) {
        let admissible: Vec<usize> = (0..mask.len()).filter(|&k| mask[k]).collect();
        let t = admissible[pick.index(admissible.len())];
        let p = masked_softmax(&z, &mask).unwrap();
        prop_assert!(ce_loss_grad(&p, t).unwrap().loss >= 0.0);
        prop_assert!(entropy_loss_grad(&p).unwrap().loss >= 0.0);
        if admissible.len() >= 2 {
            prop_assert!(negce_loss_grad(&p, t).unwrap().loss >= 0.0);
        }
    }
}
