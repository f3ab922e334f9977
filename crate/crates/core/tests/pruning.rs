use deskbot_core::nlu::{desk_corpus, desk_heldout, Dataset, HashedNgrams, MlpModel, NluPipeline};
use deskbot_core::par::Execution;
use deskbot_core::pruning::{
    argmax_agreement, evaluate, importance_from_scores, mask_units, permutation_importance,
    permutation_importance_with, prune, prune_set, quantize, run, IdentityPermutation, Permuter, PruneConfig,
    QuantizedTensor, SeededShuffle, Unit,
};
use proptest::prelude::*;
use std::sync::OnceLock;

fn desk() -> &'static (MlpModel, Dataset) {
    static CELL: OnceLock<(MlpModel, Dataset)> = OnceLock::new();
    CELL.get_or_init(|| {
        let nlu = NluPipeline::desk_default().unwrap();
        let model = nlu.model().clone();
        let data = Dataset::from_corpus(&desk_corpus(), &HashedNgrams::default(), &model.labels).unwrap();
        (model, data)
    })
}

/// Straightforward permutation importance: copy the dataset, overwrite one
/// column with its permuted values, count correct predictions.
fn naive_importance(model: &MlpModel, data: &Dataset, k: usize, permuter: &dyn Permuter) -> Vec<f64> {
    let n = data.len();
    let base = data
        .features
        .iter()
        .zip(&data.labels)
        .filter(|(x, y)| model.predict(x) == **y)
        .count() as f64
        / n as f64;
    (0..model.d_in)
        .map(|j| {
            let scores: Vec<f64> = (0..k)
                .map(|rep| {
                    let perm = permuter.permutation(n, j, rep);
                    let mut shuffled = data.features.clone();
                    for r in 0..n {
                        shuffled[r][j] = data.features[perm[r]][j];
                    }
                    let hits = shuffled
                        .iter()
                        .zip(&data.labels)
                        .filter(|(x, y)| model.predict(x) == **y)
                        .count();
                    hits as f64 / n as f64
                })
                .collect();
            importance_from_scores(base, &scores)
        })
        .collect()
}

#[test]
fn worked_example() {
    assert!((importance_from_scores(0.9, &[0.6, 0.5, 0.7]) - 0.3).abs() < 1e-15);
}

#[test]
fn importance_matches_the_naive_definition() {
    let (model, data) = desk();
    let report = permutation_importance(model, data, Unit::Input, 3, 19, Execution::Parallel).unwrap();
    let naive = naive_importance(model, data, 3, &SeededShuffle(19));
    for (j, (a, b)) in report.importance.iter().zip(&naive).enumerate() {
        assert!((a - b).abs() <= 1e-12, "unit {j}: {a} vs {b}");
    }
    assert_eq!(report.permuted_scores.len(), model.d_in);
    assert!(report.permuted_scores.iter().all(|s| s.len() == 3));
}

#[test]
fn unused_features_have_exactly_zero_importance() {
    let (model, data) = desk();
    let dead: Vec<usize> = (0..model.d_in)
        .filter(|&j| data.features.iter().all(|x| x[j] == 0.0))
        .collect();
    assert!(!dead.is_empty(), "corpus fills every hash bucket");
    let report = permutation_importance(model, data, Unit::Input, 5, 7, Execution::Parallel).unwrap();
    for j in dead {
        assert_eq!(report.importance[j], 0.0, "feature {j}");
    }
}

#[test]
fn identity_permutation_reports_nothing() {
    let (model, data) = desk();
    for unit in [Unit::Input, Unit::Hidden] {
        let r = permutation_importance_with(model, data, unit, 4, &IdentityPermutation, Execution::Parallel).unwrap();
        assert!(r.importance.iter().all(|&i| i == 0.0), "{unit:?}");
    }
}

#[test]
fn pruning_unused_features_keeps_accuracy() {
    let (model, data) = desk();
    let dead: Vec<usize> = (0..model.d_in)
        .filter(|&j| data.features.iter().all(|x| x[j] == 0.0))
        .collect();
    let pruned = mask_units(model, Unit::Input, &dead);
    assert_eq!(evaluate(&pruned, data).unwrap(), evaluate(model, data).unwrap());
}

/// Zero importance is a statement about one feature at a time: removing any
/// single such feature is harmless, removing many together need not be.
#[test]
fn each_zero_importance_feature_alone_is_harmless() {
    let (model, data) = desk();
    let report = permutation_importance(model, data, Unit::Input, 5, 7, Execution::Parallel).unwrap();
    let base = evaluate(model, data).unwrap();
    for j in (0..model.d_in).filter(|&j| report.importance[j] == 0.0) {
        assert_eq!(
            evaluate(&mask_units(model, Unit::Input, &[j]), data).unwrap(),
            base,
            "feature {j}"
        );
    }
}

#[test]
fn quantized_desk_model_agrees_with_float() {
    let (model, data) = desk();
    let eight = quantize(model, 8).unwrap().dequantize();
    assert!(argmax_agreement(model, &eight, data).unwrap() >= 0.98);
    let sixteen = quantize(model, 16).unwrap().dequantize();
    assert_eq!(argmax_agreement(model, &sixteen, data).unwrap(), 1.0);
    let held = Dataset::from_corpus(&desk_heldout(), &HashedNgrams::default(), &model.labels).unwrap();
    assert!(argmax_agreement(model, &eight, &held).unwrap() >= 0.95);
}

#[test]
fn execution_modes_agree() {
    let (model, data) = desk();
    for unit in [Unit::Input, Unit::Hidden] {
        let cfg = PruneConfig {
            unit,
            ..PruneConfig::default()
        };
        let a = run(model, data, &cfg, Execution::Parallel).unwrap();
        let b = run(model, data, &cfg, Execution::Sequential).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn hidden_pruning_masks_output_weights_only() {
    let (model, data) = desk();
    let report = permutation_importance(model, data, Unit::Hidden, 3, 1, Execution::Parallel).unwrap();
    let pruned = prune(model, &report, 0.25).unwrap();
    let set = prune_set(&report, 0.25).unwrap();
    assert_eq!(set.len(), model.hidden / 4);
    assert_eq!(pruned.w1, model.w1);
    for c in 0..model.classes() {
        for j in 0..model.hidden {
            let w = pruned.w2[c * model.hidden + j];
            if set.contains(&j) {
                assert_eq!(w, 0.0);
            } else {
                assert_eq!(w, model.w2[c * model.hidden + j]);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn rounding_error_is_at_most_half_a_step(
        w in prop::collection::vec(-5.0..5.0f64, 1..64),
        bits in prop::sample::select(vec![4u32, 8, 16]),
    ) {
        let q = QuantizedTensor::quantize(&w, bits).unwrap();
        let qmax = (1i32 << (bits - 1)) - 1;
        prop_assert!(q.values.iter().all(|v| v.abs() <= qmax));
        for (a, b) in w.iter().zip(q.dequantize()) {
            prop_assert!((a - b).abs() <= q.scale / 2.0 + 1e-12);
        }
    }

    #[test]
    fn masking_is_idempotent(units in prop::collection::btree_set(0usize..256, 0..40)) {
        let (model, _) = desk();
        let units: Vec<usize> = units.into_iter().collect();
        let once = mask_units(model, Unit::Input, &units);
        prop_assert_eq!(&mask_units(&once, Unit::Input, &units), &once);
    }

    #[test]
    fn larger_fractions_prune_supersets(a in 0.0..0.99f64, b in 0.0..0.99f64) {
        let (model, data) = desk();
        static REPORT: OnceLock<deskbot_core::pruning::ImportanceReport> = OnceLock::new();
        let report = REPORT.get_or_init(|| {
            permutation_importance(model, data, Unit::Input, 2, 3, Execution::Parallel).unwrap()
        });
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let small = prune_set(report, lo).unwrap();
        let large = prune_set(report, hi).unwrap();
        prop_assert!(small.iter().all(|u| large.contains(u)));
        prop_assert_eq!(large.len(), (hi * 256.0).floor() as usize);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    /// Swapping two other columns in both the data and the model leaves a
    /// feature's importance untouched.
    #[test]
    fn importance_ignores_relabeling_of_other_features(a in 0usize..256, b in 0usize..256) {
        prop_assume!(a != b);
        let (model, data) = desk();
        let mut m = model.clone();
        for h in 0..m.hidden {
            m.w1.swap(h * m.d_in + a, h * m.d_in + b);
        }
        let mut d = data.clone();
        d.features.iter_mut().for_each(|x| x.swap(a, b));
        let before = permutation_importance(model, data, Unit::Input, 1, 5, Execution::Parallel).unwrap();
        let after = permutation_importance(&m, &d, Unit::Input, 1, 5, Execution::Parallel).unwrap();
        for j in (0..256).filter(|j| *j != a && *j != b) {
            prop_assert_eq!(before.importance[j], after.importance[j]);
        }
    }
}
