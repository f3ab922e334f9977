use std::collections::BTreeMap;

use deskbot_core::nlu::{
    accuracy, argmax, desk_corpus, loss_and_gradient, select_intent, softmax, train, Dataset, HashedNgrams,
    IntentDistribution, MlpModel, NluPipeline, TrainConfig, DEFAULT_THRESHOLD, EXPERIMENT_COMMANDS,
};
use proptest::prelude::*;

fn classes(corpus: &[(String, String)]) -> Vec<String> {
    let mut c: Vec<String> = corpus.iter().map(|(_, i)| i.clone()).collect();
    c.sort();
    c.dedup();
    c
}

/// Central-difference gradient of the mean loss, one parameter at a time.
fn numeric_gradient(model: &MlpModel, data: &Dataset) -> Vec<f64> {
    let h = 1e-6;
    let mut out = Vec::new();
    let mut m = model.clone();
    let fields: [fn(&mut MlpModel) -> &mut Vec<f64>; 4] = [|m| &mut m.w1, |m| &mut m.b1, |m| &mut m.w2, |m| &mut m.b2];
    for field in fields {
        for i in 0..field(&mut m).len() {
            let orig = field(&mut m)[i];
            field(&mut m)[i] = orig + h;
            let up = loss_and_gradient(&m, data).0;
            field(&mut m)[i] = orig - h;
            let down = loss_and_gradient(&m, data).0;
            field(&mut m)[i] = orig;
            out.push((up - down) / (2.0 * h));
        }
    }
    out
}

#[test]
fn analytic_gradient_matches_differences() {
    let corpus = desk_corpus();
    let labels = classes(&corpus);
    let featurizer = HashedNgrams { dim: 64 };
    let data = Dataset::from_corpus(&corpus[..40], &featurizer, &labels).unwrap();
    let model = MlpModel::random(64, 8, labels, 3);
    let (_, g) = loss_and_gradient(&model, &data);
    let analytic: Vec<f64> = [g.w1, g.b1, g.w2, g.b2].concat();
    let numeric = numeric_gradient(&model, &data);
    let diff: f64 = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(diff / scale <= 1e-4, "relative error {}", diff / scale);
}

#[test]
fn desk_model_fits_its_corpus() {
    let corpus = desk_corpus();
    let featurizer = HashedNgrams::default();
    let (model, report) = train(&corpus, &TrainConfig::default(), &featurizer).unwrap();
    assert_eq!(report.train_accuracy, 1.0);
    let data = Dataset::from_corpus(&corpus, &featurizer, &model.labels).unwrap();
    assert_eq!(accuracy(&model, &data), 1.0);
}

#[test]
fn every_experiment_command_is_understood() {
    let nlu = NluPipeline::desk_default().unwrap();
    for (id, text, intent) in EXPERIMENT_COMMANDS {
        let r = nlu.interpret_text(text).unwrap();
        assert_eq!(r.intent.as_deref(), Some(*intent), "{id}: {text}");
        assert!(r.confidence >= DEFAULT_THRESHOLD, "{id}: {}", r.confidence);
    }
}

#[test]
fn training_is_deterministic() {
    let corpus = desk_corpus();
    let cfg = TrainConfig {
        epochs: 40,
        ..TrainConfig::default()
    };
    let a = train(&corpus, &cfg, &HashedNgrams::default()).unwrap();
    let b = train(&corpus, &cfg, &HashedNgrams::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn model_file_round_trips_exactly() {
    let nlu = NluPipeline::desk_default().unwrap();
    let json = nlu.model().to_json().unwrap();
    assert_eq!(&MlpModel::from_json(&json).unwrap(), nlu.model());
}

fn distribution() -> impl Strategy<Value = IntentDistribution> {
    prop::collection::vec(0.0..10.0f64, 2..8)
        .prop_filter("some mass", |w| w.iter().sum::<f64>() > 1e-6)
        .prop_map(|w| {
            let total: f64 = w.iter().sum();
            let probs: BTreeMap<String, f64> = w
                .iter()
                .enumerate()
                .map(|(i, x)| (format!("intent_{i}"), x / total))
                .collect();
            IntentDistribution::new(probs).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    /// Lowering the threshold never loses an accepted intent; raising it
    /// never invents one. The reported confidence ignores the threshold.
    #[test]
    fn threshold_is_monotone(d in distribution(), a in 0.0..=1.0f64, b in 0.0..=1.0f64) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (at_lo, c_lo) = select_intent(&d, lo);
        let (at_hi, c_hi) = select_intent(&d, hi);
        prop_assert_eq!(c_lo, c_hi);
        if at_hi.is_some() {
            prop_assert_eq!(&at_lo, &at_hi);
        }
        if let Some(label) = &at_lo {
            prop_assert!(d.get(label) >= lo);
            prop_assert!(d.probs.values().all(|p| *p <= d.get(label)));
        }
    }

    /// A monotone reshaping of the probabilities keeps the selected label.
    #[test]
    fn selection_is_scale_invariant(d in distribution(), power in 0.2..5.0f64) {
        let raised: Vec<f64> = d.probs.values().map(|p| p.powf(power)).collect();
        let total: f64 = raised.iter().sum();
        prop_assume!(total > 0.0);
        let reshaped = IntentDistribution::new(
            d.probs.keys().cloned().zip(raised.iter().map(|r| r / total)).collect(),
        ).unwrap();
        prop_assert_eq!(select_intent(&d, 0.0).0, select_intent(&reshaped, 0.0).0);
    }

    #[test]
    fn softmax_keeps_the_argmax_of_scaled_logits(
        z in prop::collection::vec(-20.0..20.0f64, 2..8),
        c in 0.01..50.0f64,
    ) {
        let scaled: Vec<f64> = z.iter().map(|v| c * v).collect();
        let p = softmax(&scaled);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert_eq!(argmax(&p), argmax(&z));
    }
}
