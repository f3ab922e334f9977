//! Permutation importance, importance-ranked pruning and fixed-point
//! quantization for the intent classifier.
//!
//! Importance of unit `j` is `i_j = s - (1/K) * sum_k s_kj`: the baseline
//! accuracy minus the mean accuracy after shuffling that unit's values across
//! rows, repeated `K` times.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nlu::{argmax, classify, Dataset, FeatureVector, IntentDistribution, MlpModel, NluError};
use crate::par::{self, Execution};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PruningError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Nlu(#[from] NluError),
}

pub type Result<T> = std::result::Result<T, PruningError>;

/// Which units are permuted and pruned.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    /// Input features (columns of the feature matrix).
    #[default]
    Input,
    /// Post-activation hidden units.
    Hidden,
}

fn check_shape(model: &MlpModel, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(PruningError::EmptyDataset);
    }
    if data.features.iter().any(|x| x.len() != model.d_in) {
        return Err(NluError::Shape(format!("dataset rows must have length {}", model.d_in)).into());
    }
    if data.labels.len() != data.len() || data.labels.iter().any(|&y| y >= model.classes()) {
        return Err(PruningError::InvalidArgument(
            "labels do not match the model classes".into(),
        ));
    }
    Ok(())
}

fn hits(model: &MlpModel, data: &Dataset) -> usize {
    data.features
        .iter()
        .zip(&data.labels)
        .filter(|(x, y)| model.predict(x) == **y)
        .count()
}

/// Classification accuracy in `[0, 1]`.
pub fn evaluate(model: &MlpModel, data: &Dataset) -> Result<f64> {
    check_shape(model, data)?;
    Ok(hits(model, data) as f64 / data.len() as f64)
}

/// `s - mean(scores)`.
pub fn importance_from_scores(baseline: f64, scores: &[f64]) -> f64 {
    baseline - scores.iter().sum::<f64>() / scores.len() as f64
}

/// Source of row permutations: `perm[r]` is the row whose value lands in row
/// `r`.
pub trait Permuter: Sync {
    fn permutation(&self, rows: usize, unit: usize, repeat: usize) -> Vec<usize>;
}

/// Fisher-Yates shuffle on a stream derived from `(seed, unit, repeat)`, so
/// each unit's permutations are independent of evaluation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeededShuffle(pub u64);

impl Permuter for SeededShuffle {
    fn permutation(&self, rows: usize, unit: usize, repeat: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..rows).collect();
        p.shuffle(&mut seed::rng(seed::derive(self.0, &[unit as u64, repeat as u64])));
        p
    }
}

/// Always the identity.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IdentityPermutation;

impl Permuter for IdentityPermutation {
    fn permutation(&self, rows: usize, _: usize, _: usize) -> Vec<usize> {
        (0..rows).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub unit: Unit,
    pub baseline: f64,
    pub k: usize,
    pub seed: u64,
    pub rows: usize,
    /// `i_j` per unit, in unit order.
    pub importance: Vec<f64>,
    /// `s_kj`: `permuted_scores[j][k]`.
    pub permuted_scores: Vec<Vec<f64>>,
}

impl ImportanceReport {
    /// Unit indices sorted by ascending importance, ties by lower index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.importance.len()).collect();
        idx.sort_by(|&a, &b| self.importance[a].total_cmp(&self.importance[b]).then(a.cmp(&b)));
        idx
    }
}

pub fn permutation_importance(
    model: &MlpModel,
    data: &Dataset,
    unit: Unit,
    k: usize,
    seed: u64,
    exec: Execution,
) -> Result<ImportanceReport> {
    let mut report = permutation_importance_with(model, data, unit, k, &SeededShuffle(seed), exec)?;
    report.seed = seed;
    Ok(report)
}

/// As [`permutation_importance`] with an explicit permutation source. The
/// result is identical for both execution modes.
pub fn permutation_importance_with(
    model: &MlpModel,
    data: &Dataset,
    unit: Unit,
    k: usize,
    permuter: &dyn Permuter,
    exec: Execution,
) -> Result<ImportanceReport> {
    check_shape(model, data)?;
    if k == 0 {
        return Err(PruningError::InvalidArgument("K must be at least 1".into()));
    }
    let n = data.len();
    if n < 2 {
        return Err(PruningError::InvalidArgument(
            "permutation needs at least two rows".into(),
        ));
    }
    let hidden: Vec<Vec<f64>> = match unit {
        Unit::Input => Vec::new(),
        Unit::Hidden => data.features.iter().map(|x| model.hidden_activations(x)).collect(),
    };
    let units = match unit {
        Unit::Input => model.d_in,
        Unit::Hidden => model.hidden,
    };
    let base_hits = hits(model, data);

    // Integer hit counts keep i_j exactly 0 when no prediction changes.
    let per_unit: Vec<Vec<usize>> = par::map_indexed(units, exec, |j| {
        let column: Vec<f64> = match unit {
            Unit::Input => data.features.iter().map(|x| x[j]).collect(),
            Unit::Hidden => hidden.iter().map(|a| a[j]).collect(),
        };
        (0..k)
            .map(|rep| {
                let perm = permuter.permutation(n, j, rep);
                let mut row_buf = Vec::new();
                (0..n)
                    .filter(|&r| {
                        let src = match unit {
                            Unit::Input => &data.features[r],
                            Unit::Hidden => &hidden[r],
                        };
                        row_buf.clear();
                        row_buf.extend_from_slice(src);
                        row_buf[j] = column[perm[r]];
                        let predicted = match unit {
                            Unit::Input => model.predict(&row_buf),
                            Unit::Hidden => model.predict_from_hidden(&row_buf),
                        };
                        predicted == data.labels[r]
                    })
                    .count()
            })
            .collect()
    });

    let baseline = base_hits as f64 / n as f64;
    let importance = per_unit
        .iter()
        .map(|h| baseline - h.iter().sum::<usize>() as f64 / (k * n) as f64)
        .collect();
    let permuted_scores = per_unit
        .iter()
        .map(|h| h.iter().map(|&c| c as f64 / n as f64).collect())
        .collect();
    Ok(ImportanceReport {
        unit,
        baseline,
        k,
        seed: 0,
        rows: n,
        importance,
        permuted_scores,
    })
}

/// The `floor(fraction * units)` least important units.
pub fn prune_set(report: &ImportanceReport, fraction: f64) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(PruningError::InvalidArgument(format!(
            "fraction {fraction} outside [0, 1)"
        )));
    }
    let count = (fraction * report.importance.len() as f64).floor() as usize;
    let mut chosen: Vec<usize> = report.ranking().into_iter().take(count).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Zeroes the fan-out weights of the chosen units. Shapes are unchanged.
pub fn mask_units(model: &MlpModel, unit: Unit, units: &[usize]) -> MlpModel {
    let mut m = model.clone();
    for &j in units {
        match unit {
            Unit::Input => (0..m.hidden).for_each(|h| m.w1[h * m.d_in + j] = 0.0),
            Unit::Hidden => (0..m.classes()).for_each(|c| m.w2[c * m.hidden + j] = 0.0),
        }
    }
    m
}

pub fn prune(model: &MlpModel, report: &ImportanceReport, fraction: f64) -> Result<MlpModel> {
    let units = match report.unit {
        Unit::Input => model.d_in,
        Unit::Hidden => model.hidden,
    };
    if report.importance.len() != units {
        return Err(PruningError::InvalidArgument(format!(
            "report covers {} units, model has {units}",
            report.importance.len()
        )));
    }
    Ok(mask_units(model, report.unit, &prune_set(report, fraction)?))
}

pub const SUPPORTED_BITS: [u32; 3] = [4, 8, 16];

/// Symmetric per-tensor fixed point: `w ~ q * scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub values: Vec<i32>,
    pub scale: f64,
}

impl QuantizedTensor {
    /// `scale = max|w| / (2^(b-1) - 1)`, rounding half away from zero. An
    /// all-zero tensor gets scale 1.
    pub fn quantize(w: &[f64], bits: u32) -> Result<Self> {
        if !SUPPORTED_BITS.contains(&bits) {
            return Err(PruningError::InvalidArgument(format!(
                "{bits} bits unsupported (4, 8 or 16)"
            )));
        }
        let qmax = ((1i64 << (bits - 1)) - 1) as f64;
        let max = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = if max == 0.0 { 1.0 } else { max / qmax };
        let values = w
            .iter()
            .map(|v| (v / scale).round().clamp(-qmax, qmax) as i32)
            .collect();
        Ok(Self { values, scale })
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.values.iter().map(|&q| q as f64 * self.scale).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedModel {
    pub bits: u32,
    pub d_in: usize,
    pub hidden: usize,
    pub labels: Vec<String>,
    pub w1: QuantizedTensor,
    pub b1: QuantizedTensor,
    pub w2: QuantizedTensor,
    pub b2: QuantizedTensor,
}

impl QuantizedModel {
    pub fn dequantize(&self) -> MlpModel {
        MlpModel {
            d_in: self.d_in,
            hidden: self.hidden,
            labels: self.labels.clone(),
            w1: self.w1.dequantize(),
            b1: self.b1.dequantize(),
            w2: self.w2.dequantize(),
            b2: self.b2.dequantize(),
        }
    }
}

pub fn quantize(model: &MlpModel, bits: u32) -> Result<QuantizedModel> {
    model.check()?;
    Ok(QuantizedModel {
        bits,
        d_in: model.d_in,
        hidden: model.hidden,
        labels: model.labels.clone(),
        w1: QuantizedTensor::quantize(&model.w1, bits)?,
        b1: QuantizedTensor::quantize(&model.b1, bits)?,
        w2: QuantizedTensor::quantize(&model.w2, bits)?,
        b2: QuantizedTensor::quantize(&model.b2, bits)?,
    })
}

/// Dequantizes the weights, then runs the float forward pass.
pub fn dequantize_infer(qm: &QuantizedModel, f: &FeatureVector) -> Result<IntentDistribution> {
    Ok(classify(&qm.dequantize(), f)?)
}

/// Fraction of rows on which both models predict the same class.
pub fn argmax_agreement(a: &MlpModel, b: &MlpModel, data: &Dataset) -> Result<f64> {
    check_shape(a, data)?;
    check_shape(b, data)?;
    let same = data
        .features
        .iter()
        .filter(|x| argmax(&a.logits(x)) == argmax(&b.logits(x)))
        .count();
    Ok(same as f64 / data.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub unit: Unit,
    pub k: usize,
    pub fraction: f64,
    pub bits: u32,
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            unit: Unit::Input,
            k: 5,
            fraction: 0.3,
            bits: 8,
            seed: 7,
        }
    }
}

/// Before/after figures for one importance, prune, quantize pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneOutcome {
    pub config: PruneConfig,
    pub baseline_accuracy: f64,
    pub pruned_units: Vec<usize>,
    pub pruned_accuracy: f64,
    pub quantized_accuracy: f64,
    /// Pruned float model vs its quantized form.
    pub quantized_agreement: f64,
    pub importance: ImportanceReport,
}

/// Importance, prune, quantize. Returns the figures and the quantized pruned
/// model.
pub fn run(
    model: &MlpModel,
    data: &Dataset,
    config: &PruneConfig,
    exec: Execution,
) -> Result<(PruneOutcome, QuantizedModel)> {
    let importance = permutation_importance(model, data, config.unit, config.k, config.seed, exec)?;
    let pruned_units = prune_set(&importance, config.fraction)?;
    let pruned = mask_units(model, config.unit, &pruned_units);
    let qm = quantize(&pruned, config.bits)?;
    let deq = qm.dequantize();
    let outcome = PruneOutcome {
        config: *config,
        baseline_accuracy: importance.baseline,
        pruned_units,
        pruned_accuracy: evaluate(&pruned, data)?,
        quantized_accuracy: evaluate(&deq, data)?,
        quantized_agreement: argmax_agreement(&pruned, &deq, data)?,
        importance,
    };
    Ok((outcome, qm))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    /// Predicts class 0 whatever the input.
    fn constant_model(d: usize, k: usize) -> MlpModel {
        let mut m = MlpModel::zeros(d, 2, labels(k));
        m.b2[0] = 1.0;
        m
    }

    fn data(rows: &[(&[f64], usize)]) -> Dataset {
        Dataset {
            features: rows.iter().map(|(x, _)| x.to_vec()).collect(),
            labels: rows.iter().map(|(_, y)| *y).collect(),
        }
    }

    #[test]
    fn majority_model_scores_majority_fraction() {
        let d = data(&[(&[0.0, 1.0], 0), (&[1.0, 0.0], 0), (&[1.0, 1.0], 1), (&[0.5, 0.5], 0)]);
        assert_eq!(evaluate(&constant_model(2, 2), &d).unwrap(), 0.75);
        let empty = Dataset {
            features: vec![],
            labels: vec![],
        };
        assert_eq!(evaluate(&constant_model(2, 2), &empty), Err(PruningError::EmptyDataset));
    }

    /// Hidden unit h copies input h; output c reads hidden c.
    fn identity_model(d: usize) -> MlpModel {
        let mut m = MlpModel::zeros(d, d, labels(d));
        for i in 0..d {
            m.w1[i * d + i] = 1.0;
            m.w2[i * d + i] = 1.0;
        }
        m
    }

    #[test]
    fn perfect_model_on_separable_set() {
        let d = data(&[(&[1.0, 0.0], 0), (&[0.0, 1.0], 1), (&[0.9, 0.1], 0)]);
        assert_eq!(evaluate(&identity_model(2), &d).unwrap(), 1.0);
    }

    #[test]
    fn worked_example() {
        assert!((importance_from_scores(0.9, &[0.6, 0.5, 0.7]) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn dead_and_constant_features_have_zero_importance() {
        let mut m = identity_model(3);
        // Feature 2 feeds nothing.
        m.w1[2 * 3 + 2] = 0.0;
        let d = data(&[
            (&[1.0, 0.0, 0.3, 0.5], 0),
            (&[0.0, 1.0, 0.9, 0.5], 1),
            (&[0.8, 0.1, 0.1, 0.5], 0),
            (&[0.2, 0.7, 0.4, 0.5], 1),
        ]);
        // A fourth input column that is constant.
        let mut m4 = MlpModel::zeros(4, 3, labels(3));
        for h in 0..3 {
            for j in 0..3 {
                m4.w1[h * 4 + j] = m.w1[h * 3 + j];
            }
            m4.w1[h * 4 + 3] = 0.7;
        }
        m4.w2 = m.w2.clone();
        for seed in 0..5 {
            let r = permutation_importance(&m4, &d, Unit::Input, 3, seed, Execution::Sequential).unwrap();
            assert_eq!(r.importance[2], 0.0);
            assert_eq!(r.importance[3], 0.0);
        }
    }

    #[test]
    fn identity_permutation_gives_zero_report() {
        let m = MlpModel::random(6, 4, labels(3), 1);
        let mut rng = seed::rng(2);
        let d = Dataset {
            features: (0..10)
                .map(|_| (0..6).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect())
                .collect(),
            labels: (0..10).map(|i| i % 3).collect(),
        };
        for unit in [Unit::Input, Unit::Hidden] {
            let r = permutation_importance_with(&m, &d, unit, 1, &IdentityPermutation, Execution::Sequential).unwrap();
            assert!(r.importance.iter().all(|&i| i == 0.0));
        }
    }

    #[test]
    fn single_row_and_zero_k_rejected() {
        let m = identity_model(2);
        let one = data(&[(&[1.0, 0.0], 0)]);
        assert!(permutation_importance(&m, &one, Unit::Input, 1, 0, Execution::Sequential).is_err());
        let two = data(&[(&[1.0, 0.0], 0), (&[0.0, 1.0], 1)]);
        assert!(permutation_importance(&m, &two, Unit::Input, 0, 0, Execution::Sequential).is_err());
    }

    #[test]
    fn informative_feature_matters() {
        let m = identity_model(2);
        let d = data(&[
            (&[1.0, 0.5], 0),
            (&[0.0, 0.5], 1),
            (&[0.9, 0.5], 0),
            (&[0.1, 0.5], 1),
            (&[0.8, 0.5], 0),
            (&[0.2, 0.5], 1),
        ]);
        let r = permutation_importance(&m, &d, Unit::Input, 20, 3, Execution::Sequential).unwrap();
        assert!(r.importance[0] > 0.1);
        assert_eq!(r.importance[1], 0.0);
    }

    #[test]
    fn prune_zero_fraction_is_identity_and_idempotent() {
        let m = MlpModel::random(5, 3, labels(2), 4);
        let report = ImportanceReport {
            unit: Unit::Input,
            baseline: 1.0,
            k: 1,
            seed: 0,
            rows: 2,
            importance: vec![0.2, 0.0, 0.1, 0.0, 0.3],
            permuted_scores: vec![vec![]; 5],
        };
        assert_eq!(prune(&m, &report, 0.0).unwrap(), m);
        assert_eq!(prune_set(&report, 0.4).unwrap(), vec![1, 3]);
        let once = prune(&m, &report, 0.5).unwrap();
        assert_eq!(prune(&once, &report, 0.5).unwrap(), once);
        assert!(prune(&m, &report, 1.0).is_err());
    }

    #[test]
    fn quantize_endpoints_and_zero_tensor() {
        for bits in SUPPORTED_BITS {
            let qmax = (1i32 << (bits - 1)) - 1;
            let w = [0.5, -0.5, 0.25, 0.0, -0.1];
            let q = QuantizedTensor::quantize(&w, bits).unwrap();
            assert_eq!(q.values[0], qmax);
            assert_eq!(q.values[1], -qmax);
            for (a, b) in w.iter().zip(q.dequantize()) {
                assert!((a - b).abs() <= q.scale / 2.0 + 1e-15);
            }
        }
        let z = QuantizedTensor::quantize(&[0.0; 4], 8).unwrap();
        assert_eq!(z.values, vec![0; 4]);
        assert_eq!(z.scale, 1.0);
        assert!(QuantizedTensor::quantize(&[1.0], 5).is_err());
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        // scale 1 with max 127 at 8 bits; 2.5 and -2.5 sit exactly on halves.
        let q = QuantizedTensor::quantize(&[127.0, 2.5, -2.5], 8).unwrap();
        assert_eq!(q.scale, 1.0);
        assert_eq!(q.values, vec![127, 3, -3]);
    }
}
