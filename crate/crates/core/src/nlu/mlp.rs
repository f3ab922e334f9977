use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::text::{FeatureVector, Featurizer, Utterance};
use super::NluError;
use crate::seed;

/// One-hidden-layer perceptron: `softmax(W2 relu(W1 x + b1) + b2)`.
///
/// Weight matrices are row-major: `w1[h * d_in + j]` connects input `j` to
/// hidden unit `h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub d_in: usize,
    pub hidden: usize,
    /// Output classes, in logit order. Training sorts them alphabetically.
    pub labels: Vec<String>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MlpModel {
    pub fn zeros(d_in: usize, hidden: usize, labels: Vec<String>) -> Self {
        let k = labels.len();
        Self {
            d_in,
            hidden,
            labels,
            w1: vec![0.0; hidden * d_in],
            b1: vec![0.0; hidden],
            w2: vec![0.0; k * hidden],
            b2: vec![0.0; k],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn random(d_in: usize, hidden: usize, labels: Vec<String>, seed: u64) -> Self {
        let mut m = Self::zeros(d_in, hidden, labels);
        let mut rng = seed::rng(seed);
        let a1 = (6.0 / (d_in + hidden) as f64).sqrt();
        m.w1.iter_mut().for_each(|w| *w = rng.random_range(-a1..a1));
        let a2 = (6.0 / (hidden + m.classes()) as f64).sqrt();
        m.w2.iter_mut().for_each(|w| *w = rng.random_range(-a2..a2));
        m
    }

    pub fn classes(&self) -> usize {
        self.labels.len()
    }

    pub fn check(&self) -> Result<(), NluError> {
        let k = self.classes();
        let ok = k >= 2
            && self.w1.len() == self.hidden * self.d_in
            && self.b1.len() == self.hidden
            && self.w2.len() == k * self.hidden
            && self.b2.len() == k;
        if !ok {
            return Err(NluError::Shape("inconsistent model dimensions".into()));
        }
        let finite = [&self.w1, &self.b1, &self.w2, &self.b2]
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(NluError::Shape("non-finite weights".into()));
        }
        Ok(())
    }

    fn forward(&self, x: &[f64]) -> Forward {
        let mut z1 = self.b1.clone();
        let nz: Vec<(usize, f64)> = x.iter().copied().enumerate().filter(|(_, v)| *v != 0.0).collect();
        for (h, z) in z1.iter_mut().enumerate() {
            let row = &self.w1[h * self.d_in..(h + 1) * self.d_in];
            *z += nz.iter().map(|&(j, v)| row[j] * v).sum::<f64>();
        }
        let a1: Vec<f64> = z1.iter().map(|v| v.max(0.0)).collect();
        let logits = self.logits_from_hidden(&a1);
        Forward { z1, a1, logits }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).logits
    }

    /// Post-ReLU hidden layer.
    pub fn hidden_activations(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).a1
    }

    /// Output logits for a given hidden layer.
    pub fn logits_from_hidden(&self, a1: &[f64]) -> Vec<f64> {
        (0..self.classes())
            .map(|c| {
                let row = &self.w2[c * self.hidden..(c + 1) * self.hidden];
                self.b2[c] + row.iter().zip(a1).map(|(w, a)| w * a).sum::<f64>()
            })
            .collect()
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.forward(x).logits)
    }

    /// Index of the largest logit; ties go to the lower index.
    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    pub fn predict_from_hidden(&self, a1: &[f64]) -> usize {
        argmax(&self.logits_from_hidden(a1))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NluError> {
        let text = self.to_json()?;
        std::fs::write(path.as_ref(), text).map_err(|e| NluError::Io(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String, NluError> {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            model: self.clone(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| NluError::Io(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, NluError> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| NluError::Io(format!("model file: {e}")))?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(NluError::Io(format!(
                "unsupported model file {} v{}",
                file.format, file.version
            )));
        }
        file.model.check()?;
        Ok(file.model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NluError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| NluError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }
}

pub const MODEL_FORMAT: &str = "deskbot-mlp";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    model: MlpModel,
}

struct Forward {
    z1: Vec<f64>,
    a1: Vec<f64>,
    logits: Vec<f64>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Probability per intent label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentDistribution {
    pub probs: BTreeMap<String, f64>,
}

impl IntentDistribution {
    pub fn new(probs: BTreeMap<String, f64>) -> Result<Self, NluError> {
        let sum: f64 = probs.values().sum();
        if probs.len() < 2 || (sum - 1.0).abs() > 1e-6 || probs.values().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(NluError::InvalidArgument(format!(
                "not a distribution over >= 2 labels (sum {sum})"
            )));
        }
        Ok(Self { probs })
    }

    pub fn get(&self, label: &str) -> f64 {
        self.probs.get(label).copied().unwrap_or(0.0)
    }
}

pub fn classify(model: &MlpModel, f: &FeatureVector) -> Result<IntentDistribution, NluError> {
    if f.dim() != model.d_in {
        return Err(NluError::Shape(format!(
            "feature dimension {} does not match model input {}",
            f.dim(),
            model.d_in
        )));
    }
    let probs = model.probabilities(&f.0);
    Ok(IntentDistribution {
        probs: model.labels.iter().cloned().zip(probs).collect(),
    })
}

/// Featurized examples with class indices into a model's label list.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Featurizes `corpus`, mapping intent names onto `classes`.
    pub fn from_corpus(
        corpus: &[(String, String)],
        featurizer: &dyn Featurizer,
        classes: &[String],
    ) -> Result<Self, NluError> {
        let mut features = Vec::with_capacity(corpus.len());
        let mut labels = Vec::with_capacity(corpus.len());
        for (text, intent) in corpus {
            let idx = classes
                .iter()
                .position(|c| c == intent)
                .ok_or_else(|| NluError::Corpus(format!("unknown intent {intent:?}")))?;
            features.push(featurizer.featurize(&Utterance::typed(text.clone())?)?.0);
            labels.push(idx);
        }
        Ok(Self { features, labels })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            learning_rate: 0.1,
            epochs: 300,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub epochs: usize,
}

/// Gradients with the same layout as [`MlpModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Mean softmax cross-entropy over `data` and its analytic gradient.
pub fn loss_and_gradient(model: &MlpModel, data: &Dataset) -> (f64, Gradients) {
    let (d, h, k) = (model.d_in, model.hidden, model.classes());
    let mut g = Gradients {
        w1: vec![0.0; h * d],
        b1: vec![0.0; h],
        w2: vec![0.0; k * h],
        b2: vec![0.0; k],
    };
    let n = data.len().max(1) as f64;
    let mut loss = 0.0;
    for (x, &y) in data.features.iter().zip(&data.labels) {
        let fw = model.forward(x);
        let p = softmax(&fw.logits);
        loss -= p[y].max(f64::MIN_POSITIVE).ln();

        let dz2: Vec<f64> = (0..k).map(|c| (p[c] - if c == y { 1.0 } else { 0.0 }) / n).collect();
        let mut da1 = vec![0.0; h];
        for c in 0..k {
            g.b2[c] += dz2[c];
            for j in 0..h {
                g.w2[c * h + j] += dz2[c] * fw.a1[j];
                da1[j] += model.w2[c * h + j] * dz2[c];
            }
        }
        for j in 0..h {
            if fw.z1[j] <= 0.0 {
                continue;
            }
            g.b1[j] += da1[j];
            let row = &mut g.w1[j * d..(j + 1) * d];
            for (i, xi) in x.iter().enumerate() {
                if *xi != 0.0 {
                    row[i] += da1[j] * xi;
                }
            }
        }
    }
    (loss / n, g)
}

pub fn accuracy(model: &MlpModel, data: &Dataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let hits = data
        .features
        .iter()
        .zip(&data.labels)
        .filter(|(x, y)| model.predict(x) == **y)
        .count();
    hits as f64 / data.len() as f64
}

/// Full-batch gradient descent on softmax cross-entropy. Deterministic for a
/// fixed seed.
pub fn train(
    corpus: &[(String, String)],
    config: &TrainConfig,
    featurizer: &dyn Featurizer,
) -> Result<(MlpModel, TrainReport), NluError> {
    let mut classes: Vec<String> = corpus.iter().map(|(_, i)| i.clone()).collect();
    classes.sort();
    classes.dedup();
    if classes.len() < 2 {
        return Err(NluError::Corpus(format!(
            "need at least two intents, found {}",
            classes.len()
        )));
    }
    if config.hidden == 0 || !(config.learning_rate > 0.0) {
        return Err(NluError::InvalidArgument(
            "hidden size and learning rate must be positive".into(),
        ));
    }
    let data = Dataset::from_corpus(corpus, featurizer, &classes)?;
    let mut model = MlpModel::random(featurizer.dim(), config.hidden, classes, config.seed);

    let mut loss = f64::NAN;
    for _ in 0..config.epochs {
        let (l, g) = loss_and_gradient(&model, &data);
        loss = l;
        let lr = config.learning_rate;
        for (w, dw) in model.w1.iter_mut().zip(&g.w1) {
            *w -= lr * dw;
        }
        for (w, dw) in model.b1.iter_mut().zip(&g.b1) {
            *w -= lr * dw;
        }
        for (w, dw) in model.w2.iter_mut().zip(&g.w2) {
            *w -= lr * dw;
        }
        for (w, dw) in model.b2.iter_mut().zip(&g.b2) {
            *w -= lr * dw;
        }
    }
    let (final_loss, _) = loss_and_gradient(&model, &data);
    let _ = loss;
    let report = TrainReport {
        final_loss,
        train_accuracy: accuracy(&model, &data),
        epochs: config.epochs,
    };
    Ok((model, report))
}
