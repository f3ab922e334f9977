use rand::Rng;
use serde::{Deserialize, Serialize};

use super::NluError;
use crate::seed;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    #[default]
    Typed,
    Transcribed,
}

/// One command, typed or transcribed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    text: String,
    source: Source,
}

impl Utterance {
    pub fn new(text: impl Into<String>, source: Source) -> Result<Self, NluError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(NluError::EmptyUtterance);
        }
        Ok(Self { text, source })
    }

    pub fn typed(text: impl Into<String>) -> Result<Self, NluError> {
        Self::new(text, Source::Typed)
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn source(&self) -> Source {
        self.source
    }
}

/// Lowercased alphanumeric tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionMode {
    /// Substitute a near-homophone when one is known, otherwise drop.
    #[default]
    Mixed,
    DropOnly,
}

/// Stand-in for a speech recognizer: the true text plus a word error rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRequest {
    pub true_text: String,
    pub wer: f64,
    pub seed: u64,
    #[serde(default)]
    pub mode: CorruptionMode,
}

/// Near-homophones for the command vocabulary, both directions.
const CONFUSIONS: &[(&str, &str)] = &[
    ("light", "right"),
    ("lights", "rights"),
    ("door", "drawer"),
    ("cup", "cap"),
    ("on", "own"),
    ("off", "of"),
    ("water", "waiter"),
    ("open", "oven"),
    ("switch", "stitch"),
    ("hand", "and"),
    ("sleep", "slip"),
    ("dark", "duck"),
    ("paper", "pepper"),
    ("pass", "past"),
];

fn confusion_for(word: &str) -> Option<&'static str> {
    CONFUSIONS.iter().find_map(|&(a, b)| {
        if word == a {
            Some(b)
        } else if word == b {
            Some(a)
        } else {
            None
        }
    })
}

/// Corrupts each whitespace-separated word independently with probability
/// `wer`. At least one word always survives: if every word would be dropped,
/// the first original word is kept.
pub fn transcribe(req: &TranscriptRequest) -> Result<Utterance, NluError> {
    if !(0.0..=1.0).contains(&req.wer) {
        return Err(NluError::InvalidArgument(format!("wer {} outside [0, 1]", req.wer)));
    }
    let mut rng = seed::rng(req.seed);
    let words: Vec<&str> = req.true_text.split_whitespace().collect();
    let mut out: Vec<String> = Vec::with_capacity(words.len());
    for word in &words {
        // Fixed draw count per word keeps streams aligned across WER levels.
        let hit: f64 = rng.random();
        let substitute: bool = rng.random();
        if hit >= req.wer {
            out.push((*word).to_string());
            continue;
        }
        let core: String = word
            .chars()
            .filter(|c| c.is_alphanumeric())
            .collect::<String>()
            .to_lowercase();
        match (req.mode, confusion_for(&core)) {
            (CorruptionMode::Mixed, Some(alt)) if substitute => out.push(alt.to_string()),
            _ => {}
        }
    }
    if out.is_empty() {
        if let Some(first) = words.first() {
            out.push((*first).to_string());
        }
    }
    Utterance::new(out.join(" "), Source::Transcribed)
}

/// Fixed-dimension, finite, L2-normalized sentence features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &FeatureVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

/// Sentence encoder interface. The shipped implementation is
/// [`HashedNgrams`]; any encoder with a fixed output size can replace it.
pub trait Featurizer: Send + Sync {
    fn dim(&self) -> usize;
    fn featurize(&self, u: &Utterance) -> Result<FeatureVector, NluError>;
}

pub const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Signed feature hashing of unigrams and bigrams (bigram key: `"a b"`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashedNgrams {
    pub dim: usize,
}

impl Default for HashedNgrams {
    fn default() -> Self {
        Self { dim: 256 }
    }
}

impl HashedNgrams {
    fn add(&self, acc: &mut [f64], key: &str) {
        let h = fnv1a64(key.as_bytes());
        let bucket = (h % self.dim as u64) as usize;
        acc[bucket] += if h >> 63 == 1 { -1.0 } else { 1.0 };
    }
}

impl Featurizer for HashedNgrams {
    fn dim(&self) -> usize {
        self.dim
    }

    fn featurize(&self, u: &Utterance) -> Result<FeatureVector, NluError> {
        let tokens = tokenize(u.text());
        if tokens.is_empty() {
            return Err(NluError::EmptyUtterance);
        }
        let mut v = vec![0.0; self.dim];
        for t in &tokens {
            self.add(&mut v, t);
        }
        for pair in tokens.windows(2) {
            self.add(&mut v, &format!("{} {}", pair[0], pair[1]));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(FeatureVector(v))
    }
}
