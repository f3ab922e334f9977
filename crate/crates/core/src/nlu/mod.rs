//! Utterance to executable command: featurize, classify, threshold, fill
//! slots, bind.

mod corpus;
mod mlp;
mod slots;
mod text;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use corpus::{
    desk_corpus, desk_heldout, experiment_command, load_corpus, parse_corpus, write_corpus, Corpus, EXPERIMENT_COMMANDS,
};
pub use mlp::{
    accuracy, argmax, classify, loss_and_gradient, softmax, train, Dataset, Gradients, IntentDistribution, MlpModel,
    TrainConfig, TrainReport, MODEL_FORMAT, MODEL_VERSION,
};
pub use slots::{fill_slots, Slots, AMBIGUOUS, DESTINATION, TARGET};
pub use text::{
    fnv1a64, tokenize, transcribe, CorruptionMode, FeatureVector, Featurizer, HashedNgrams, Source, TranscriptRequest,
    Utterance,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NluError {
    #[error("utterance has no tokens")]
    EmptyUtterance,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("intent {intent} cannot be bound to a command: {reason}")]
    Unbindable { intent: String, reason: String },
}

pub const DEFAULT_THRESHOLD: f64 = 0.6;

/// The executable intents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intent {
    FetchObject,
    LightOff,
    LightOn,
    OpenDoor,
}

impl Intent {
    pub const ALL: [Intent; 4] = [Intent::FetchObject, Intent::LightOff, Intent::LightOn, Intent::OpenDoor];

    pub fn as_str(self) -> &'static str {
        match self {
            Intent::FetchObject => "fetch_object",
            Intent::LightOff => "light_off",
            Intent::LightOn => "light_on",
            Intent::OpenDoor => "open_door",
        }
    }

    /// The switch a press intent operates.
    pub fn actuator(self) -> Option<&'static str> {
        match self {
            Intent::LightOn | Intent::LightOff => Some("light_switch"),
            Intent::OpenDoor => Some("door_switch"),
            Intent::FetchObject => None,
        }
    }
}

impl fmt::Display for Intent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Intent {
    type Err = NluError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Intent::ALL
            .into_iter()
            .find(|i| i.as_str() == s)
            .ok_or_else(|| NluError::InvalidArgument(format!("unknown intent {s:?}")))
    }
}

/// Argmax label and its probability, or `None` when that probability is
/// below `threshold`. Ties go to the alphabetically first label.
pub fn select_intent(dist: &IntentDistribution, threshold: f64) -> (Option<String>, f64) {
    let mut best: Option<(&String, f64)> = None;
    // BTreeMap iterates alphabetically; strict > keeps the first of a tie.
    for (label, &p) in &dist.probs {
        if best.is_none_or(|(_, bp)| p > bp) {
            best = Some((label, p));
        }
    }
    match best {
        Some((label, p)) if p >= threshold => (Some(label.clone()), p),
        Some((_, p)) => (None, p),
        None => (None, 0.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PressEnd {
    Near,
    Far,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "function")]
pub enum Command {
    PressTarget {
        target_class: String,
        press_end: PressEnd,
    },
    FetchToTarget {
        target_class: String,
        destination_class: String,
        #[serde(default)]
        ambiguous: bool,
    },
    Noop,
}

impl Command {
    pub fn target_class(&self) -> Option<&str> {
        match self {
            Command::PressTarget { target_class, .. } | Command::FetchToTarget { target_class, .. } => {
                Some(target_class)
            }
            Command::Noop => None,
        }
    }
}

/// Maps an intent and its slots onto a command. Press intents default their
/// target to the intent's switch; fetches default the destination to the hand
/// but need an object.
pub fn bind(intent: &str, slots: &Slots) -> Result<Command, NluError> {
    let unbindable = |reason: &str| NluError::Unbindable {
        intent: intent.to_string(),
        reason: reason.to_string(),
    };
    let parsed: Intent = intent.parse().map_err(|_| unbindable("no command for this intent"))?;
    match parsed {
        Intent::LightOn | Intent::LightOff | Intent::OpenDoor => {
            let default = parsed.actuator().expect("press intents have an actuator");
            let target = slots.get(TARGET).map(String::as_str).unwrap_or(default);
            if target != default {
                return Err(unbindable(&format!("target {target} is not {default}")));
            }
            let press_end = if parsed == Intent::LightOn {
                PressEnd::Near
            } else {
                PressEnd::Far
            };
            Ok(Command::PressTarget {
                target_class: target.to_string(),
                press_end,
            })
        }
        Intent::FetchObject => {
            let target = slots.get(TARGET).ok_or_else(|| unbindable("no object named"))?;
            if target.ends_with("_switch") {
                return Err(unbindable(&format!("{target} cannot be fetched")));
            }
            Ok(Command::FetchToTarget {
                target_class: target.clone(),
                destination_class: slots.get(DESTINATION).cloned().unwrap_or_else(|| "hand".into()),
                ambiguous: slots.get(AMBIGUOUS).is_some_and(|v| v == "true"),
            })
        }
    }
}

/// Classifier output plus slots and the bound command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentResult {
    /// `None` is Unknown: the top probability fell below the threshold.
    pub intent: Option<String>,
    pub confidence: f64,
    pub slots: Slots,
    pub command: Command,
    pub distribution: BTreeMap<String, f64>,
}

/// Featurizer, classifier and threshold. Immutable once built.
pub struct NluPipeline {
    featurizer: Box<dyn Featurizer>,
    model: MlpModel,
    threshold: f64,
}

impl fmt::Debug for NluPipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NluPipeline")
            .field("labels", &self.model.labels)
            .field("threshold", &self.threshold)
            .finish()
    }
}

impl NluPipeline {
    pub fn new(featurizer: Box<dyn Featurizer>, model: MlpModel, threshold: f64) -> Result<Self, NluError> {
        model.check()?;
        if featurizer.dim() != model.d_in {
            return Err(NluError::Shape(format!(
                "featurizer dim {} vs model input {}",
                featurizer.dim(),
                model.d_in
            )));
        }
        if !(0.0..=1.0).contains(&threshold) {
            return Err(NluError::InvalidArgument(format!(
                "threshold {threshold} outside [0, 1]"
            )));
        }
        Ok(Self {
            featurizer,
            model,
            threshold,
        })
    }

    /// Hashed n-grams with a model trained on [`desk_corpus`].
    pub fn desk_default() -> Result<Self, NluError> {
        Self::train_desk(&TrainConfig::default(), DEFAULT_THRESHOLD)
    }

    pub fn train_desk(config: &TrainConfig, threshold: f64) -> Result<Self, NluError> {
        let featurizer = HashedNgrams::default();
        let (model, _) = train(&desk_corpus(), config, &featurizer)?;
        Self::new(Box::new(featurizer), model, threshold)
    }

    pub fn model(&self) -> &MlpModel {
        &self.model
    }

    pub fn featurizer(&self) -> &dyn Featurizer {
        self.featurizer.as_ref()
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn with_threshold(mut self, threshold: f64) -> Result<Self, NluError> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(NluError::InvalidArgument(format!(
                "threshold {threshold} outside [0, 1]"
            )));
        }
        self.threshold = threshold;
        Ok(self)
    }

    pub fn distribution(&self, u: &Utterance) -> Result<IntentDistribution, NluError> {
        classify(&self.model, &self.featurizer.featurize(u)?)
    }

    /// Unknown yields [`Command::Noop`]; a recognized intent that cannot be
    /// bound is an [`NluError::Unbindable`].
    pub fn interpret(&self, u: &Utterance) -> Result<IntentResult, NluError> {
        let dist = self.distribution(u)?;
        let (intent, confidence) = select_intent(&dist, self.threshold);
        let (slots, command) = match &intent {
            None => (Slots::new(), Command::Noop),
            Some(label) => {
                let slots = label.parse::<Intent>().map(|i| fill_slots(u, i)).unwrap_or_default();
                let command = bind(label, &slots)?;
                (slots, command)
            }
        };
        Ok(IntentResult {
            intent,
            confidence,
            slots,
            command,
            distribution: dist.probs,
        })
    }

    pub fn interpret_text(&self, text: &str) -> Result<IntentResult, NluError> {
        self.interpret(&Utterance::typed(text)?)
    }
}
