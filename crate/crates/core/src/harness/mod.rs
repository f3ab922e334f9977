//! Seeded trial campaigns: transcription, intent recognition and task
//! execution, counted as correct recognitions (CSR) and correct
//! performances (CP).
//!
//! Every trial of a cell draws its randomness from `derive(cell_seed, [i])`,
//! independent of lighting, clutter and detector settings. Conditions swept
//! over the same cell seed therefore see the same noise draws (common random
//! numbers), which makes condition-to-condition differences reflect the
//! condition alone.

mod campaign;
mod published;
mod report;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsm::{FsmError, Machine, MachineConfig, StateId, TransitionRecord};
use crate::kinematics::DhChain;
use crate::nlu::{
    transcribe, Intent, NluError, NluPipeline, PressEnd, TrainConfig, TranscriptRequest, DEFAULT_THRESHOLD,
    EXPERIMENT_COMMANDS,
};
use crate::par::{self, Execution};
use crate::perception::{CameraModel, DetectorConfig, Lighting, Locator, Scene};
use crate::seed;

pub use campaign::{campaign, CampaignConfig, CampaignReport, CampaignTable, CommandConfig, NluProfile, TableConfig};
pub use published::{published_tables, Mismatch, PublishedRow, PublishedTable};
pub use report::{emit_report, execution_rate, Ratio, ReportFormat, ReportRow};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid trial spec: {0}")]
    InvalidSpec(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Nlu(#[from] NluError),
    #[error(transparent)]
    Fsm(#[from] FsmError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Door,
    Switch,
    Cup,
}

impl std::str::FromStr for Task {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_lowercase()))
            .map_err(|_| HarnessError::InvalidSpec(format!("unknown task {s:?}")))
    }
}

pub const DEFAULT_TRIALS: u32 = 500;
pub const DEFAULT_MAX_TICKS: u64 = 4000;

fn default_trials() -> u32 {
    DEFAULT_TRIALS
}

fn default_max_ticks() -> u64 {
    DEFAULT_MAX_TICKS
}

/// One experimental cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub task: Task,
    pub command_text: String,
    /// Defaults from the task (Door, Cup) or the experiment command list.
    #[serde(default)]
    pub expected_intent: Option<Intent>,
    #[serde(default)]
    pub lighting: Lighting,
    #[serde(default)]
    pub clutter_fraction: f64,
    #[serde(default)]
    pub wer: f64,
    #[serde(default = "default_trials")]
    pub trials: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_ticks")]
    pub max_ticks: u64,
}

impl TrialSpec {
    pub fn new(task: Task, command_text: impl Into<String>) -> Self {
        Self {
            task,
            command_text: command_text.into(),
            expected_intent: None,
            lighting: Lighting::Bright,
            clutter_fraction: 0.0,
            wer: 0.0,
            trials: DEFAULT_TRIALS,
            seed: 0,
            max_ticks: DEFAULT_MAX_TICKS,
        }
    }

    /// The intent a correct recognition must produce.
    pub fn resolved_intent(&self) -> Result<Intent, HarnessError> {
        if let Some(i) = self.expected_intent {
            return Ok(i);
        }
        match self.task {
            Task::Door => Ok(Intent::OpenDoor),
            Task::Cup => Ok(Intent::FetchObject),
            Task::Switch => EXPERIMENT_COMMANDS
                .iter()
                .find(|(_, text, _)| text.eq_ignore_ascii_case(self.command_text.trim()))
                .and_then(|(_, _, intent)| intent.parse().ok())
                .ok_or_else(|| {
                    HarnessError::InvalidSpec(format!(
                        "switch command {:?} needs an explicit expected_intent",
                        self.command_text
                    ))
                }),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidSpec(m));
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.clutter_fraction) {
            return bad(format!("clutter fraction {} outside [0, 1]", self.clutter_fraction));
        }
        if !(0.0..=1.0).contains(&self.wer) {
            return bad(format!("wer {} outside [0, 1]", self.wer));
        }
        if self.command_text.trim().is_empty() {
            return bad("empty command".into());
        }
        if self.max_ticks == 0 {
            return bad("max_ticks must be positive".into());
        }
        let intent = self.resolved_intent()?;
        let fits = match self.task {
            Task::Door => intent == Intent::OpenDoor,
            Task::Switch => matches!(intent, Intent::LightOn | Intent::LightOff),
            Task::Cup => intent == Intent::FetchObject,
        };
        if !fits {
            return bad(format!("intent {intent} does not belong to task {:?}", self.task));
        }
        Ok(())
    }
}

/// Outcome of one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: u32,
    pub seed: u64,
    pub transcript: String,
    pub recognized_intent: Option<String>,
    pub confidence: f64,
    /// CSR event.
    pub intent_correct: bool,
    /// CP event.
    pub task_outcome: bool,
    pub final_state: StateId,
    pub fault_reason: Option<String>,
    pub ticks: u64,
    pub trace: Vec<TransitionRecord>,
}

/// All trials of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialTable {
    pub label: String,
    pub spec: TrialSpec,
    pub detector: Option<String>,
    pub nlu: Option<String>,
    pub records: Vec<TrialRecord>,
}

impl TrialTable {
    pub fn n(&self) -> u64 {
        self.records.len() as u64
    }

    pub fn csr(&self) -> u64 {
        self.records.iter().filter(|r| r.intent_correct).count() as u64
    }

    pub fn cp(&self) -> u64 {
        self.records.iter().filter(|r| r.task_outcome).count() as u64
    }

    pub fn csr_er(&self) -> Ratio {
        Ratio {
            correct: self.csr(),
            total: self.n(),
        }
    }

    pub fn cp_er(&self) -> Ratio {
        Ratio {
            correct: self.cp(),
            total: self.n(),
        }
    }

    /// Row with the sweep columns this cell sets.
    pub fn row(&self) -> ReportRow {
        let mut r = ReportRow::new(self.label.clone(), self.csr(), self.cp(), self.n());
        r.lighting = Some(self.spec.lighting);
        r.clutter = Some(self.spec.clutter_fraction);
        r.wer = Some(self.spec.wer);
        r.detector = self.detector.clone();
        r.nlu = self.nlu.clone();
        r
    }
}

/// Goal tolerances for the delivery task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GoalConfig {
    /// Horizontal distance from the hand center.
    pub cup_radius: f64,
    /// Vertical slack when checking the cup rests on the hand.
    pub rest_tolerance: f64,
}

impl Default for GoalConfig {
    fn default() -> Self {
        Self {
            cup_radius: 0.03,
            rest_tolerance: 1e-3,
        }
    }
}

/// Everything a trial needs besides its spec. Shared read-only across
/// parallel trials.
#[derive(Debug, Clone)]
pub struct Harness {
    pub nlu: Arc<NluPipeline>,
    pub chain: DhChain,
    pub scene: Scene,
    pub machine: MachineConfig,
    pub camera: CameraModel,
    pub detector: DetectorConfig,
    pub goal: GoalConfig,
}

impl Harness {
    /// Desk defaults: the trained desk classifier, the five-joint desk arm and the
    /// office scene.
    pub fn desk() -> Result<Self, HarnessError> {
        let nlu = NluPipeline::train_desk(&TrainConfig::default(), DEFAULT_THRESHOLD)?;
        Ok(Self::with_nlu(Arc::new(nlu)))
    }

    pub fn with_nlu(nlu: Arc<NluPipeline>) -> Self {
        Self {
            nlu,
            chain: DhChain::table1(),
            scene: Scene::office(),
            machine: MachineConfig::default(),
            camera: CameraModel::default(),
            detector: DetectorConfig::default(),
            goal: GoalConfig::default(),
        }
    }

    fn check_scene(&self, task: Task) -> Result<(), HarnessError> {
        let needed: &[&str] = match task {
            Task::Door => &["door_switch"],
            Task::Switch => &["light_switch"],
            Task::Cup => &["paper_cup", "hand"],
        };
        for class in needed {
            if self.scene.find(class).is_none() {
                return Err(HarnessError::Config(format!("scene has no {class}")));
            }
        }
        Ok(())
    }

    /// Runs one trial. Deterministic in `(spec, index)`.
    pub fn run_trial(&self, spec: &TrialSpec, index: u32) -> Result<TrialRecord, HarnessError> {
        let expected = spec.resolved_intent()?;
        let trial_seed = seed::derive(spec.seed, &[index as u64]);
        let utterance = transcribe(&TranscriptRequest {
            true_text: spec.command_text.clone(),
            wer: spec.wer,
            seed: seed::derive(trial_seed, &[1]),
            mode: Default::default(),
        })?;

        let interpreted = self.nlu.interpret(&utterance);
        let (recognized, confidence, command) = match interpreted {
            Ok(r) => (r.intent, r.confidence, Some(r.command)),
            // Recognized but not executable: counts for CSR, never for CP.
            Err(NluError::Unbindable { intent, .. }) => (Some(intent), f64::NAN, None),
            Err(e) => return Err(e.into()),
        };
        let intent_correct = recognized.as_deref() == Some(expected.as_str());

        let mut record = TrialRecord {
            index,
            seed: trial_seed,
            transcript: utterance.text().to_string(),
            recognized_intent: recognized,
            confidence,
            intent_correct,
            task_outcome: false,
            final_state: StateId::Idle,
            fault_reason: None,
            ticks: 0,
            trace: Vec::new(),
        };
        let Some(command) = command else { return Ok(record) };

        let mut scene = self.scene.clone();
        scene.lighting = spec.lighting;
        scene.clutter_fraction = spec.clutter_fraction;
        let config = MachineConfig {
            seed: seed::derive(trial_seed, &[2]),
            ..self.machine.clone()
        };
        let locator = Locator::new(self.camera, self.detector);
        let mut machine = Machine::desk_with(scene, config, locator, self.chain.clone())?;
        let start = machine.tick_count();
        let run = machine.run_scenario(command, spec.max_ticks);
        record.ticks = machine.tick_count() - start;
        record.final_state = machine.state();
        record.fault_reason = machine.store().fault_reason.clone();
        record.trace = match run {
            Ok(trace) => trace,
            Err(FsmError::Timeout { trace, .. }) => trace,
            Err(e) => return Err(e.into()),
        };
        record.task_outcome = ends_in_reset_idle(&record.trace) && goal_met(&machine, expected, &self.goal);
        Ok(record)
    }

    /// Runs every trial of a cell; trials are independent and may run in
    /// parallel, the result is in trial order either way.
    pub fn run_trials(&self, spec: &TrialSpec, label: &str, exec: Execution) -> Result<TrialTable, HarnessError> {
        spec.validate()?;
        self.check_scene(spec.task)?;
        let records = par::try_map_indexed(spec.trials as usize, exec, |i| self.run_trial(spec, i as u32))?;
        Ok(TrialTable {
            label: label.to_string(),
            spec: spec.clone(),
            detector: None,
            nlu: None,
            records,
        })
    }
}

/// The last transition is Reset to Idle.
pub fn ends_in_reset_idle(trace: &[TransitionRecord]) -> bool {
    trace
        .last()
        .is_some_and(|t| t.from == StateId::Reset && t.to == StateId::Idle)
}

/// Task goal on the final world state.
///
/// Door: the door switch was pressed at its far end. Switch: the end that
/// the intent requires was pressed and the opposite end was not. Cup: the
/// cup stands on the hand within `cup_radius` of its center and nothing is
/// held. The simulated cup never tilts, so it is always upright.
pub fn goal_met(machine: &Machine, intent: Intent, goal: &GoalConfig) -> bool {
    let world = machine.world();
    let pressed = |class: &str, end: PressEnd| world.presses().iter().any(|p| p.class_label == class && p.end == end);
    match intent {
        Intent::OpenDoor => pressed("door_switch", PressEnd::Far),
        Intent::LightOn => pressed("light_switch", PressEnd::Near) && !pressed("light_switch", PressEnd::Far),
        Intent::LightOff => pressed("light_switch", PressEnd::Far) && !pressed("light_switch", PressEnd::Near),
        Intent::FetchObject => {
            let scene = world.scene();
            let (Some(cup), Some(hand)) = (scene.find("paper_cup"), scene.find("hand")) else {
                return false;
            };
            let offset = (cup.center_world - hand.center_world).xy().norm();
            let rest = hand.center_world.z + hand.half_extents.z + cup.half_extents.z;
            world.holding().is_none()
                && offset <= goal.cup_radius
                && (cup.center_world.z - rest).abs() <= goal.rest_tolerance
        }
    }
}
