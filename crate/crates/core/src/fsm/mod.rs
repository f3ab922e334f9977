//! The action state machine.
//!
//! Basic states run actions against the simulated [`World`]; special states
//! (Fault, Stuck, Collision) are entered through wildcard-source transitions
//! that are checked on every tick, before and regardless of the current
//! action. State-specific transitions are checked only once the current
//! action has completed, highest priority first. At most one transition
//! fires per tick.

mod world;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{forward_kinematics, inverse_kinematics, DhChain, IkOptions, KinematicsError, Pose};
use crate::nlu::{Command, PressEnd};
use crate::perception::{Locator, Query, Scene};
use crate::seed;

pub use world::{PressEvent, StuckRule, World, WorldSnapshot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StateId {
    Idle,
    UserInput,
    Search,
    Move,
    Press,
    Grab,
    Place,
    Reset,
    Fault,
    Stuck,
    Collision,
}

impl StateId {
    pub const ALL: [StateId; 11] = [
        StateId::Idle,
        StateId::UserInput,
        StateId::Search,
        StateId::Move,
        StateId::Press,
        StateId::Grab,
        StateId::Place,
        StateId::Reset,
        StateId::Fault,
        StateId::Stuck,
        StateId::Collision,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StateId::Idle => "Idle",
            StateId::UserInput => "UserInput",
            StateId::Search => "Search",
            StateId::Move => "Move",
            StateId::Press => "Press",
            StateId::Grab => "Grab",
            StateId::Place => "Place",
            StateId::Reset => "Reset",
            StateId::Fault => "Fault",
            StateId::Stuck => "Stuck",
            StateId::Collision => "Collision",
        }
    }

    /// Fault, Stuck and Collision.
    pub fn is_special(self) -> bool {
        matches!(self, StateId::Fault | StateId::Stuck | StateId::Collision)
    }
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StateId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StateId::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown state {s:?}"))
    }
}

/// Behavior bound to a state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Idle,
    UserInput,
    Search,
    Move,
    Press,
    Grab,
    Place,
    Reset,
    Fault,
    Stuck,
    Collision,
}

impl FromStr for Action {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown action {s:?}"))
    }
}

/// Source written as `"*"` in spec files.
pub const ARBITRARY: &str = "*";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSpec {
    pub name: String,
    pub action: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionSpec {
    pub from: String,
    pub to: String,
    pub guard: String,
    pub priority: i32,
}

/// Structured-config form of a machine, before validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineSpec {
    pub name: String,
    pub initial: String,
    pub states: Vec<StateSpec>,
    pub transitions: Vec<TransitionSpec>,
}

impl MachineSpec {
    /// Press, fetch and safety handling for the desk arm.
    pub fn desk() -> Self {
        Self::from_json(include_str!("../../assets/desk_machine.json")).expect("shipped machine spec parses")
    }

    pub fn from_json(text: &str) -> Result<Self, FsmError> {
        serde_json::from_str(text).map_err(|e| FsmError::Config(format!("machine spec: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FsmError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| FsmError::Config(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Source {
    Arbitrary,
    State(StateId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub from: Source,
    pub to: StateId,
    pub guard: String,
    pub priority: i32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum ValidationError {
    #[error("unknown state {name:?} in {context}")]
    UnknownState { name: String, context: String },
    #[error("state {name} declared twice")]
    DuplicateState { name: String },
    #[error("state {state} has unknown action {action:?}")]
    UnknownAction { state: String, action: String },
    #[error("transition {from} -> {to} uses unregistered guard {guard:?}")]
    UnknownGuard { from: String, to: String, guard: String },
    #[error("priority {priority} used twice from {from}")]
    DuplicatePriority { from: String, priority: i32 },
    #[error("state {state} is unreachable from the initial state")]
    Unreachable { state: String },
    #[error("state {state} has no way out")]
    DeadEnd { state: String },
}

/// A machine spec that passed [`validate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidatedSpec {
    pub name: String,
    pub initial: StateId,
    pub states: BTreeMap<StateId, Action>,
    /// Wildcard-source transitions, highest priority first.
    pub arbitrary: Vec<Transition>,
    /// Per-state transitions, highest priority first.
    pub outgoing: BTreeMap<StateId, Vec<Transition>>,
}

impl ValidatedSpec {
    pub fn has_state(&self, s: StateId) -> bool {
        self.states.contains_key(&s)
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.arbitrary.iter().chain(self.outgoing.values().flatten())
    }
}

/// Checks states, actions, guards, priorities, reachability and dead ends,
/// reporting every violation found.
pub fn validate(spec: &MachineSpec, guards: &GuardRegistry) -> Result<ValidatedSpec, Vec<ValidationError>> {
    let mut errors = Vec::new();
    let mut states = BTreeMap::new();
    for s in &spec.states {
        let Ok(id) = s.name.parse::<StateId>() else {
            errors.push(ValidationError::UnknownState {
                name: s.name.clone(),
                context: "states".into(),
            });
            continue;
        };
        match s.action.parse::<Action>() {
            Ok(a) => {
                if states.insert(id, a).is_some() {
                    errors.push(ValidationError::DuplicateState { name: s.name.clone() });
                }
            }
            Err(_) => errors.push(ValidationError::UnknownAction {
                state: s.name.clone(),
                action: s.action.clone(),
            }),
        }
    }

    let known = |name: &str, context: &str, errors: &mut Vec<ValidationError>| -> Option<StateId> {
        match name.parse::<StateId>() {
            Ok(id) if states.contains_key(&id) => Some(id),
            _ => {
                errors.push(ValidationError::UnknownState {
                    name: name.to_string(),
                    context: context.to_string(),
                });
                None
            }
        }
    };
    let initial = known(&spec.initial, "initial", &mut errors);

    let mut arbitrary = Vec::new();
    let mut outgoing: BTreeMap<StateId, Vec<Transition>> = BTreeMap::new();
    let mut priorities: BTreeSet<(Source, i32)> = BTreeSet::new();
    for t in &spec.transitions {
        let context = format!("transition {} -> {}", t.from, t.to);
        let from = if t.from == ARBITRARY {
            Some(Source::Arbitrary)
        } else {
            known(&t.from, &context, &mut errors).map(Source::State)
        };
        let to = known(&t.to, &context, &mut errors);
        if !guards.contains(&t.guard) {
            errors.push(ValidationError::UnknownGuard {
                from: t.from.clone(),
                to: t.to.clone(),
                guard: t.guard.clone(),
            });
        }
        let (Some(from), Some(to)) = (from, to) else { continue };
        if !priorities.insert((from, t.priority)) {
            errors.push(ValidationError::DuplicatePriority {
                from: t.from.clone(),
                priority: t.priority,
            });
        }
        let tr = Transition {
            from,
            to,
            guard: t.guard.clone(),
            priority: t.priority,
        };
        match from {
            Source::Arbitrary => arbitrary.push(tr),
            Source::State(s) => outgoing.entry(s).or_default().push(tr),
        }
    }
    arbitrary.sort_by_key(|t| std::cmp::Reverse(t.priority));
    for list in outgoing.values_mut() {
        list.sort_by_key(|t| std::cmp::Reverse(t.priority));
    }

    if let Some(initial) = initial {
        // Edges: explicit, wildcard, and dispatch into UserInput.
        let mut seen = BTreeSet::from([initial]);
        let mut queue = VecDeque::from([initial]);
        while let Some(s) = queue.pop_front() {
            let mut next: Vec<StateId> = outgoing.get(&s).into_iter().flatten().map(|t| t.to).collect();
            next.extend(arbitrary.iter().map(|t| t.to));
            if !s.is_special() && states.contains_key(&StateId::UserInput) {
                next.push(StateId::UserInput);
            }
            for n in next {
                if seen.insert(n) {
                    queue.push_back(n);
                }
            }
        }
        for s in states.keys() {
            if !seen.contains(s) {
                errors.push(ValidationError::Unreachable { state: s.to_string() });
            }
        }
        for s in states.keys() {
            let rest = *s == initial || *s == StateId::Idle || s.is_special();
            if !rest && outgoing.get(s).is_none_or(|v| v.is_empty()) {
                errors.push(ValidationError::DeadEnd { state: s.to_string() });
            }
        }
    }

    if errors.is_empty() {
        Ok(ValidatedSpec {
            name: spec.name.clone(),
            initial: initial.expect("checked"),
            states,
            arbitrary,
            outgoing,
        })
    } else {
        Err(errors)
    }
}

/// Task globals shared between actions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GlobalStore {
    pub target_name: Option<String>,
    /// Where the next Move puts the probe (surface point).
    pub end_position: Option<Vector3<f64>>,
    pub destination_position: Option<Vector3<f64>>,
    pub fault_reason: Option<String>,
    pub command: Option<Command>,
    pub alert: bool,
    /// The approach move above the current target is done.
    pub approached: bool,
    pub search_ok: bool,
    pub searches: u32,
    pub contact_attempts: u32,
    /// End effector height above the probe point while carrying.
    pub carry_height: f64,
}

impl GlobalStore {
    fn clear_task(&mut self) {
        let keep = (self.fault_reason.take(), self.alert, self.searches);
        *self = Self::default();
        (self.fault_reason, self.alert, self.searches) = keep;
    }

    /// Writes one externally settable variable. `null` unsets.
    pub fn set_var(&mut self, name: &str, value: &serde_json::Value) -> Result<(), FsmError> {
        let invalid = |reason: &str| FsmError::InvalidValue {
            name: name.to_string(),
            reason: reason.to_string(),
        };
        let text = || -> Result<Option<String>, FsmError> {
            match value {
                serde_json::Value::Null => Ok(None),
                serde_json::Value::String(s) => Ok(Some(s.clone())),
                _ => Err(invalid("expected string or null")),
            }
        };
        let point = || -> Result<Option<Vector3<f64>>, FsmError> {
            if value.is_null() {
                return Ok(None);
            }
            let v: [f64; 3] =
                serde_json::from_value(value.clone()).map_err(|_| invalid("expected [x, y, z] or null"))?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(invalid("non-finite coordinate"));
            }
            Ok(Some(Vector3::from(v)))
        };
        match name {
            "target_name" => self.target_name = text()?,
            "fault_reason" => self.fault_reason = text()?,
            "end_position" => self.end_position = point()?,
            "destination_position" => self.destination_position = point()?,
            "alert" => self.alert = value.as_bool().ok_or_else(|| invalid("expected bool"))?,
            _ => return Err(FsmError::UnknownVariable(name.to_string())),
        }
        Ok(())
    }
}

/// Inputs visible to a guard.
pub struct GuardContext<'a> {
    pub state: StateId,
    pub tick: u64,
    pub action_done: bool,
    pub store: &'a GlobalStore,
    pub world: &'a WorldSnapshot,
}

pub type GuardFn = Arc<dyn Fn(&GuardContext<'_>) -> Result<bool, String> + Send + Sync>;

/// Named predicates referenced by machine specs.
#[derive(Clone, Default)]
pub struct GuardRegistry {
    guards: BTreeMap<String, GuardFn>,
}

impl fmt::Debug for GuardRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.guards.keys()).finish()
    }
}

fn touching(c: &GuardContext<'_>) -> Result<bool, String> {
    if c.store.end_position.is_none() {
        return Err("touch check without end_position".into());
    }
    Ok(c.world.contact.is_some() && c.world.contact == c.store.target_name)
}

impl GuardRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn standard() -> Self {
        let mut r = Self::empty();
        r.register("always", |_| Ok(true));
        r.register("fault", |c| Ok(c.store.fault_reason.is_some()));
        r.register("collision", |c| Ok(c.world.collision));
        r.register("stuck", |c| Ok(c.world.stuck));
        r.register("fault_cleared", |c| Ok(c.store.fault_reason.is_none()));
        r.register("has_target", |c| {
            Ok(c.store.command.as_ref().is_some_and(|cmd| cmd.target_class().is_some()))
        });
        r.register("no_command", |c| {
            Ok(c.store.command.as_ref().is_none_or(|cmd| cmd.target_class().is_none()))
        });
        r.register("located", |c| Ok(c.store.search_ok && c.store.end_position.is_some()));
        r.register("touching", touching);
        r.register("not_touching", |c| touching(c).map(|t| !t));
        r.register("touching_press", |c| {
            Ok(touching(c)? && matches!(c.store.command, Some(Command::PressTarget { .. })))
        });
        r.register("touching_grab", |c| {
            Ok(touching(c)?
                && matches!(c.store.command, Some(Command::FetchToTarget { .. }))
                && c.world.holding.is_none())
        });
        r.register("touching_place", |c| Ok(touching(c)? && c.world.holding.is_some()));
        r.register("holding", |c| Ok(c.world.holding.is_some()));
        r
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        f: impl Fn(&GuardContext<'_>) -> Result<bool, String> + Send + Sync + 'static,
    ) {
        self.guards.insert(name.into(), Arc::new(f));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.guards.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&GuardFn> {
        self.guards.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.guards.keys().map(String::as_str)
    }
}

/// Invented task constants. Distances in meters, angles in degrees in the
/// file form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MachineConfig {
    pub touch_tolerance: f64,
    pub approach_offset: f64,
    pub press_depth: f64,
    /// Distance from the switch center to the pressed end.
    pub press_offset: f64,
    pub search_attempts: u32,
    pub contact_attempts: u32,
    /// Per tick, per joint (radians).
    pub max_joint_step: f64,
    pub stuck_threshold: f64,
    pub stuck_ticks: u32,
    pub observe_pose_deg: Vec<f64>,
    pub rest_pose_deg: Vec<f64>,
    /// Confidence multiplier for targets named only vaguely.
    pub ambiguity_grounding: f64,
    pub tick_ms: u64,
    pub seed: u64,
}

impl Default for MachineConfig {
    fn default() -> Self {
        Self {
            touch_tolerance: 0.005,
            approach_offset: 0.02,
            press_depth: 0.005,
            press_offset: 0.015,
            search_attempts: 3,
            contact_attempts: 3,
            max_joint_step: 0.05,
            stuck_threshold: 0.1,
            stuck_ticks: 5,
            observe_pose_deg: vec![0.0, -60.0, 60.0, 0.0, 0.0],
            rest_pose_deg: vec![0.0; 5],
            ambiguity_grounding: 0.5,
            tick_ms: 20,
            seed: 0,
        }
    }
}

impl MachineConfig {
    fn pose(deg: &[f64], chain: &DhChain) -> Vec<f64> {
        let mut q: Vec<f64> = deg.iter().map(|d| d.to_radians()).collect();
        q.resize(chain.dof(), 0.0);
        q.iter_mut()
            .zip(chain.links())
            .for_each(|(v, l)| *v = v.clamp(l.theta_min, l.theta_max));
        q
    }

    pub fn observe_pose(&self, chain: &DhChain) -> Vec<f64> {
        Self::pose(&self.observe_pose_deg, chain)
    }

    pub fn rest_pose(&self, chain: &DhChain) -> Vec<f64> {
        Self::pose(&self.rest_pose_deg, chain)
    }

    fn stuck_rule(&self) -> StuckRule {
        StuckRule {
            threshold: self.stuck_threshold,
            ticks: self.stuck_ticks,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub tick: u64,
    pub from: StateId,
    pub to: StateId,
    pub guard: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FsmError {
    #[error("invalid machine spec: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
    Validation(Vec<ValidationError>),
    #[error("command rejected: {reason}")]
    Rejected { reason: String },
    #[error("scenario did not settle within {ticks} ticks")]
    Timeout { ticks: u64, trace: Vec<TransitionRecord> },
    #[error("unknown variable {0:?}")]
    UnknownVariable(String),
    #[error("invalid value for {name}: {reason}")]
    InvalidValue { name: String, reason: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

/// Published every tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub tick: u64,
    pub time_ms: u64,
    pub state: StateId,
    /// Actual joint angles; the pose below is their forward kinematics.
    pub q: Vec<f64>,
    pub ee_position: [f64; 3],
    /// Unit quaternion `[w, x, y, z]`.
    pub ee_orientation: [f64; 4],
    pub globals: GlobalStore,
    pub holding: Option<String>,
    pub last_transition: Option<TransitionRecord>,
}

#[derive(Debug, Clone, PartialEq)]
enum Activity {
    Done,
    Drive(VecDeque<Vec<f64>>),
    Search { attempts: u32, arrived: bool },
    MoveTo { approach: bool },
    Press,
}

pub struct Machine {
    spec: ValidatedSpec,
    guards: GuardRegistry,
    config: MachineConfig,
    locator: Locator,
    world: World,
    store: GlobalStore,
    state: StateId,
    tick: u64,
    log: Vec<TransitionRecord>,
    activity: Activity,
    plan: VecDeque<Vec<f64>>,
    pending: Option<Command>,
}

impl fmt::Debug for Machine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Machine")
            .field("spec", &self.spec.name)
            .field("state", &self.state)
            .field("tick", &self.tick)
            .finish()
    }
}

impl Machine {
    pub fn new(
        spec: &MachineSpec,
        guards: GuardRegistry,
        config: MachineConfig,
        locator: Locator,
        world: World,
    ) -> Result<Self, FsmError> {
        let spec = validate(spec, &guards).map_err(FsmError::Validation)?;
        if !(config.max_joint_step > 0.0) || config.search_attempts == 0 {
            return Err(FsmError::Config(
                "max_joint_step and search_attempts must be positive".into(),
            ));
        }
        let state = spec.initial;
        Ok(Self {
            spec,
            guards,
            config,
            locator,
            world,
            store: GlobalStore::default(),
            state,
            tick: 0,
            log: Vec::new(),
            activity: Activity::Done,
            plan: VecDeque::new(),
            pending: None,
        })
    }

    /// Shipped spec and guards, five-joint desk arm at its rest pose, default camera
    /// and detector.
    pub fn desk(scene: Scene, config: MachineConfig) -> Result<Self, FsmError> {
        Self::desk_with(scene, config, Locator::default(), DhChain::table1())
    }

    pub fn desk_with(scene: Scene, config: MachineConfig, locator: Locator, chain: DhChain) -> Result<Self, FsmError> {
        let rest = config.rest_pose(&chain);
        let world = World::new(chain, scene, &rest)?;
        Self::new(&MachineSpec::desk(), GuardRegistry::standard(), config, locator, world)
    }

    pub fn state(&self) -> StateId {
        self.state
    }

    pub fn tick_count(&self) -> u64 {
        self.tick
    }

    pub fn log(&self) -> &[TransitionRecord] {
        &self.log
    }

    /// One JSON object per line.
    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn store(&self) -> &GlobalStore {
        &self.store
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn world_mut(&mut self) -> &mut World {
        &mut self.world
    }

    pub fn spec(&self) -> &ValidatedSpec {
        &self.spec
    }

    pub fn config(&self) -> &MachineConfig {
        &self.config
    }

    pub fn set_var(&mut self, name: &str, value: &serde_json::Value) -> Result<(), FsmError> {
        self.store.set_var(name, value)
    }

    pub fn snapshot(&self) -> WorldSnapshot {
        self.world
            .snapshot(self.config.stuck_rule(), self.config.touch_tolerance)
    }

    pub fn telemetry(&self) -> Telemetry {
        let q = self.world.q_actual();
        let pose = forward_kinematics(self.world.chain(), &q).expect("joint vector length is fixed");
        let p = pose.translation();
        let r = pose.quaternion();
        Telemetry {
            tick: self.tick,
            time_ms: self.tick * self.config.tick_ms,
            state: self.state,
            q,
            ee_position: [p.x, p.y, p.z],
            ee_orientation: [r.w, r.i, r.j, r.k],
            globals: self.store.clone(),
            holding: self.world.holding().map(|o| o.class_label.clone()),
            last_transition: self.log.last().cloned(),
        }
    }

    /// Emergency stop. The fault guard takes the machine to Fault on the
    /// next tick from any state.
    pub fn estop(&mut self) {
        self.fail("estop");
    }

    /// Enters UserInput with `cmd`. Rejected in Fault, Stuck and Collision.
    pub fn dispatch(&mut self, cmd: Command) -> Result<TransitionRecord, FsmError> {
        if self.state.is_special() {
            return Err(FsmError::Rejected {
                reason: self
                    .store
                    .fault_reason
                    .clone()
                    .unwrap_or_else(|| format!("machine is in {}", self.state)),
            });
        }
        if !self.spec.has_state(StateId::UserInput) {
            return Err(FsmError::Rejected {
                reason: "machine has no UserInput state".into(),
            });
        }
        self.tick += 1;
        self.pending = Some(cmd);
        Ok(self.transition(StateId::UserInput, "user_input"))
    }

    fn transition(&mut self, to: StateId, guard: &str) -> TransitionRecord {
        let rec = TransitionRecord {
            tick: self.tick,
            from: self.state,
            to,
            guard: guard.to_string(),
        };
        self.log.push(rec.clone());
        self.state = to;
        self.enter();
        rec
    }

    fn fail(&mut self, reason: impl Into<String>) {
        self.store.fault_reason = Some(reason.into());
        self.store.alert = true;
        self.activity = Activity::Done;
        self.plan.clear();
    }

    /// One logical tick.
    pub fn tick(&mut self) -> Option<TransitionRecord> {
        self.tick += 1;
        let done = self.step();
        self.world.advance(self.config.stuck_rule());
        let snap = self.snapshot();

        for i in 0..self.spec.arbitrary.len() {
            let t = self.spec.arbitrary[i].clone();
            match self.eval(&t.guard, done, &snap) {
                Ok(false) => continue,
                Ok(true) if t.to == self.state => return None,
                Ok(true) => return Some(self.transition(t.to, &t.guard)),
                Err(e) => return self.guard_failure(&t.guard, e),
            }
        }
        if !done {
            return None;
        }
        let candidates = self.spec.outgoing.get(&self.state).cloned().unwrap_or_default();
        for t in candidates {
            match self.eval(&t.guard, done, &snap) {
                Ok(false) => continue,
                Ok(true) => return Some(self.transition(t.to, &t.guard)),
                Err(e) => return self.guard_failure(&t.guard, e),
            }
        }
        None
    }

    fn eval(&self, guard: &str, done: bool, snap: &WorldSnapshot) -> Result<bool, String> {
        let f = self.guards.get(guard).ok_or_else(|| format!("guard {guard} missing"))?;
        f(&GuardContext {
            state: self.state,
            tick: self.tick,
            action_done: done,
            store: &self.store,
            world: snap,
        })
    }

    fn guard_failure(&mut self, guard: &str, err: String) -> Option<TransitionRecord> {
        self.fail(format!("guard {guard}: {err}"));
        if self.state == StateId::Fault || !self.spec.has_state(StateId::Fault) {
            return None;
        }
        Some(self.transition(StateId::Fault, &format!("error:{guard}")))
    }

    /// Dispatches `cmd` and ticks until the machine rests in Idle or Fault.
    pub fn run_scenario(&mut self, cmd: Command, max_ticks: u64) -> Result<Vec<TransitionRecord>, FsmError> {
        let start = self.log.len();
        self.dispatch(cmd)?;
        for _ in 0..max_ticks {
            self.tick();
            if matches!(self.state, StateId::Idle | StateId::Fault) {
                return Ok(self.log[start..].to_vec());
            }
        }
        Err(FsmError::Timeout {
            ticks: max_ticks,
            trace: self.log[start..].to_vec(),
        })
    }

    /// Entry part of the state's action; runs as the transition fires.
    fn enter(&mut self) {
        let action = self.spec.states[&self.state];
        self.activity = Activity::Done;
        self.plan.clear();
        match action {
            Action::Idle => {}
            Action::UserInput => {
                let cmd = self.pending.take();
                self.store.clear_task();
                self.store.target_name = cmd.as_ref().and_then(|c| c.target_class()).map(String::from);
                self.store.command = cmd;
            }
            Action::Search => {
                self.store.searches += 1;
                self.store.search_ok = false;
                self.plan.push_back(self.config.observe_pose(self.world.chain()));
                self.activity = Activity::Search {
                    attempts: 0,
                    arrived: false,
                };
            }
            Action::Move => self.enter_move(),
            Action::Press => self.enter_press(),
            Action::Grab => self.enter_grab(),
            Action::Place => {
                if self.world.release(self.config.touch_tolerance).is_none() {
                    self.fail("place-without-object");
                }
            }
            Action::Reset => {
                self.plan.push_back(self.config.rest_pose(self.world.chain()));
                self.activity = Activity::Drive(VecDeque::new());
            }
            Action::Fault => {
                self.store.alert = true;
                if self.store.fault_reason.is_none() {
                    self.store.fault_reason = Some("fault".into());
                }
            }
            Action::Stuck => self.fail("stuck"),
            Action::Collision => self.fail("collision"),
        }
    }

    fn solve(&self, target: Vector3<f64>, from: &[f64]) -> Result<Vec<f64>, KinematicsError> {
        let sol = inverse_kinematics(
            self.world.chain(),
            &Pose::from_position(target),
            from,
            &IkOptions::position_only(),
        )?;
        Ok(sol.q.into_inner())
    }

    fn enter_move(&mut self) {
        let Some(end) = self.store.end_position else {
            self.fail("move without end_position");
            return;
        };
        let approach = !self.store.approached;
        let lift = self.store.carry_height + if approach { self.config.approach_offset } else { 0.0 };
        match self.solve(end + Vector3::z() * lift, self.world.q_commanded()) {
            Ok(q) => {
                self.plan.push_back(q);
                self.activity = Activity::MoveTo { approach };
            }
            Err(e) => self.fail(format!("unreachable: {e}")),
        }
    }

    fn enter_press(&mut self) {
        let (Some(end), Some(Command::PressTarget { press_end, .. })) = (self.store.end_position, &self.store.command)
        else {
            self.fail("press without target");
            return;
        };
        let radial = Vector3::new(end.x, end.y, 0.0)
            .try_normalize(1e-9)
            .unwrap_or_else(Vector3::x);
        let sign = match press_end {
            PressEnd::Far => 1.0,
            PressEnd::Near => -1.0,
        };
        let p = end + radial * (sign * self.config.press_offset);
        let waypoints = [
            p,
            p - Vector3::z() * self.config.press_depth,
            p + Vector3::z() * self.config.approach_offset,
        ];
        let mut from = self.world.q_commanded().to_vec();
        for w in waypoints {
            match self.solve(w, &from) {
                Ok(q) => {
                    from = q.clone();
                    self.plan.push_back(q);
                }
                Err(e) => {
                    self.fail(format!("unreachable: {e}"));
                    return;
                }
            }
        }
        self.activity = Activity::Press;
    }

    fn enter_grab(&mut self) {
        let (Some(target), Some(Command::FetchToTarget { destination_class, .. })) =
            (self.store.target_name.clone(), self.store.command.clone())
        else {
            self.fail("grab without fetch command");
            return;
        };
        if !self.world.grasp(&target, self.config.touch_tolerance) {
            self.fail("grasp-failed");
            return;
        }
        self.store.carry_height = self.world.ee_position().z - self.world.probe_point().z;
        self.store.target_name = Some(destination_class);
        self.store.end_position = None;
        self.store.search_ok = false;
        self.store.approached = false;
        self.store.contact_attempts = 0;
    }

    /// Runs the current action for one tick; true once it has completed.
    fn step(&mut self) -> bool {
        let max_step = self.config.max_joint_step;
        if let Some(goal) = self.plan.front().cloned() {
            if self.world.drive(&goal, max_step) {
                self.plan.pop_front();
            }
            if !self.plan.is_empty() {
                return false;
            }
            // Arrival consumes this tick.
            return self.arrived();
        }
        match self.activity {
            Activity::Search { arrived: true, .. } => self.search_attempt(),
            _ => true,
        }
    }

    fn arrived(&mut self) -> bool {
        match self.activity.clone() {
            Activity::Search { attempts, .. } => {
                self.activity = Activity::Search {
                    attempts,
                    arrived: true,
                };
                false
            }
            Activity::MoveTo { approach } => {
                self.activity = Activity::Done;
                if approach {
                    self.store.approached = true;
                } else {
                    self.store.contact_attempts += 1;
                    let snap = self.snapshot();
                    let touching = snap.contact.is_some() && snap.contact == self.store.target_name;
                    if !touching && self.store.contact_attempts >= self.config.contact_attempts {
                        self.fail("no-contact");
                    }
                }
                true
            }
            _ => {
                self.activity = Activity::Done;
                if self.state == StateId::Reset {
                    self.store.clear_task();
                }
                true
            }
        }
    }

    fn search_attempt(&mut self) -> bool {
        let Activity::Search { attempts, .. } = self.activity else {
            return true;
        };
        let Some(target) = self.store.target_name.clone() else {
            self.fail("search without target");
            return true;
        };
        let vague = matches!(self.store.command, Some(Command::FetchToTarget { ambiguous: true, ref target_class, .. }) if *target_class == target);
        let query = Query {
            class_label: &target,
            grounding: if vague { self.config.ambiguity_grounding } else { 1.0 },
        };
        let s = seed::derive(self.config.seed, &[self.store.searches as u64, attempts as u64]);
        let q = self.world.q_actual();
        let scene = self.world.visible_scene();
        match self.locator.locate(&scene, self.world.chain(), &q, &query, s) {
            Ok(found) => {
                self.store.end_position = Some(found.position_world);
                if self.world.holding().is_some() {
                    self.store.destination_position = Some(found.position_world);
                }
                self.store.search_ok = true;
                self.activity = Activity::Done;
                true
            }
            Err(_) if attempts + 1 >= self.config.search_attempts => {
                self.fail("no-target");
                true
            }
            Err(_) => {
                self.activity = Activity::Search {
                    attempts: attempts + 1,
                    arrived: true,
                };
                false
            }
        }
    }
}
