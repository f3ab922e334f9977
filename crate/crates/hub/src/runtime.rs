//! The authoritative machine owner. Client requests arrive on a queue and
//! are applied between ticks; telemetry and alerts fan out on a broadcast
//! channel that drops the oldest frames for slow readers.

use std::time::Duration;

use deskbot_core::fsm::{FsmError, Machine};
use deskbot_core::nlu::Command;
use serde_json::{json, Map, Value};
use tokio::sync::{broadcast, mpsc, oneshot};
use tokio::task::JoinHandle;
use tokio::time::{interval, interval_at, Instant, MissedTickBehavior};

use crate::protocol::{code, Message, MessageType};

/// Per-subscriber telemetry backlog before frames are dropped.
pub const EVENT_QUEUE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuntimeConfig {
    pub tick_ms: u64,
    pub telemetry_hz: f64,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            tick_ms: 20,
            telemetry_hz: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Control {
    Dispatch(Command),
    /// Variables to write at the next tick boundary, all or none.
    SetVars(Map<String, Value>),
    GetState,
    Estop,
}

/// A refused request: error code and message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Refusal {
    pub code: &'static str,
    pub message: String,
}

type Reply = Result<Value, Refusal>;

struct Request {
    control: Control,
    reply: oneshot::Sender<Reply>,
}

/// Cloneable access to the runtime task.
#[derive(Debug, Clone)]
pub struct RuntimeHandle {
    tx: mpsc::UnboundedSender<Request>,
    events: broadcast::Sender<Message>,
}

impl RuntimeHandle {
    pub async fn call(&self, control: Control) -> Reply {
        let (reply, rx) = oneshot::channel();
        let unavailable = || Refusal {
            code: code::UNAVAILABLE,
            message: "runtime stopped".into(),
        };
        self.tx.send(Request { control, reply }).map_err(|_| unavailable())?;
        rx.await.map_err(|_| unavailable())?
    }

    /// TELEMETRY and ALERT messages from now on.
    pub fn subscribe(&self) -> broadcast::Receiver<Message> {
        self.events.subscribe()
    }
}

struct Runtime {
    machine: Machine,
    pending_vars: Vec<Map<String, Value>>,
    events: broadcast::Sender<Message>,
    alert: bool,
}

impl Runtime {
    fn handle(&mut self, control: Control) -> Reply {
        let tick = self.machine.tick_count();
        match control {
            Control::Dispatch(cmd) => match self.machine.dispatch(cmd) {
                Ok(rec) => Ok(json!({
                    "tick": rec.tick,
                    "state": rec.to,
                    "target_name": self.machine.store().target_name,
                })),
                Err(FsmError::Rejected { reason }) => Err(Refusal {
                    code: code::REJECTED,
                    message: reason,
                }),
                Err(e) => Err(Refusal {
                    code: code::INVALID,
                    message: e.to_string(),
                }),
            },
            Control::SetVars(vars) => {
                // Validate against a scratch copy so a bad batch changes nothing.
                let mut scratch = self.machine.store().clone();
                for (name, value) in &vars {
                    scratch.set_var(name, value).map_err(|e| Refusal {
                        code: code::INVALID,
                        message: e.to_string(),
                    })?;
                }
                self.pending_vars.push(vars);
                Ok(json!({ "applies_at_tick": tick + 1 }))
            }
            Control::GetState => Ok(self.telemetry_body()),
            Control::Estop => {
                self.machine.estop();
                Ok(json!({ "tick": tick }))
            }
        }
    }

    fn telemetry_body(&self) -> Value {
        serde_json::to_value(self.machine.telemetry()).expect("telemetry serializes")
    }

    fn tick(&mut self) {
        for vars in std::mem::take(&mut self.pending_vars) {
            for (name, value) in &vars {
                // Checked on receipt; the store only changes on this task.
                if let Err(e) = self.machine.set_var(name, value) {
                    tracing::warn!(%name, error = %e, "queued variable rejected");
                }
            }
        }
        if let Some(rec) = self.machine.tick() {
            tracing::debug!(tick = rec.tick, from = %rec.from, to = %rec.to, guard = %rec.guard, "transition");
        }
        let alert = self.machine.store().alert;
        if alert && !self.alert {
            let store = self.machine.store();
            tracing::warn!(reason = ?store.fault_reason, "alert raised");
            let body = json!({
                "tick": self.machine.tick_count(),
                "state": self.machine.state(),
                "fault_reason": store.fault_reason,
            });
            let _ = self.events.send(Message::new(MessageType::Alert, None, body));
        }
        self.alert = alert;
    }

    fn publish(&self) {
        let _ = self
            .events
            .send(Message::new(MessageType::Telemetry, None, self.telemetry_body()));
    }
}

/// Starts the tick loop. Requests are served before the next tick whenever
/// both are ready, so a request never waits more than one tick.
pub fn spawn_runtime(machine: Machine, config: RuntimeConfig) -> (RuntimeHandle, JoinHandle<()>) {
    let (tx, mut rx) = mpsc::unbounded_channel::<Request>();
    let (events, _) = broadcast::channel(EVENT_QUEUE);
    let handle = RuntimeHandle {
        tx,
        events: events.clone(),
    };
    let mut rt = Runtime {
        machine,
        pending_vars: Vec::new(),
        events,
        alert: false,
    };
    let tick_period = Duration::from_millis(config.tick_ms.max(1));
    let telemetry_period = Duration::from_secs_f64(1.0 / config.telemetry_hz.max(0.1));
    let task = tokio::spawn(async move {
        // The first tick is one period out, not immediate.
        let mut ticks = interval_at(Instant::now() + tick_period, tick_period);
        ticks.set_missed_tick_behavior(MissedTickBehavior::Delay);
        let mut telemetry = interval(telemetry_period);
        telemetry.set_missed_tick_behavior(MissedTickBehavior::Delay);
        loop {
            tokio::select! {
                biased;
                req = rx.recv() => match req {
                    Some(Request { control, reply }) => {
                        let _ = reply.send(rt.handle(control));
                    }
                    None => break,
                },
                _ = ticks.tick() => rt.tick(),
                _ = telemetry.tick() => rt.publish(),
            }
        }
    });
    (handle, task)
}
