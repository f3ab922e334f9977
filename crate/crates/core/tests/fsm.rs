use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::{Arc, Mutex};

use deskbot_core::fsm::{GuardRegistry, Machine, MachineConfig, MachineSpec, StateId, TransitionRecord, World};
use deskbot_core::kinematics::DhChain;
use deskbot_core::nlu::{Command, PressEnd};
use deskbot_core::perception::{Locator, Scene};
use deskbot_core::seed;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use StateId::*;

/// Wildcard guards in priority order, with their targets.
const SAFETY: [(&str, StateId); 3] = [("fault", Fault), ("collision", Collision), ("stuck", Stuck)];

fn light_on() -> Command {
    Command::PressTarget {
        target_class: "light_switch".into(),
        press_end: PressEnd::Near,
    }
}

fn fetch_cup() -> Command {
    Command::FetchToTarget {
        target_class: "paper_cup".into(),
        destination_class: "hand".into(),
        ambiguous: false,
    }
}

fn states(trace: &[TransitionRecord]) -> Vec<StateId> {
    let mut out = vec![trace[0].from];
    out.extend(trace.iter().map(|r| r.to));
    out
}

#[test]
fn light_on_trace_loops_until_touching_then_presses() {
    let mut m = Machine::desk(Scene::office(), MachineConfig::default()).unwrap();
    let trace = m.run_scenario(light_on(), 5_000).unwrap();
    assert_eq!(
        states(&trace),
        vec![Idle, UserInput, Search, Move, Search, Move, Press, Reset, Idle]
    );
    let guards: Vec<&str> = trace.iter().map(|r| r.guard.as_str()).collect();
    assert_eq!(
        guards,
        vec![
            "user_input",
            "has_target",
            "located",
            "not_touching",
            "located",
            "touching_press",
            "always",
            "always"
        ]
    );
    assert_eq!(m.world().presses().len(), 1);
    assert!(m.store().fault_reason.is_none());
}

#[test]
fn fetch_trace_grabs_then_places() {
    let mut m = Machine::desk(Scene::office(), MachineConfig::default()).unwrap();
    let trace = m.run_scenario(fetch_cup(), 10_000).unwrap();
    let s = states(&trace);
    assert_eq!(s.last(), Some(&Idle));
    let grab = s.iter().position(|x| *x == Grab).expect("grabbed");
    let place = s.iter().position(|x| *x == Place).expect("placed");
    assert!(grab < place);
    assert_eq!(&s[place..], &[Place, Reset, Idle]);
    assert!(m.world().holding().is_none());
}

#[test]
fn estop_wins_on_the_next_tick_from_any_point_of_a_task() {
    for stop_after in [0u64, 1, 5, 20, 60, 120] {
        let mut m = Machine::desk(Scene::office(), MachineConfig::default()).unwrap();
        m.dispatch(light_on()).unwrap();
        for _ in 0..stop_after {
            m.tick();
        }
        let before = m.state();
        m.estop();
        let rec = m.tick().expect("fault fires");
        assert_eq!((rec.from, rec.to, rec.guard.as_str()), (before, Fault, "fault"));
        assert!(m.dispatch(light_on()).is_err());
        m.set_var("fault_reason", &json!(null)).unwrap();
        let rec = m.tick().unwrap();
        assert_eq!((rec.to, rec.guard.as_str()), (Reset, "fault_cleared"));
    }
}

#[test]
fn every_state_can_reach_reset() {
    let spec = MachineSpec::desk();
    let mut edges: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let names: Vec<String> = spec.states.iter().map(|s| s.name.clone()).collect();
    for t in &spec.transitions {
        let sources = if t.from == "*" {
            names.clone()
        } else {
            vec![t.from.clone()]
        };
        for s in sources {
            edges.entry(s).or_default().insert(t.to.clone());
        }
    }
    for start in &names {
        let mut seen = BTreeSet::from([start.clone()]);
        let mut queue = VecDeque::from([start.clone()]);
        while let Some(s) = queue.pop_front() {
            for n in edges.get(&s).into_iter().flatten() {
                if seen.insert(n.clone()) {
                    queue.push_back(n.clone());
                }
            }
        }
        assert!(seen.contains("Reset"), "{start} cannot reach Reset");
        assert!(seen.contains("Idle"), "{start} cannot reach Idle");
    }
}

type EvalLog = Arc<Mutex<Vec<(String, Result<bool, String>)>>>;

/// Standard guards, but each non-safety guard is occasionally forced true,
/// forced false or made to fail, and safety guards are occasionally forced
/// true. Every evaluation is logged with the value the machine saw.
fn fuzzed_guards(fuzz_seed: u64, log: EvalLog) -> GuardRegistry {
    let standard = GuardRegistry::standard();
    let mut out = GuardRegistry::empty();
    for name in standard.names() {
        let real = standard.get(name).unwrap().clone();
        let safety = SAFETY.iter().any(|(g, _)| *g == name);
        let key = seed::label(name);
        let log = log.clone();
        let name_owned = name.to_string();
        out.register(name, move |c| {
            let roll = seed::rng(seed::derive(fuzz_seed, &[key, c.tick])).random_range(0..100);
            let v = match (safety, roll) {
                (true, 0..2) => Ok(true),
                (true, _) => real(c),
                (false, 0..10) => Ok(true),
                (false, 10..20) => Ok(false),
                (false, 20..24) => Err("injected".to_string()),
                (false, _) => real(c),
            };
            log.lock().unwrap().push((name_owned.clone(), v.clone()));
            v
        });
    }
    out
}

fn fuzzed_machine(fuzz_seed: u64) -> (Machine, EvalLog) {
    let log: EvalLog = Arc::default();
    let chain = DhChain::table1();
    let config = MachineConfig::default();
    let world = World::new(chain.clone(), Scene::office(), &config.rest_pose(&chain)).unwrap();
    let m = Machine::new(
        &MachineSpec::desk(),
        fuzzed_guards(fuzz_seed, log.clone()),
        config,
        Locator::default(),
        world,
    )
    .unwrap();
    (m, log)
}

/// Per-state outgoing guards and targets, highest priority first, read
/// straight from the machine description.
fn outgoing() -> BTreeMap<StateId, Vec<(String, StateId)>> {
    let spec = MachineSpec::desk();
    let mut ts: Vec<_> = spec.transitions.iter().filter(|t| t.from != "*").collect();
    ts.sort_by_key(|t| std::cmp::Reverse(t.priority));
    let mut out: BTreeMap<StateId, Vec<(String, StateId)>> = BTreeMap::new();
    for t in ts {
        out.entry(t.from.parse().unwrap())
            .or_default()
            .push((t.guard.clone(), t.to.parse().unwrap()));
    }
    out
}

/// What one tick must do given the guard values it observed.
fn expected(
    prev: StateId,
    evals: &[(String, Result<bool, String>)],
    table: &BTreeMap<StateId, Vec<(String, StateId)>>,
) -> Result<Option<(StateId, String)>, String> {
    let mut rest = evals;
    for (g, to) in SAFETY {
        let Some(((name, v), tail)) = rest.split_first() else {
            return Err(format!("safety guard {g} not evaluated"));
        };
        if name != g {
            return Err(format!("expected {g}, evaluated {name}"));
        }
        rest = tail;
        match v {
            Ok(false) => continue,
            _ if !rest.is_empty() => return Err(format!("{name} decided but {rest:?} still evaluated")),
            Ok(true) if to == prev => return Ok(None),
            Ok(true) => return Ok(Some((to, g.to_string()))),
            Err(_) if prev == Fault => return Ok(None),
            Err(_) => return Ok(Some((Fault, format!("error:{g}")))),
        }
    }
    let candidates = table.get(&prev).map(Vec::as_slice).unwrap_or(&[]);
    for (i, (name, v)) in rest.iter().enumerate() {
        let (g, to) = candidates.get(i).ok_or("more evaluations than transitions")?;
        if name != g {
            return Err(format!("expected {g}, evaluated {name}"));
        }
        let last = i + 1 == rest.len();
        match v {
            Ok(false) => continue,
            _ if !last => return Err(format!("{name} decided but evaluation went on")),
            Ok(true) => return Ok(Some((*to, g.clone()))),
            Err(_) if prev == Fault => return Ok(None),
            Err(_) => return Ok(Some((Fault, format!("error:{g}")))),
        }
    }
    // Nothing true: either every candidate was false, or the action is still
    // running and none was consulted.
    if !rest.is_empty() && rest.len() != candidates.len() {
        return Err("evaluation stopped early without a decision".into());
    }
    Ok(None)
}

/// Drives a fuzzed machine for `ticks` ticks with random dispatches and
/// fault clears, checking every tick against [`expected`]. Returns the log.
fn fuzz_run(fuzz_seed: u64, ticks: u64) -> Vec<TransitionRecord> {
    let (mut m, evals) = fuzzed_machine(fuzz_seed);
    let table = outgoing();
    let mut rng = ChaCha8Rng::seed_from_u64(fuzz_seed ^ 0xD15C);
    for _ in 0..ticks {
        let special = matches!(m.state(), Fault | Stuck | Collision);
        if rng.random_bool(0.05) {
            let cmd = match rng.random_range(0..3) {
                0 => light_on(),
                1 => fetch_cup(),
                _ => Command::Noop,
            };
            let before = m.state();
            match m.dispatch(cmd) {
                Ok(rec) => {
                    assert!(!special, "dispatch accepted in {before}");
                    assert_eq!(
                        (rec.from, rec.to, rec.guard.as_str()),
                        (before, UserInput, "user_input")
                    );
                }
                Err(_) => assert!(special, "dispatch refused in {before}"),
            }
        }
        if m.state() == Fault && rng.random_bool(0.1) {
            m.set_var("fault_reason", &json!(null)).unwrap();
        }
        let prev = m.state();
        let fault_set = m.store().fault_reason.is_some();
        evals.lock().unwrap().clear();
        let rec = m.tick();
        let seen = std::mem::take(&mut *evals.lock().unwrap());
        let want =
            expected(prev, &seen, &table).unwrap_or_else(|e| panic!("seed {fuzz_seed} tick {}: {e}", m.tick_count()));
        let got = rec.as_ref().map(|r| (r.to, r.guard.clone()));
        assert_eq!(
            got,
            want,
            "seed {fuzz_seed} tick {} from {prev}: {seen:?}",
            m.tick_count()
        );
        if let Some(r) = &rec {
            assert_eq!(r.from, prev);
        }
        // A raised fault flag always wins, whatever the other guards say.
        if fault_set && prev != Fault {
            assert_eq!(m.state(), Fault, "seed {fuzz_seed}: fault bypassed from {prev}");
        }
        // Fault is left for Reset once cleared, or for another safety state.
        if prev == Fault && m.state() != Fault {
            let r = rec.unwrap();
            let ok = (r.to, r.guard.as_str()) == (Reset, "fault_cleared") || matches!(r.to, Stuck | Collision);
            assert!(ok, "seed {fuzz_seed}: left Fault via {r:?}");
        }
    }
    m.log().to_vec()
}

#[test]
fn injected_guards_never_bypass_safety() {
    let mut visited = BTreeSet::new();
    let mut safety_hits = 0;
    for s in 0..48 {
        let log = fuzz_run(s, 400);
        visited.extend(log.iter().map(|r| r.to));
        safety_hits += log.iter().filter(|r| matches!(r.to, Fault | Stuck | Collision)).count();
    }
    assert!(safety_hits > 100, "only {safety_hits} safety transitions exercised");
    for s in [
        Idle, UserInput, Search, Move, Press, Grab, Place, Reset, Fault, Stuck, Collision,
    ] {
        assert!(visited.contains(&s), "fuzz never entered {s}");
    }
}

#[test]
fn fuzzed_runs_replay_identically() {
    for s in [3, 17, 40] {
        assert_eq!(fuzz_run(s, 300), fuzz_run(s, 300));
    }
}

#[test]
fn log_replay_reproduces_the_state_sequence() {
    let mut m = Machine::desk(Scene::office(), MachineConfig::default()).unwrap();
    m.run_scenario(light_on(), 5_000).unwrap();
    m.run_scenario(fetch_cup(), 10_000).unwrap();
    let parsed: Vec<TransitionRecord> = m
        .log_jsonl()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(parsed, m.log());
    let mut state = Idle;
    let mut last_tick = 0;
    for r in &parsed {
        assert_eq!(r.from, state);
        assert!(r.tick > last_tick);
        state = r.to;
        last_tick = r.tick;
    }
    assert_eq!(state, m.state());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn scenarios_are_deterministic(task in 0..2u8, clutter in 0.0..0.5f64) {
        let run = || {
            let mut scene = Scene::office();
            scene.clutter_fraction = clutter;
            let mut m = Machine::desk(scene, MachineConfig::default()).unwrap();
            let cmd = if task == 0 { light_on() } else { fetch_cup() };
            let r = m.run_scenario(cmd, 10_000);
            (r, m.log_jsonl(), m.telemetry())
        };
        prop_assert_eq!(run(), run());
    }
}
