use std::collections::BTreeMap;

use super::text::{tokenize, Utterance};
use super::Intent;

pub type Slots = BTreeMap<String, String>;

pub const TARGET: &str = "target";
pub const DESTINATION: &str = "destination";
pub const AMBIGUOUS: &str = "ambiguous";

/// Value bound to a phrase; `ForIntent` resolves to the intent's own
/// actuator ("switch" is the door switch when opening the door).
#[derive(Debug, Clone, Copy)]
enum Value {
    Fixed(&'static str),
    ForIntent,
}

struct Entry {
    phrase: &'static [&'static str],
    slot: &'static str,
    value: Value,
    /// Only fetch_object may bind it; a weak hit loses to any strong hit.
    object: bool,
    weak: bool,
}

const fn e(phrase: &'static [&'static str], slot: &'static str, value: Value) -> Entry {
    Entry {
        phrase,
        slot,
        value,
        object: false,
        weak: false,
    }
}

const fn obj(phrase: &'static [&'static str], weak: bool) -> Entry {
    Entry {
        phrase,
        slot: TARGET,
        value: Value::Fixed("paper_cup"),
        object: true,
        weak,
    }
}

const GAZETTEER: &[Entry] = &[
    obj(&["water", "cup"], false),
    obj(&["paper", "cup"], false),
    obj(&["cup", "of", "water"], false),
    obj(&["cup"], false),
    obj(&["water"], true),
    obj(&["drink"], true),
    e(&["door", "switch"], TARGET, Value::Fixed("door_switch")),
    e(&["light", "switch"], TARGET, Value::Fixed("light_switch")),
    e(&["door"], TARGET, Value::Fixed("door_switch")),
    e(&["light"], TARGET, Value::Fixed("light_switch")),
    e(&["lights"], TARGET, Value::Fixed("light_switch")),
    e(&["lamp"], TARGET, Value::Fixed("light_switch")),
    e(&["switch"], TARGET, Value::ForIntent),
    e(&["my", "hand"], DESTINATION, Value::Fixed("hand")),
    e(&["hand"], DESTINATION, Value::Fixed("hand")),
    e(&["me"], DESTINATION, Value::Fixed("hand")),
];

struct Hit {
    start: usize,
    len: usize,
    value: &'static str,
    weak: bool,
}

/// Longest-match gazetteer scan. Per slot, a strong hit beats a weak one,
/// then the earliest wins. A weak object hit sets `ambiguous = "true"`.
pub fn fill_slots(u: &Utterance, intent: Intent) -> Slots {
    let tokens = tokenize(u.text());
    let mut best: BTreeMap<&'static str, Hit> = BTreeMap::new();
    let mut i = 0;
    while i < tokens.len() {
        let matched = GAZETTEER
            .iter()
            .filter(|en| !en.object || intent == Intent::FetchObject)
            .filter(|en| {
                tokens.len() - i >= en.phrase.len() && en.phrase.iter().zip(&tokens[i..]).all(|(p, t)| *p == t.as_str())
            })
            .max_by_key(|en| en.phrase.len());
        let Some(en) = matched else {
            i += 1;
            continue;
        };
        let value = match en.value {
            Value::Fixed(v) => v,
            Value::ForIntent => intent.actuator().unwrap_or("light_switch"),
        };
        let hit = Hit {
            start: i,
            len: en.phrase.len(),
            value,
            weak: en.weak,
        };
        let replace = match best.get(en.slot) {
            None => true,
            Some(old) => old.weak && !hit.weak,
        };
        if replace {
            best.insert(en.slot, hit);
        }
        i += en.phrase.len();
    }

    let mut slots = Slots::new();
    for (slot, hit) in best {
        debug_assert!(hit.len > 0 && hit.start < tokens.len());
        slots.insert(slot.to_string(), hit.value.to_string());
        if slot == TARGET && hit.weak {
            slots.insert(AMBIGUOUS.into(), "true".into());
        }
    }
    slots
}
