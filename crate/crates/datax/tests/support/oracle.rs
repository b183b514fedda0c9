//! Reference models written independently of the code under test. Each is
//! deliberately naive: full scans, explicit simulation, no shared helpers.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use datax::manifest::{Manifest, Spec};
use datax_core::registry::{EntityKind, ProducerKind, RegistryState};
use datax_core::schema::{ConfigSchema, FieldType};
use datax_core::value::{Document, Value};

// ---------------------------------------------------------------------------
// Configuration validation

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    /// (field, "missing_required" | "type_mismatch" | "unknown_field")
    pub issues: BTreeSet<(String, &'static str)>,
    pub normalized: Document,
}

impl Verdict {
    pub fn valid(&self) -> bool {
        self.issues.is_empty()
    }
}

fn inhabits(ty: FieldType, v: &Value) -> bool {
    match (ty, v) {
        (FieldType::String, Value::String(_)) => true,
        (FieldType::Int, Value::Number(n)) => !n.is_f64(),
        (FieldType::Float, Value::Number(_)) => true,
        (FieldType::Bool, Value::Bool(_)) => true,
        (FieldType::List, Value::Array(_)) => true,
        (FieldType::Map, Value::Object(_)) => true,
        _ => false,
    }
}

/// Closed-world validation; an absent schema admits every map.
pub fn validate(schema: Option<&ConfigSchema>, config: &Document) -> Verdict {
    let mut issues = BTreeSet::new();
    let mut normalized = config.clone();
    if let Some(schema) = schema {
        for (key, value) in config {
            match schema.fields.get(key) {
                None => {
                    issues.insert((key.clone(), "unknown_field"));
                }
                Some(field) if !inhabits(field.ty, value) => {
                    issues.insert((key.clone(), "type_mismatch"));
                }
                Some(_) => {}
            }
        }
        for (key, field) in &schema.fields {
            if config.contains_key(key) {
                continue;
            }
            match &field.default {
                Some(d) => {
                    normalized.insert(key.clone(), d.clone());
                }
                None if field.required => {
                    issues.insert((key.clone(), "missing_required"));
                }
                None => {}
            }
        }
    }
    Verdict { issues, normalized }
}

// ---------------------------------------------------------------------------
// Registry scans

/// Every stream and gadget listing `name` among its inputs, sorted.
pub fn consumers(state: &RegistryState, name: &str) -> Vec<String> {
    let mut out = Vec::new();
    for (n, s) in state.streams() {
        if s.inputs.iter().any(|i| i == name) {
            out.push(n.clone());
        }
    }
    for (n, g) in state.gadgets() {
        if g.inputs.iter().any(|i| i == name) {
            out.push(n.clone());
        }
    }
    out.sort();
    out.dedup();
    out
}

/// Names of sensors, streams or gadgets that use the entity.
pub fn entity_users(state: &RegistryState, kind: EntityKind, name: &str) -> Vec<String> {
    let mut out = Vec::new();
    match kind {
        EntityKind::Driver => {
            for s in state.sensors().values() {
                if s.driver == name {
                    out.push(s.name.clone());
                }
            }
        }
        EntityKind::AnalyticsUnit => {
            for s in state.streams().values() {
                if s.producer_kind == ProducerKind::AnalyticsUnit && s.producer == name {
                    out.push(s.name.clone());
                }
            }
        }
        EntityKind::Actuator => {
            for g in state.gadgets().values() {
                if g.actuator == name {
                    out.push(g.name.clone());
                }
            }
        }
    }
    out.sort();
    out
}

/// Transitive closure by repeated relaxation; acyclic iff no stream reaches
/// itself.
pub fn acyclic(state: &RegistryState) -> bool {
    let names: Vec<&String> = state.streams().keys().collect();
    let mut reach: BTreeSet<(String, String)> = BTreeSet::new();
    for (n, s) in state.streams() {
        for i in &s.inputs {
            reach.insert((i.clone(), n.clone()));
        }
    }
    loop {
        let mut added = false;
        for a in &names {
            for b in &names {
                for c in &names {
                    if reach.contains(&((*a).clone(), (*b).clone()))
                        && reach.contains(&((*b).clone(), (*c).clone()))
                        && reach.insert(((*a).clone(), (*c).clone()))
                    {
                        added = true;
                    }
                }
            }
        }
        if !added {
            break;
        }
    }
    names.iter().all(|n| !reach.contains(&((*n).clone(), (*n).clone())))
}

/// Every reference resolves and sensors pair with their streams.
pub fn integrity(state: &RegistryState) -> Result<(), String> {
    for s in state.sensors().values() {
        if state.entity(EntityKind::Driver, &s.driver).is_none() {
            return Err(format!("sensor {} lost driver {}", s.name, s.driver));
        }
        match state.stream(&s.name) {
            Some(st) if st.producer_kind == ProducerKind::Sensor && st.inputs.is_empty() => {}
            _ => return Err(format!("sensor {} has no matching stream", s.name)),
        }
    }
    for st in state.streams().values() {
        match st.producer_kind {
            ProducerKind::Sensor if state.sensor(&st.name).is_none() => {
                return Err(format!("sensor stream {} without sensor", st.name))
            }
            ProducerKind::AnalyticsUnit if state.entity(EntityKind::AnalyticsUnit, &st.producer).is_none() => {
                return Err(format!("stream {} lost AU {}", st.name, st.producer))
            }
            _ => {}
        }
        for i in &st.inputs {
            if state.stream(i).is_none() {
                return Err(format!("stream {} reads missing {i}", st.name));
            }
        }
    }
    for g in state.gadgets().values() {
        if state.entity(EntityKind::Actuator, &g.actuator).is_none() {
            return Err(format!("gadget {} lost actuator {}", g.name, g.actuator));
        }
        for i in &g.inputs {
            if state.stream(i).is_none() {
                return Err(format!("gadget {} reads missing {i}", g.name));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Broker queue model

/// One queue-group member: a bounded FIFO that evicts its oldest entry.
#[derive(Debug, Clone, Default)]
pub struct MemberModel {
    pub queue: VecDeque<u64>,
    pub received: u64,
    pub delivered: u64,
    pub dropped: u64,
}

#[derive(Debug, Clone, Default)]
pub struct GroupModel {
    pub members: Vec<MemberModel>,
    pub cursor: usize,
}

impl GroupModel {
    /// Delivers `seq` to the next member in rotation.
    pub fn offer(&mut self, seq: u64, capacity: usize) {
        if self.members.is_empty() {
            return;
        }
        let n = self.members.len();
        let pick = self.cursor % n;
        self.cursor = pick + 1;
        let m = &mut self.members[pick];
        m.received += 1;
        if m.queue.len() == capacity {
            m.queue.pop_front();
            m.dropped += 1;
        }
        m.queue.push_back(seq);
    }

    pub fn take(&mut self, member: usize) -> Option<u64> {
        let m = &mut self.members[member];
        let seq = m.queue.pop_front()?;
        m.delivered += 1;
        Some(seq)
    }
}

// ---------------------------------------------------------------------------
// Autoscaling policy

#[derive(Debug, Clone, Copy)]
pub struct PolicyConstants {
    pub up_per_s: f64,
    pub down_occupancy: f64,
    pub window_ms: u64,
    pub cooldown_ms: u64,
    pub max: u32,
}

/// The scaling rule restated over the full sample history.
#[derive(Debug, Clone)]
pub struct PolicyOracle {
    pub k: PolicyConstants,
    history: Vec<(u64, u64, f64)>,
    first: Option<u64>,
    last_change: Option<u64>,
}

impl PolicyOracle {
    pub fn new(k: PolicyConstants) -> Self {
        PolicyOracle {
            k,
            history: Vec::new(),
            first: None,
            last_change: None,
        }
    }

    pub fn step(&mut self, current: u32, t: u64, dropped: u64, buffered: u64, capacity: u64) -> u32 {
        let occ = if capacity == 0 { 0.0 } else { buffered as f64 / capacity as f64 };
        self.history.push((t, dropped, occ));
        let first = *self.first.get_or_insert(t);
        let anchor = self.last_change.unwrap_or(first);
        let cooled = match self.last_change {
            None => true,
            Some(l) => t - l >= self.k.cooldown_ms,
        };
        if !cooled || t - anchor < self.k.window_ms {
            return current;
        }
        let in_window: Vec<&(u64, u64, f64)> = self
            .history
            .iter()
            .filter(|(ts, _, _)| ts + self.k.window_ms > t)
            .filter(|(ts, _, _)| self.last_change.is_none_or(|l| *ts > l))
            .collect();
        let drops: u64 = in_window.iter().map(|s| s.1).sum();
        let mean_occ: f64 = in_window.iter().map(|s| s.2).sum::<f64>() / in_window.len() as f64;
        let per_s = drops as f64 * 1000.0 / self.k.window_ms as f64;
        let target = if per_s > self.k.up_per_s && current < self.k.max {
            current + 1
        } else if drops == 0 && mean_occ < self.k.down_occupancy && current > 1 {
            current - 1
        } else {
            current
        };
        if target != current {
            self.last_change = Some(t);
        }
        target
    }
}

// ---------------------------------------------------------------------------
// Pipeline message counts

/// Messages reaching each gadget when every sensor emits `pulses[sensor]`:
/// a stream forwards `fanout` (default 1) copies of each input message, and
/// each consumer sees every message of its inputs exactly once.
pub fn gadget_counts(docs: &[Manifest], pulses: &BTreeMap<String, u64>) -> BTreeMap<String, u64> {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for d in docs {
        if let Spec::Sensor(_) = d.spec {
            counts.insert(d.name.clone(), pulses.get(&d.name).copied().unwrap_or(0));
        }
    }
    let streams: Vec<(&String, &datax::manifest::StreamSpec)> = docs
        .iter()
        .filter_map(|d| match &d.spec {
            Spec::Stream(s) => Some((&d.name, s)),
            _ => None,
        })
        .collect();
    // Resolve in as many passes as there are streams.
    for _ in 0..=streams.len() {
        for (name, s) in &streams {
            if counts.contains_key(*name) {
                continue;
            }
            if s.inputs.iter().all(|i| counts.contains_key(i)) {
                let fanout = s.config.get("fanout").and_then(Value::as_u64).unwrap_or(1);
                let sum: u64 = s.inputs.iter().map(|i| counts[i]).sum();
                counts.insert((*name).clone(), sum * fanout);
            }
        }
    }
    docs.iter()
        .filter_map(|d| match &d.spec {
            Spec::Gadget(g) => Some((d.name.clone(), g.inputs.iter().map(|i| counts[i]).sum())),
            _ => None,
        })
        .collect()
}
