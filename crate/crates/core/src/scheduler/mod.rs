//! Reconciliation: converge running instances to the registry's desired
//! state across nodes, and scale auto-replicated streams from metrics.
//!
//! Planning ([`reconcile`], [`place`]) and scaling ([`Autoscaler`]) are pure
//! and deterministic. [`Controller`] owns the loop that feeds them live
//! snapshots and applies the resulting actions.

mod autoscale;
mod controller;
mod desired;
mod nodes;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use autoscale::{AutoscalePolicy, Autoscaler, TickSample};
pub use controller::{Controller, ControllerConfig, ControllerHandle, NodeExecutor, TickReport};
pub use desired::{desired_state, fingerprint, DesiredWorkload};
pub use nodes::{NodeError, NodeRecord, NodeTable, HEARTBEAT_PERIOD_MS, MISSED_HEARTBEATS};

use crate::runner::{InstanceState, InstanceSummary};

/// A workload that could not be (fully) scheduled on this pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub workload: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Launch { workload: String, node: String },
    Stop { instance_id: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Plan {
    /// Stops come first, in instance-id order, then launches in workload order.
    pub actions: Vec<Action>,
    pub conditions: Vec<Condition>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScheduleError {
    #[error("pinned node `{0}` is not alive")]
    PinnedNodeDead(String),
    #[error("pinned node `{0}` is full")]
    PinnedNodeFull(String),
    #[error("pinned node `{0}` is unknown")]
    PinnedNodeUnknown(String),
    #[error("no alive node has free capacity")]
    NoCapacity,
}

/// Picks a node for one instance given the free slots per alive node.
///
/// Pinned instances go to their pin or nowhere. Others go to the node with
/// the most free slots, ties broken by the smallest node id.
pub fn place(pin: Option<&str>, nodes: &BTreeMap<String, NodeRecord>, free: &BTreeMap<String, u32>) -> Result<String, ScheduleError> {
    if let Some(pin) = pin {
        let node = nodes.get(pin).ok_or_else(|| ScheduleError::PinnedNodeUnknown(pin.into()))?;
        if !node.alive {
            return Err(ScheduleError::PinnedNodeDead(pin.into()));
        }
        return match free.get(pin) {
            Some(&n) if n > 0 => Ok(pin.to_string()),
            _ => Err(ScheduleError::PinnedNodeFull(pin.into())),
        };
    }
    // max_by_key keeps the last maximum, so iterate in reverse id order.
    free.iter()
        .rev()
        .filter(|(id, &n)| n > 0 && nodes.get(*id).is_some_and(|r| r.alive))
        .max_by_key(|(_, &n)| n)
        .map(|(id, _)| id.clone())
        .ok_or(ScheduleError::NoCapacity)
}

/// Whether an existing instance can count toward its workload's replicas.
fn keepable(inst: &InstanceSummary, want: &DesiredWorkload, nodes: &BTreeMap<String, NodeRecord>) -> bool {
    !inst.state.is_terminal()
        && inst.fingerprint == want.template.fingerprint
        && nodes.get(&inst.node).is_some_and(|n| n.alive)
        && want.pin.as_deref().is_none_or(|p| p == inst.node)
}

/// Computes the minimal set of stops and launches that makes `current`
/// match `desired`.
///
/// An instance is kept when it is not terminal, runs the desired fingerprint
/// on an alive node, and respects the pin. Everything else is stopped. Excess
/// kept instances are trimmed unhealthy-first, then by largest instance id.
pub fn reconcile(
    desired: &BTreeMap<String, DesiredWorkload>,
    current: &[InstanceSummary],
    nodes: &BTreeMap<String, NodeRecord>,
) -> Plan {
    let mut by_workload: BTreeMap<&str, Vec<&InstanceSummary>> = BTreeMap::new();
    for inst in current {
        by_workload.entry(inst.workload.as_str()).or_default().push(inst);
    }

    let mut stops: BTreeSet<String> = BTreeSet::new();
    let mut need: Vec<(&DesiredWorkload, u32)> = Vec::new();

    for (workload, instances) in &by_workload {
        if !desired.contains_key(*workload) {
            stops.extend(instances.iter().map(|i| i.instance_id.clone()));
        }
    }

    for (name, want) in desired {
        let instances = by_workload.get(name.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        let mut kept: Vec<&InstanceSummary> = Vec::new();
        for inst in instances {
            if keepable(inst, want, nodes) {
                kept.push(inst);
            } else {
                stops.insert(inst.instance_id.clone());
            }
        }
        let target = want.replicas as usize;
        if kept.len() > target {
            // Healthy first, then ascending id; the tail is removed.
            kept.sort_by(|a, b| {
                (a.state == InstanceState::Unhealthy, &a.instance_id)
                    .cmp(&(b.state == InstanceState::Unhealthy, &b.instance_id))
            });
            stops.extend(kept.drain(target..).map(|i| i.instance_id.clone()));
        }
        if kept.len() < target {
            need.push((want, (target - kept.len()) as u32));
        }
    }

    // Free slots after the planned stops.
    let mut free: BTreeMap<String, u32> = nodes
        .iter()
        .filter(|(_, n)| n.alive)
        .map(|(id, n)| (id.clone(), n.capacity))
        .collect();
    for inst in current {
        if !inst.state.is_terminal() && !stops.contains(&inst.instance_id) {
            if let Some(slots) = free.get_mut(&inst.node) {
                *slots = slots.saturating_sub(1);
            }
        }
    }

    let mut plan = Plan {
        actions: stops.into_iter().map(|instance_id| Action::Stop { instance_id }).collect(),
        conditions: Vec::new(),
    };
    for (want, count) in need {
        for _ in 0..count {
            match place(want.pin.as_deref(), nodes, &free) {
                Ok(node) => {
                    *free.get_mut(&node).expect("placed on a known node") -= 1;
                    plan.actions.push(Action::Launch {
                        workload: want.workload.clone(),
                        node,
                    });
                }
                Err(e) => {
                    plan.conditions.push(Condition {
                        workload: want.workload.clone(),
                        reason: e.to_string(),
                    });
                    break;
                }
            }
        }
    }
    plan
}
