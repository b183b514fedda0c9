//! The reconcile planner against an exhaustive search over every
//! keep/stop/launch choice for small worlds.

use std::collections::BTreeMap;

use datax_core::runner::{InstanceState, InstanceSummary, LaunchSpec};
use datax_core::scheduler::{reconcile, Action, DesiredWorkload, NodeRecord};
use proptest::prelude::*;

const STATES: [InstanceState; 5] = [
    InstanceState::Starting,
    InstanceState::Running,
    InstanceState::Unhealthy,
    InstanceState::Stopped,
    InstanceState::Failed,
];
const W: &str = "stream/w";
const FRESH: &str = "fresh";

fn desired_for(workload: &str, replicas: u32, pin: Option<&str>) -> DesiredWorkload {
    DesiredWorkload {
        workload: workload.into(),
        replicas,
        pin: pin.map(str::to_string),
        template: LaunchSpec {
            instance_id: String::new(),
            workload: workload.into(),
            entity: "au".into(),
            version: 1,
            executable: "x".into(),
            config: Default::default(),
            inputs: vec![],
            output: None,
            group: workload.into(),
            databases: vec![],
            fingerprint: FRESH.into(),
        },
    }
}

fn summary(id: &str, workload: &str, node: &str, state: InstanceState, fresh: bool) -> InstanceSummary {
    InstanceSummary {
        instance_id: id.into(),
        workload: workload.into(),
        entity: "au".into(),
        version: 1,
        fingerprint: if fresh { FRESH } else { "stale" }.into(),
        node: node.into(),
        state,
        reason: None,
    }
}

fn nodes(n2_alive: bool) -> BTreeMap<String, NodeRecord> {
    let mut n1 = NodeRecord::new("n1", "", 16, 0);
    n1.alive = true;
    let mut n2 = NodeRecord::new("n2", "", 16, 0);
    n2.alive = n2_alive;
    [("n1".to_string(), n1), ("n2".to_string(), n2)].into()
}

/// Exhaustive planner for a single workload: tries every subset of
/// instances to keep and picks the cheapest valid one.
fn oracle(
    desired: Option<&DesiredWorkload>,
    current: &[InstanceSummary],
    nodes: &BTreeMap<String, NodeRecord>,
) -> (Vec<Action>, bool) {
    let n = current.len();
    let mut best: Option<(usize, (usize, Vec<String>), u32)> = None;
    for mask in 0u32..(1 << n) {
        let kept: Vec<&InstanceSummary> = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| &current[i]).collect();
        let valid_members = kept.iter().all(|i| {
            let Some(d) = desired else { return false };
            !matches!(i.state, InstanceState::Stopped | InstanceState::Failed)
                && i.fingerprint == FRESH
                && nodes[&i.node].alive
                && d.pin.as_ref().is_none_or(|p| *p == i.node)
        });
        if !valid_members {
            continue;
        }
        let target = desired.map_or(0, |d| d.replicas as usize);
        if kept.len() > target {
            continue;
        }
        let launches = (target - kept.len()) as u32;
        let cost = (n - kept.len()) + launches as usize;
        let unhealthy = kept.iter().filter(|i| i.state == InstanceState::Unhealthy).count();
        // Prefer healthy keeps, then the smallest ids.
        let mut ids: Vec<String> = kept.iter().map(|i| i.instance_id.clone()).collect();
        ids.sort();
        let key = (cost, (unhealthy, ids), launches);
        if best.as_ref().is_none_or(|b| (key.0, &key.1) < (b.0, &b.1)) {
            best = Some(key);
        }
    }
    let (_, (_, kept_ids), launches) = best.expect("keeping nothing is always valid");

    let mut stops: Vec<String> = current
        .iter()
        .map(|i| i.instance_id.clone())
        .filter(|id| !kept_ids.contains(id))
        .collect();
    stops.sort();
    let mut actions: Vec<Action> = stops.into_iter().map(|instance_id| Action::Stop { instance_id }).collect();

    // Placement by brute force: count occupied slots per alive node.
    let mut used: BTreeMap<&str, u32> = nodes.iter().filter(|(_, r)| r.alive).map(|(k, _)| (k.as_str(), 0)).collect();
    for i in current.iter().filter(|i| kept_ids.contains(&i.instance_id)) {
        if let Some(u) = used.get_mut(i.node.as_str()) {
            *u += 1;
        }
    }
    let mut unschedulable = false;
    for _ in 0..launches {
        let d = desired.unwrap();
        let choice = match &d.pin {
            Some(p) if nodes[p].alive => Some(p.clone()),
            Some(_) => None,
            None => {
                let mut best: Option<(&str, u32)> = None;
                for (node, u) in &used {
                    let free = nodes[*node].capacity - u;
                    if best.is_none_or(|(_, f)| free > f) {
                        best = Some((node, free));
                    }
                }
                best.map(|(n, _)| n.to_string())
            }
        };
        match choice {
            Some(node) => {
                *used.get_mut(node.as_str()).unwrap() += 1;
                actions.push(Action::Launch {
                    workload: W.into(),
                    node,
                });
            }
            None => {
                unschedulable = true;
                break;
            }
        }
    }
    (actions, unschedulable)
}

fn apply(current: &[InstanceSummary], actions: &[Action], counter: &mut u32) -> Vec<InstanceSummary> {
    let mut next: Vec<InstanceSummary> = current
        .iter()
        .filter(|i| !actions.contains(&Action::Stop { instance_id: i.instance_id.clone() }))
        .cloned()
        .collect();
    for a in actions {
        if let Action::Launch { workload, node } = a {
            *counter += 1;
            next.push(summary(&format!("z{counter:04}"), workload, node, InstanceState::Running, true));
        }
    }
    next
}

#[test]
fn planner_matches_exhaustive_search() {
    let per_instance: Vec<(InstanceState, bool, &str)> = STATES
        .iter()
        .flat_map(|&s| [true, false].into_iter().flat_map(move |f| ["n1", "n2"].map(|n| (s, f, n))))
        .collect();
    let mut worlds: Vec<Vec<InstanceSummary>> = vec![vec![]];
    for a in &per_instance {
        worlds.push(vec![summary("a", W, a.2, a.0, a.1)]);
        for b in &per_instance {
            worlds.push(vec![summary("a", W, a.2, a.0, a.1), summary("b", W, b.2, b.0, b.1)]);
        }
    }

    let mut cases = 0;
    for current in &worlds {
        for replicas in [None, Some(0), Some(1), Some(2)] {
            for pin in [None, Some("n1"), Some("n2")] {
                for n2_alive in [true, false] {
                    let nodes = nodes(n2_alive);
                    let want = replicas.map(|r| desired_for(W, r, pin));
                    let desired: BTreeMap<String, DesiredWorkload> =
                        want.iter().map(|d| (W.to_string(), d.clone())).collect();
                    let plan = reconcile(&desired, current, &nodes);
                    let (expected, unschedulable) = oracle(want.as_ref(), current, &nodes);
                    assert_eq!(plan.actions, expected, "current={current:?} replicas={replicas:?} pin={pin:?} n2_alive={n2_alive}");
                    assert_eq!(!plan.conditions.is_empty(), unschedulable);

                    if !unschedulable {
                        let mut counter = 0;
                        let next = apply(current, &plan.actions, &mut counter);
                        assert!(reconcile(&desired, &next, &nodes).actions.is_empty(), "not idempotent");
                    }
                    for action in &plan.actions {
                        if let (Action::Launch { node, .. }, Some(p)) = (action, pin) {
                            assert_eq!(node, p, "pin violated");
                        }
                    }
                    cases += 1;
                }
            }
        }
    }
    assert!(cases > 10_000, "{cases}");
}

type World = (Vec<(u8, u32, Option<u8>)>, Vec<(u8, u8, u8, bool)>, Vec<bool>);

fn world_strategy() -> impl Strategy<Value = World> {
    (
        prop::collection::vec((0u8..4, 0u32..4, prop::option::of(0u8..3)), 0..4),
        prop::collection::vec((0u8..5, 0u8..5, 0u8..3, any::<bool>()), 0..10),
        prop::collection::vec(any::<bool>(), 3),
    )
}

proptest! {
    #[test]
    fn repeated_reconcile_reaches_fixed_point((workloads, instances, alive) in world_strategy()) {
        let mut nodes = BTreeMap::new();
        for (i, a) in alive.iter().enumerate() {
            let mut r = NodeRecord::new(format!("n{i}"), "", 3, 0);
            r.alive = *a;
            nodes.insert(format!("n{i}"), r);
        }
        let desired: BTreeMap<String, DesiredWorkload> = workloads
            .iter()
            .map(|(w, r, pin)| {
                let name = format!("stream/w{w}");
                let pin = pin.map(|p| format!("n{p}"));
                (name.clone(), desired_for(&name, *r, pin.as_deref()))
            })
            .collect();
        let mut current: Vec<InstanceSummary> = instances
            .iter()
            .enumerate()
            .map(|(i, (w, s, n, fresh))| {
                summary(&format!("i{i:02}"), &format!("stream/w{w}"), &format!("n{n}"), STATES[*s as usize], *fresh)
            })
            .collect();

        let bound = desired.len() + current.len() + 1;
        let mut counter = 0;
        let mut converged = false;
        for _ in 0..bound {
            let plan = reconcile(&desired, &current, &nodes);
            prop_assert_eq!(&plan, &reconcile(&desired, &current, &nodes), "nondeterministic");
            if plan.actions.is_empty() {
                converged = true;
                break;
            }
            current = apply(&current, &plan.actions, &mut counter);
            for (id, n) in nodes.iter() {
                let used = current.iter().filter(|i| &i.node == id).count() as u32;
                let launched_here = current.iter().any(|i| &i.node == id && i.instance_id.starts_with('z'));
                prop_assert!(!launched_here || (n.alive && used <= n.capacity), "bad launch on {}", id);
            }
        }
        prop_assert!(converged);
    }
}
