use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use crossbeam_channel::{select, Receiver, Sender};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use tracing::{debug, info, warn};

use super::autoscale::{AutoscalePolicy, Autoscaler, TickSample};
use super::desired::{desired_state, DesiredWorkload};
use super::nodes::{NodeError, NodeRecord, NodeTable};
use super::{reconcile, Action, Condition};
use crate::broker::{Broker, BrokerError};
use crate::registry::{Registry, Replicas};
use crate::runner::{InstanceMetrics, InstanceSummary, LaunchSpec, Runner, RunnerEvent};
use crate::statestore::StateStore;

/// The operations the controller needs from a node's runner.
pub trait NodeExecutor: Send + Sync {
    fn launch(&self, spec: LaunchSpec) -> Result<InstanceSummary, String>;
    fn stop(&self, instance_id: &str, grace: Duration);
    /// Drops a terminal instance from the node's listing.
    fn forget(&self, instance_id: &str);
    fn instances(&self) -> Vec<InstanceSummary>;
    fn metrics(&self, instance_id: &str) -> Option<InstanceMetrics>;
    fn logs(&self, instance_id: &str) -> Option<String>;
    /// Lifecycle notifications, if the executor can push them.
    fn events(&self) -> Option<Receiver<RunnerEvent>> {
        None
    }
}

impl NodeExecutor for Runner {
    fn launch(&self, spec: LaunchSpec) -> Result<InstanceSummary, String> {
        let id = spec.instance_id.clone();
        self.launch_instance(spec).map_err(|e| e.to_string())?;
        self.summary(&id).map_err(|e| e.to_string())
    }

    fn stop(&self, instance_id: &str, grace: Duration) {
        self.stop_instance(instance_id, grace);
    }

    fn forget(&self, instance_id: &str) {
        Runner::forget(self, instance_id);
    }

    fn instances(&self) -> Vec<InstanceSummary> {
        Runner::instances(self)
    }

    fn metrics(&self, instance_id: &str) -> Option<InstanceMetrics> {
        Runner::metrics(self, instance_id).ok()
    }

    fn logs(&self, instance_id: &str) -> Option<String> {
        Runner::logs(self, instance_id).ok()
    }

    fn events(&self) -> Option<Receiver<RunnerEvent>> {
        Some(Runner::events(self))
    }
}

#[derive(Debug, Clone)]
pub struct ControllerConfig {
    pub policy: AutoscalePolicy,
    pub tick: Duration,
    pub stop_grace: Duration,
    /// Buffer size of subjects whose stream does not set one.
    pub default_buffer: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            policy: AutoscalePolicy::default(),
            tick: Duration::from_secs(1),
            stop_grace: Duration::from_secs(2),
            default_buffer: crate::broker::DEFAULT_CAPACITY,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TickReport {
    pub actions: Vec<Action>,
    /// `(workload or instance, reason)` for actions that did not succeed.
    pub failures: Vec<(String, String)>,
    pub conditions: Vec<Condition>,
}

impl TickReport {
    pub fn is_quiet(&self) -> bool {
        self.actions.is_empty() && self.failures.is_empty()
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// The reconciliation loop: owns desired/current comparison, node liveness
/// and autoscaler state.
pub struct Controller {
    registry: Arc<Registry>,
    broker: Broker,
    store: Option<Arc<StateStore>>,
    config: ControllerConfig,
    nodes: Mutex<NodeTable>,
    executors: RwLock<BTreeMap<String, Arc<dyn NodeExecutor>>>,
    /// In-process nodes are alive as long as the controller is.
    local: RwLock<BTreeSet<String>>,
    autoscaler: Mutex<Autoscaler>,
    targets: Mutex<BTreeMap<String, u32>>,
    last_dropped: Mutex<BTreeMap<String, u64>>,
    last_autoscale_ms: AtomicU64,
    conditions: Mutex<Vec<Condition>>,
    next_id: AtomicU64,
    tick_lock: Mutex<()>,
    wake_tx: Sender<()>,
    wake_rx: Receiver<()>,
}

impl Controller {
    pub fn new(
        registry: Arc<Registry>,
        broker: Broker,
        store: Option<Arc<StateStore>>,
        config: ControllerConfig,
    ) -> Arc<Controller> {
        let (wake_tx, wake_rx) = crossbeam_channel::bounded(1);
        let controller = Arc::new(Controller {
            autoscaler: Mutex::new(Autoscaler::new(config.policy)),
            registry,
            broker,
            store,
            config,
            nodes: Mutex::new(NodeTable::new()),
            executors: RwLock::new(BTreeMap::new()),
            local: RwLock::new(BTreeSet::new()),
            targets: Mutex::new(BTreeMap::new()),
            last_dropped: Mutex::new(BTreeMap::new()),
            last_autoscale_ms: AtomicU64::new(0),
            conditions: Mutex::new(Vec::new()),
            next_id: AtomicU64::new(1),
            tick_lock: Mutex::new(()),
            wake_tx,
            wake_rx,
        });
        let watch = controller.registry.watch();
        controller.forward_wakeups(watch);
        controller
    }

    fn forward_wakeups<T: Send + 'static>(&self, rx: Receiver<T>) {
        let tx = self.wake_tx.clone();
        thread::Builder::new()
            .name("ctl-wake".into())
            .spawn(move || {
                while rx.recv().is_ok() {
                    let _ = tx.try_send(());
                }
            })
            .expect("spawn wake forwarder");
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn broker(&self) -> &Broker {
        &self.broker
    }

    pub fn store(&self) -> Option<&Arc<StateStore>> {
        self.store.as_ref()
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    /// Adds an in-process node backed by `executor`.
    pub fn add_local_node(&self, node_id: &str, capacity: u32, executor: Arc<dyn NodeExecutor>) {
        self.attach_executor(node_id, executor);
        self.local.write().insert(node_id.to_string());
        self.nodes.lock().register(NodeRecord::new(node_id, "", capacity, now_ms()), now_ms());
        self.wake();
    }

    /// Attaches the executor through which instances on `node_id` are run.
    pub fn attach_executor(&self, node_id: &str, executor: Arc<dyn NodeExecutor>) {
        if let Some(events) = executor.events() {
            self.forward_wakeups(events);
        }
        self.executors.write().insert(node_id.to_string(), executor);
    }

    pub fn register_node(&self, record: NodeRecord) {
        self.nodes.lock().register(record, now_ms());
        self.wake();
    }

    pub fn heartbeat(&self, node_id: &str) -> Result<(), NodeError> {
        self.nodes.lock().heartbeat(node_id, now_ms())
    }

    pub fn nodes(&self) -> Vec<NodeRecord> {
        let mut table = self.nodes.lock();
        table.refresh(now_ms());
        table.records().values().cloned().collect()
    }

    pub fn conditions(&self) -> Vec<Condition> {
        self.conditions.lock().clone()
    }

    /// Current autoscaler targets of auto-replicated streams.
    pub fn autoscale_targets(&self) -> BTreeMap<String, u32> {
        self.targets.lock().clone()
    }

    pub fn desired(&self) -> BTreeMap<String, DesiredWorkload> {
        let snapshot = self.registry.snapshot();
        desired_state(&snapshot, &self.targets.lock(), self.store.as_deref())
    }

    pub fn instances(&self) -> Vec<InstanceSummary> {
        let executors: Vec<_> = self.executors.read().values().cloned().collect();
        let mut all: Vec<InstanceSummary> = executors.iter().flat_map(|e| e.instances()).collect();
        all.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
        all
    }

    fn executor_of(&self, instance_id: &str) -> Option<Arc<dyn NodeExecutor>> {
        self.executors
            .read()
            .values()
            .find(|e| e.instances().iter().any(|i| i.instance_id == instance_id))
            .cloned()
    }

    pub fn instance(&self, instance_id: &str) -> Option<InstanceSummary> {
        self.instances().into_iter().find(|i| i.instance_id == instance_id)
    }

    pub fn instance_metrics(&self, instance_id: &str) -> Option<InstanceMetrics> {
        self.executor_of(instance_id)?.metrics(instance_id)
    }

    pub fn instance_logs(&self, instance_id: &str) -> Option<String> {
        self.executor_of(instance_id)?.logs(instance_id)
    }

    /// Live instances of a workload with their metrics.
    pub fn workload_metrics(&self, workload: &str) -> Vec<(InstanceSummary, InstanceMetrics)> {
        let executors: Vec<_> = self.executors.read().values().cloned().collect();
        let mut out = Vec::new();
        for exec in executors {
            for inst in exec.instances() {
                if inst.workload == workload && !inst.state.is_terminal() {
                    if let Some(m) = exec.metrics(&inst.instance_id) {
                        out.push((inst, m));
                    }
                }
            }
        }
        out.sort_by(|a, b| a.0.instance_id.cmp(&b.0.instance_id));
        out
    }

    /// Requests a reconciliation pass as soon as possible.
    pub fn wake(&self) {
        let _ = self.wake_tx.try_send(());
    }

    fn sync_subjects(&self, streams: &BTreeMap<String, crate::registry::StreamRecord>) {
        for stream in streams.values() {
            if !self.broker.has_subject(&stream.name) {
                let capacity = stream.buffer_capacity.unwrap_or(self.config.default_buffer);
                match self.broker.create_subject_with_capacity(&stream.name, capacity) {
                    Ok(()) | Err(BrokerError::Duplicate(_)) => {}
                    Err(e) => warn!(stream = %stream.name, error = %e, "cannot create subject"),
                }
            }
        }
        for subject in self.broker.subjects() {
            if !streams.contains_key(&subject.name) {
                // Busy while consumers are still attached; retried next pass.
                let _ = self.broker.destroy_subject(&subject.name);
            }
        }
    }

    fn autoscale(&self, now: u64, streams: &BTreeMap<String, crate::registry::StreamRecord>, current: &[InstanceSummary]) {
        let mut targets = self.targets.lock();
        targets.retain(|name, _| streams.get(name).is_some_and(|s| s.replicas == Replicas::Auto));
        let mut autoscaler = self.autoscaler.lock();
        let mut last_dropped = self.last_dropped.lock();
        let live: BTreeSet<&str> = current
            .iter()
            .filter(|i| !i.state.is_terminal())
            .map(|i| i.instance_id.as_str())
            .collect();
        last_dropped.retain(|id, _| live.contains(id.as_str()));

        for stream in streams.values().filter(|s| s.replicas == Replicas::Auto) {
            let workload = format!("stream/{}", stream.name);
            let mut sample = TickSample {
                t_ms: now,
                ..Default::default()
            };
            for (inst, m) in self.workload_metrics(&workload) {
                let prev = last_dropped.insert(inst.instance_id.clone(), m.dropped).unwrap_or(0);
                sample.dropped += m.dropped.saturating_sub(prev);
                sample.buffered += m.buffered;
                sample.capacity += m.buffer_capacity;
            }
            let current = targets.get(&stream.name).copied().unwrap_or(1);
            let target = autoscaler.decide(&stream.name, current, sample);
            if target != current {
                info!(stream = %stream.name, from = current, to = target, "autoscale");
            }
            targets.insert(stream.name.clone(), target);
        }
    }

    /// One reconciliation pass: refresh liveness, sync subjects, autoscale,
    /// plan, apply, and prune orphaned databases.
    pub fn tick(&self) -> TickReport {
        let _pass = self.tick_lock.lock();
        let now = now_ms();
        let nodes = {
            let mut table = self.nodes.lock();
            for id in self.local.read().iter() {
                let _ = table.heartbeat(id, now);
            }
            for died in table.refresh(now) {
                warn!(node = %died, "node missed heartbeats");
            }
            table.records().clone()
        };
        let snapshot = self.registry.snapshot();
        self.sync_subjects(snapshot.streams());

        let current = self.instances();
        let tick_ms = self.config.tick.as_millis() as u64;
        let last = self.last_autoscale_ms.load(Ordering::Relaxed);
        if now.saturating_sub(last) + 50 >= tick_ms {
            self.last_autoscale_ms.store(now, Ordering::Relaxed);
            self.autoscale(now, snapshot.streams(), &current);
        }

        let desired = desired_state(&snapshot, &self.targets.lock(), self.store.as_deref());
        let plan = reconcile(&desired, &current, &nodes);
        let mut report = TickReport {
            actions: plan.actions.clone(),
            failures: Vec::new(),
            conditions: plan.conditions,
        };

        let executors = self.executors.read().clone();
        let node_of: BTreeMap<&str, &str> = current
            .iter()
            .map(|i| (i.instance_id.as_str(), i.node.as_str()))
            .collect();
        let failures = Mutex::new(Vec::new());
        thread::scope(|s| {
            for action in &plan.actions {
                if let Action::Stop { instance_id } = action {
                    let exec = node_of.get(instance_id.as_str()).and_then(|n| executors.get(*n));
                    if let Some(exec) = exec {
                        let grace = self.config.stop_grace;
                        s.spawn(move || {
                            exec.stop(instance_id, grace);
                            exec.forget(instance_id);
                        });
                    }
                }
            }
        });
        thread::scope(|s| {
            for action in &plan.actions {
                if let Action::Launch { workload, node } = action {
                    let Some(exec) = executors.get(node) else {
                        failures.lock().push((workload.clone(), format!("node `{node}` has no runner")));
                        continue;
                    };
                    let mut spec = desired[workload].template.clone();
                    let n = self.next_id.fetch_add(1, Ordering::Relaxed);
                    spec.instance_id = format!("{}-{n}", workload.replace('/', "-"));
                    let failures = &failures;
                    s.spawn(move || {
                        if let Err(e) = exec.launch(spec) {
                            warn!(%workload, error = %e, "launch failed");
                            failures.lock().push((workload.clone(), e));
                        }
                    });
                }
            }
        });
        report.failures = failures.into_inner();
        report.failures.sort();

        if let Some(store) = &self.store {
            if let Ok(pruned) = store.prune(&*snapshot) {
                for name in pruned {
                    info!(database = %name, "owner gone, database removed");
                }
            }
        }

        let mut conditions = report.conditions.clone();
        conditions.extend(report.failures.iter().map(|(w, r)| Condition {
            workload: w.clone(),
            reason: r.clone(),
        }));
        *self.conditions.lock() = conditions;
        if !report.is_quiet() {
            debug!(actions = report.actions.len(), failures = report.failures.len(), "reconciled");
        }
        report
    }

    /// Ticks until a pass plans no actions, at most `max_passes` times.
    pub fn settle(&self, max_passes: usize) -> bool {
        (0..max_passes).any(|_| self.tick().is_quiet())
    }

    /// Starts the background loop: a pass every tick and on every registry
    /// change or instance failure.
    pub fn run(self: &Arc<Self>) -> ControllerHandle {
        let (stop_tx, stop_rx) = crossbeam_channel::bounded::<()>(1);
        let me = self.clone();
        let join = thread::Builder::new()
            .name("controller".into())
            .spawn(move || loop {
                me.tick();
                select! {
                    recv(stop_rx) -> _ => return,
                    recv(me.wake_rx) -> _ => {}
                    default(me.config.tick) => {}
                }
            })
            .expect("spawn controller");
        ControllerHandle {
            stop: Some(stop_tx),
            join: Some(join),
        }
    }

    /// Stops every instance on every node.
    pub fn stop_all(&self) {
        let executors: Vec<_> = self.executors.read().values().cloned().collect();
        let grace = self.config.stop_grace;
        thread::scope(|s| {
            for exec in &executors {
                for inst in exec.instances() {
                    s.spawn(move || {
                        exec.stop(&inst.instance_id, grace);
                        exec.forget(&inst.instance_id);
                    });
                }
            }
        });
    }
}

/// Stops the background loop when dropped.
pub struct ControllerHandle {
    stop: Option<Sender<()>>,
    join: Option<JoinHandle<()>>,
}

impl ControllerHandle {
    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

impl Drop for ControllerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}
