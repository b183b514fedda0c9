//! The control plane: registry, broker, state store, controller and a local
//! runner wired together, with the operations the HTTP API exposes.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use datax_core::broker::{Broker, BrokerServer, DEFAULT_CAPACITY};
use datax_core::registry::{
    EntityKind, EntityRecord, GadgetRecord, MigrationScript, Registry, RegistryError, RegistryState, SensorRecord,
    StreamRecord,
};
use datax_core::runner::{InstanceMetrics, InstanceSummary, Runner, RunnerConfig};
use datax_core::scheduler::{Controller, ControllerConfig, ControllerHandle};
use datax_core::schema::validate_optional;
use datax_core::statestore::{StateError, StateStore};
use datax_core::value::Document;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::kind::Kind;
use crate::manifest::{self, Manifest, ParseError, Spec};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{kind} `{name}` not found")]
    NotFound { kind: String, name: String },
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Internal(String),
}

impl ServiceError {
    /// Stable machine-readable code, e.g. `InUse`.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::NotFound { .. } => "NotFound",
            ServiceError::Registry(e) => match e {
                RegistryError::DuplicateName { .. } => "DuplicateName",
                RegistryError::NotFound { .. } => "NotFound",
                RegistryError::InvalidSchema { .. } => "InvalidSchema",
                RegistryError::EmptyExecutable(_) => "EmptyExecutable",
                RegistryError::InvalidConfig { .. } => "InvalidConfig",
                RegistryError::DriverMissing(_) => "DriverMissing",
                RegistryError::AuMissing(_) => "AuMissing",
                RegistryError::ActuatorMissing(_) => "ActuatorMissing",
                RegistryError::UnknownInput(_) => "UnknownInput",
                RegistryError::CycleDetected(_) => "CycleDetected",
                RegistryError::ZeroReplicas { .. } => "ZeroReplicas",
                RegistryError::InUse { .. } => "InUse",
                RegistryError::HasDependents { .. } => "HasDependents",
                RegistryError::SensorStream(_) => "SensorStream",
                RegistryError::IncompatibleUpgrade(_) => "IncompatibleUpgrade",
                RegistryError::Journal(_) | RegistryError::CorruptJournal { .. } => "Storage",
            },
            ServiceError::State(e) => match e {
                StateError::DuplicateName(_) => "DuplicateName",
                StateError::UnknownOwner(_) => "UnknownOwner",
                StateError::NotFound(_) | StateError::NoSuchDatabase(_) => "NotFound",
                StateError::InvalidName(_) => "InvalidName",
                StateError::Io(_) | StateError::Corrupt(_) => "Storage",
            },
            ServiceError::Parse(_) => "ParseError",
            ServiceError::BadRequest(_) => "BadRequest",
            ServiceError::Internal(_) => "Internal",
        }
    }

    /// HTTP status class for this error.
    pub fn status(&self) -> u16 {
        match self.code() {
            "NotFound" => 404,
            "DuplicateName" | "InUse" | "HasDependents" | "SensorStream" | "IncompatibleUpgrade" => 409,
            "Storage" | "Internal" => 500,
            _ => 400,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Created,
    Upgraded,
    Unchanged,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApplyResult {
    /// 1-based position of the document in the file.
    pub document: usize,
    pub kind: Kind,
    pub name: String,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ApplyReport {
    /// One entry per document, in file order.
    pub results: Vec<ApplyResult>,
}

impl ApplyReport {
    pub fn count(&self, outcome: Outcome) -> usize {
        self.results.iter().filter(|r| r.outcome == outcome).count()
    }

    pub fn has_errors(&self) -> bool {
        self.count(Outcome::Error) > 0
    }
}

#[derive(Debug, Clone)]
pub struct PlatformOptions {
    /// Registry journal and databases live here; `None` keeps them in memory.
    pub data_dir: Option<PathBuf>,
    /// Runner sockets and instance logs.
    pub work_dir: PathBuf,
    pub node_id: String,
    pub node_capacity: u32,
    pub controller: ControllerConfig,
    pub runner: Option<RunnerConfig>,
    /// Serve the broker over TCP for runners on other hosts.
    pub broker_listen: Option<SocketAddr>,
    /// Start the background reconciliation loop.
    pub run_loop: bool,
}

impl PlatformOptions {
    pub fn new(work_dir: impl Into<PathBuf>) -> Self {
        PlatformOptions {
            data_dir: None,
            work_dir: work_dir.into(),
            node_id: "local".into(),
            node_capacity: 64,
            controller: ControllerConfig::default(),
            runner: None,
            broker_listen: None,
            run_loop: true,
        }
    }
}

pub struct ControlPlane {
    registry: Arc<Registry>,
    broker: Broker,
    store: Arc<StateStore>,
    controller: Arc<Controller>,
    runner: Arc<Runner>,
    broker_server: Option<BrokerServer>,
    handle: Mutex<Option<ControllerHandle>>,
}

impl ControlPlane {
    pub fn start(options: PlatformOptions) -> Result<Arc<ControlPlane>, ServiceError> {
        let internal = |e: std::io::Error| ServiceError::Internal(e.to_string());
        let (registry, store) = match &options.data_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(internal)?;
                (
                    Registry::open(&dir.join("registry.journal"))?,
                    StateStore::open(&dir.join("databases"))?,
                )
            }
            None => (Registry::in_memory(), StateStore::in_memory()),
        };
        let registry = Arc::new(registry);
        let store = Arc::new(store);
        let broker = Broker::new(DEFAULT_CAPACITY);
        let broker_server = match options.broker_listen {
            Some(addr) => Some(BrokerServer::bind(broker.clone(), addr).map_err(internal)?),
            None => None,
        };
        let runner_config = options
            .runner
            .clone()
            .unwrap_or_else(|| RunnerConfig::new(options.node_id.clone(), options.work_dir.clone()));
        let runner = Arc::new(
            Runner::new(Arc::new(broker.clone()), Some(store.clone()), runner_config).map_err(internal)?,
        );
        let controller = Controller::new(registry.clone(), broker.clone(), Some(store.clone()), options.controller.clone());
        controller.add_local_node(&options.node_id, options.node_capacity, runner.clone());
        let handle = options.run_loop.then(|| controller.run());
        Ok(Arc::new(ControlPlane {
            registry,
            broker,
            store,
            controller,
            runner,
            broker_server,
            handle: Mutex::new(handle),
        }))
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn broker(&self) -> &Broker {
        &self.broker
    }

    pub fn store(&self) -> &Arc<StateStore> {
        &self.store
    }

    pub fn controller(&self) -> &Arc<Controller> {
        &self.controller
    }

    pub fn runner(&self) -> &Arc<Runner> {
        &self.runner
    }

    pub fn broker_addr(&self) -> Option<SocketAddr> {
        self.broker_server.as_ref().map(BrokerServer::local_addr)
    }

    /// Stops the loop and every instance.
    pub fn shutdown(&self) {
        if let Some(handle) = self.handle.lock().take() {
            handle.stop();
        }
        self.controller.stop_all();
    }

    pub fn apply_text(&self, text: &str) -> Result<ApplyReport, ServiceError> {
        Ok(self.apply(&manifest::parse(text)?))
    }

    /// Applies documents in dependency order. A failing document does not
    /// undo earlier ones.
    pub fn apply(&self, docs: &[Manifest]) -> ApplyReport {
        let mut results: Vec<Option<ApplyResult>> = vec![None; docs.len()];
        for i in manifest::apply_order(docs) {
            let doc = &docs[i];
            let (outcome, error) = match self.apply_one(doc) {
                Ok(outcome) => (outcome, None),
                Err(e) => (Outcome::Error, Some(e)),
            };
            results[i] = Some(ApplyResult {
                document: i + 1,
                kind: doc.kind,
                name: doc.name.clone(),
                outcome,
                code: error.as_ref().map(|e| e.code().to_string()),
                message: error.map(|e| e.to_string()),
            });
        }
        ApplyReport {
            results: results.into_iter().flatten().collect(),
        }
    }

    fn apply_one(&self, doc: &Manifest) -> Result<Outcome, ServiceError> {
        let snapshot = self.registry.snapshot();
        let name = doc.name.as_str();
        let exists_differently = |kind: &str| {
            ServiceError::BadRequest(format!(
                "{kind} `{name}` already exists with a different spec; delete it before re-applying"
            ))
        };
        match &doc.spec {
            Spec::Entity(spec) => {
                let kind = doc.kind.entity_kind().expect("entity documents have entity kinds");
                let mut record = EntityRecord::new(name, kind, &spec.executable);
                record.schema = spec.schema.clone();
                match snapshot.entity(kind, name) {
                    None => {
                        self.registry.register_entity(record)?;
                        Ok(Outcome::Created)
                    }
                    Some(cur) if cur.executable == record.executable && cur.schema == record.schema => {
                        Ok(Outcome::Unchanged)
                    }
                    Some(_) => {
                        let script = spec.migration.as_ref().map(MigrationScript::new);
                        let migration = script.as_ref().map(|s| s as &dyn datax_core::registry::ConfigMigration);
                        self.registry.upgrade_entity(kind, name, record, migration)?;
                        Ok(Outcome::Upgraded)
                    }
                }
            }
            Spec::Sensor(spec) => {
                let mut record = SensorRecord::new(name, &spec.driver, spec.config.clone());
                record.node_pin = spec.node_pin.clone();
                match snapshot.sensor(name) {
                    None => {
                        self.registry.register_sensor(record)?;
                        Ok(Outcome::Created)
                    }
                    Some(cur) => {
                        let schema = snapshot.entity(EntityKind::Driver, &spec.driver).and_then(|e| e.schema.as_ref());
                        record.config = normalized(schema, &record.config, &cur.config);
                        if *cur == record {
                            Ok(Outcome::Unchanged)
                        } else {
                            Err(exists_differently("sensor"))
                        }
                    }
                }
            }
            Spec::Stream(spec) => {
                let mut record = StreamRecord::derived(name, &spec.analytics_unit, spec.inputs.clone(), spec.config.clone())
                    .with_replicas(spec.replicas);
                record.buffer_capacity = spec.buffer_capacity;
                match snapshot.stream(name) {
                    None => {
                        self.registry.create_stream(record)?;
                        Ok(Outcome::Created)
                    }
                    Some(cur) => {
                        let schema = snapshot
                            .entity(EntityKind::AnalyticsUnit, &spec.analytics_unit)
                            .and_then(|e| e.schema.as_ref());
                        record.au_config = normalized(schema, &record.au_config, &cur.au_config);
                        if *cur == record {
                            Ok(Outcome::Unchanged)
                        } else {
                            Err(exists_differently("stream"))
                        }
                    }
                }
            }
            Spec::Gadget(spec) => {
                let mut record = GadgetRecord::new(name, &spec.actuator, spec.inputs.clone(), spec.config.clone());
                record.node_pin = spec.node_pin.clone();
                match snapshot.gadget(name) {
                    None => {
                        self.registry.register_gadget(record)?;
                        Ok(Outcome::Created)
                    }
                    Some(cur) => {
                        let schema = snapshot.entity(EntityKind::Actuator, &spec.actuator).and_then(|e| e.schema.as_ref());
                        record.config = normalized(schema, &record.config, &cur.config);
                        if *cur == record {
                            Ok(Outcome::Unchanged)
                        } else {
                            Err(exists_differently("gadget"))
                        }
                    }
                }
            }
            Spec::Database(spec) => match self.store.database(name) {
                None => {
                    self.store.create_database(name, &spec.owner, &*snapshot)?;
                    self.controller.wake();
                    Ok(Outcome::Created)
                }
                Some(cur) if cur.owner == spec.owner => Ok(Outcome::Unchanged),
                Some(_) => Err(exists_differently("database")),
            },
        }
    }

    /// Deletes one resource with the registry's refusal rules. Databases of
    /// a deleted owner go with it.
    pub fn delete(&self, kind: Kind, name: &str) -> Result<(), ServiceError> {
        match kind {
            Kind::Driver | Kind::AnalyticsUnit | Kind::Actuator => {
                self.registry.delete_entity(kind.entity_kind().unwrap(), name)?
            }
            Kind::Sensor => self.registry.delete_sensor(name)?,
            Kind::Stream => self.registry.delete_stream(name)?,
            Kind::Gadget => self.registry.delete_gadget(name)?,
            Kind::Database => self.store.delete_database(name)?,
        }
        let snapshot = self.registry.snapshot();
        self.store.prune(&*snapshot)?;
        self.controller.wake();
        Ok(())
    }

    fn instances_of(&self, workload: &str) -> Vec<Value> {
        self.controller
            .instances()
            .into_iter()
            .filter(|i| i.workload == workload)
            .map(|i| json!({"instance_id": i.instance_id, "node": i.node, "state": i.state}))
            .collect()
    }

    fn row(&self, state: &RegistryState, kind: Kind, name: &str) -> Option<Value> {
        Some(match kind {
            Kind::Driver | Kind::AnalyticsUnit | Kind::Actuator => {
                let e = state.entity(kind.entity_kind().unwrap(), name)?;
                json!({
                    "name": e.name,
                    "kind": kind,
                    "executable": e.executable,
                    "version": e.version,
                    "schema": e.schema,
                })
            }
            Kind::Sensor => {
                let s = state.sensor(name)?;
                json!({
                    "name": s.name,
                    "driver": s.driver,
                    "config": s.config,
                    "node_pin": s.node_pin,
                    "instances": self.instances_of(&format!("sensor/{name}")),
                })
            }
            Kind::Stream => {
                let s = state.stream(name)?;
                let workload = match s.producer_kind {
                    datax_core::registry::ProducerKind::Sensor => format!("sensor/{name}"),
                    datax_core::registry::ProducerKind::AnalyticsUnit => format!("stream/{name}"),
                };
                json!({
                    "name": s.name,
                    "producer_kind": s.producer_kind,
                    "producer": s.producer,
                    "inputs": s.inputs,
                    "config": s.au_config,
                    "replicas": s.replicas,
                    "buffer_capacity": s.buffer_capacity,
                    "instances": self.instances_of(&workload),
                })
            }
            Kind::Gadget => {
                let g = state.gadget(name)?;
                json!({
                    "name": g.name,
                    "actuator": g.actuator,
                    "inputs": g.inputs,
                    "config": g.config,
                    "node_pin": g.node_pin,
                    "instances": self.instances_of(&format!("gadget/{name}")),
                })
            }
            Kind::Database => serde_json::to_value(self.store.database(name)?).ok()?,
        })
    }

    fn names(&self, state: &RegistryState, kind: Kind) -> Vec<String> {
        match kind {
            Kind::Driver | Kind::AnalyticsUnit | Kind::Actuator => {
                state.entities(kind.entity_kind().unwrap()).keys().cloned().collect()
            }
            Kind::Sensor => state.sensors().keys().cloned().collect(),
            Kind::Stream => state.streams().keys().cloned().collect(),
            Kind::Gadget => state.gadgets().keys().cloned().collect(),
            Kind::Database => self.store.databases().into_iter().map(|d| d.name).collect(),
        }
    }

    /// All resources of a kind, sorted by name.
    pub fn list(&self, kind: Kind) -> Vec<Value> {
        let state = self.registry.snapshot();
        let mut names = self.names(&state, kind);
        names.sort();
        names.iter().filter_map(|n| self.row(&state, kind, n)).collect()
    }

    pub fn get(&self, kind: Kind, name: &str) -> Result<Value, ServiceError> {
        let state = self.registry.snapshot();
        self.row(&state, kind, name).ok_or_else(|| ServiceError::NotFound {
            kind: kind.as_str().to_string(),
            name: name.to_string(),
        })
    }

    /// Everything known under `name`: matching records, dependents, running
    /// instances with a metrics rollup, and owned databases.
    pub fn describe(&self, name: &str) -> Result<Value, ServiceError> {
        let state = self.registry.snapshot();
        let mut records = Vec::new();
        for kind in Kind::ALL {
            if let Some(row) = self.row(&state, kind, name) {
                records.push(json!({"kind": kind, "record": row}));
            }
        }
        if records.is_empty() {
            return Err(ServiceError::NotFound {
                kind: "resource".into(),
                name: name.to_string(),
            });
        }
        let dependents = state.dependents(name).unwrap_or_default();
        let mut instances = Vec::new();
        let mut rollup = InstanceMetrics::default();
        for workload in ["sensor", "stream", "gadget"].map(|p| format!("{p}/{name}")) {
            for (inst, m) in self.controller.workload_metrics(&workload) {
                add(&mut rollup, &m);
                instances.push(json!({"instance": inst, "metrics": m}));
            }
        }
        let databases = self.store.owned_by(&[name]);
        Ok(json!({
            "name": name,
            "records": records,
            "dependents": dependents,
            "instances": instances,
            "metrics": rollup,
            "databases": databases,
        }))
    }

    pub fn stream_metrics(&self, name: &str) -> Result<Value, ServiceError> {
        let state = self.registry.snapshot();
        let stream = state.stream(name).ok_or_else(|| ServiceError::NotFound {
            kind: "Stream".into(),
            name: name.to_string(),
        })?;
        let workload = match stream.producer_kind {
            datax_core::registry::ProducerKind::Sensor => format!("sensor/{name}"),
            datax_core::registry::ProducerKind::AnalyticsUnit => format!("stream/{name}"),
        };
        let desired = self.controller.desired().get(&workload).map(|d| d.replicas);
        let mut totals = InstanceMetrics::default();
        let instances: Vec<Value> = self
            .controller
            .workload_metrics(&workload)
            .into_iter()
            .map(|(inst, m)| {
                add(&mut totals, &m);
                json!({"instance_id": inst.instance_id, "state": inst.state, "metrics": m})
            })
            .collect();
        Ok(json!({
            "stream": name,
            "desired_replicas": desired,
            "instances": instances,
            "totals": totals,
        }))
    }

    pub fn instances(&self) -> Vec<InstanceSummary> {
        self.controller.instances()
    }

    pub fn instance(&self, id: &str) -> Result<InstanceSummary, ServiceError> {
        self.controller.instance(id).ok_or_else(|| not_found_instance(id))
    }

    pub fn instance_metrics(&self, id: &str) -> Result<InstanceMetrics, ServiceError> {
        self.controller.instance_metrics(id).ok_or_else(|| not_found_instance(id))
    }

    pub fn instance_logs(&self, id: &str) -> Result<String, ServiceError> {
        self.controller.instance_logs(id).ok_or_else(|| not_found_instance(id))
    }
}

impl Drop for ControlPlane {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn not_found_instance(id: &str) -> ServiceError {
    ServiceError::NotFound {
        kind: "instance".into(),
        name: id.to_string(),
    }
}

/// The configuration a re-applied document amounts to. Keys the document
/// leaves out that were filled from a schema default keep their stored
/// value, so a later default change does not make the document differ.
fn normalized(schema: Option<&datax_core::schema::ConfigSchema>, declared: &Document, stored: &Document) -> Document {
    let defaulted = |k: &String| {
        !declared.contains_key(k) && schema.and_then(|s| s.fields.get(k)).is_some_and(|f| f.default.is_some())
    };
    if declared.iter().all(|(k, v)| stored.get(k) == Some(v)) && stored.keys().all(|k| declared.contains_key(k) || defaulted(k)) {
        return stored.clone();
    }
    let report = validate_optional(schema, declared);
    if report.is_valid() {
        report.normalized
    } else {
        declared.clone()
    }
}

fn add(total: &mut InstanceMetrics, m: &InstanceMetrics) {
    total.received += m.received;
    total.dropped += m.dropped;
    total.published += m.published;
    total.buffered += m.buffered;
    total.buffer_capacity += m.buffer_capacity;
    total.cpu_pct += m.cpu_pct;
    total.rss_bytes += m.rss_bytes;
    total.uptime_ms = total.uptime_ms.max(m.uptime_ms);
}
