//! The sidecar: supervises one business-logic process per instance and
//! bridges it to the message bus.
//!
//! For every instance the runner opens a Unix socket, starts the program with
//! `DATAX_SOCKET` and `DATAX_INSTANCE_ID` set, and waits for it to connect.
//! The first frame on the connection is always the instance configuration.
//! After that, bus deliveries on the instance's inputs become `message`
//! frames and `emit` frames become publishes on its output.
//!
//! Instance states move `starting -> running -> (unhealthy <-> running) ->
//! stopped | failed`. A process that exits on its own is `failed`; a closed
//! connection or repeated malformed frames make it `unhealthy`.

mod bus;
mod process;

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::PathBuf;
use std::process::Child;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, Sender};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::{debug, warn};

pub use bus::{Bus, BusSubscription};

use crate::broker::{AccessToken, BrokerError};
use crate::client::{ENV_INSTANCE_ID, ENV_SOCKET, NO_OUTPUT_REASON};
use crate::frame::{read_body, write_frame, Frame, FrameError, FrameType};
use crate::statestore::StateStore;
use crate::value::{Document, Value};
use process::ResourceSampler;

#[derive(Debug, Clone)]
pub struct RunnerConfig {
    pub node_id: String,
    /// Sockets and logs live under this directory.
    pub work_dir: PathBuf,
    pub handshake_timeout: Duration,
    pub liveness_period: Duration,
    pub parse_failure_threshold: u32,
}

impl RunnerConfig {
    pub fn new(node_id: impl Into<String>, work_dir: impl Into<PathBuf>) -> Self {
        RunnerConfig {
            node_id: node_id.into(),
            work_dir: work_dir.into(),
            handshake_timeout: Duration::from_secs(10),
            liveness_period: Duration::from_secs(2),
            parse_failure_threshold: 3,
        }
    }
}

/// Everything needed to start one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaunchSpec {
    pub instance_id: String,
    /// The sensor, stream or gadget this instance serves, e.g. `stream/faces`.
    pub workload: String,
    pub entity: String,
    pub version: u64,
    pub executable: String,
    pub config: Document,
    pub inputs: Vec<String>,
    pub output: Option<String>,
    /// Queue group shared by all replicas of the workload.
    pub group: String,
    #[serde(default)]
    pub databases: Vec<String>,
    /// Changes whenever anything above (other than the id) changes.
    pub fingerprint: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceState {
    Starting,
    Running,
    Unhealthy,
    Stopped,
    Failed,
}

impl InstanceState {
    pub fn is_terminal(self) -> bool {
        matches!(self, InstanceState::Stopped | InstanceState::Failed)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InstanceState::Starting => "starting",
            InstanceState::Running => "running",
            InstanceState::Unhealthy => "unhealthy",
            InstanceState::Stopped => "stopped",
            InstanceState::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub received: u64,
    pub dropped: u64,
    pub published: u64,
    /// Messages waiting in the instance's input buffers.
    pub buffered: u64,
    pub buffer_capacity: u64,
    pub cpu_pct: f64,
    pub rss_bytes: u64,
    pub uptime_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSummary {
    pub instance_id: String,
    pub workload: String,
    pub entity: String,
    pub version: u64,
    pub fingerprint: String,
    pub node: String,
    pub state: InstanceState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunnerEvent {
    pub instance_id: String,
    pub state: InstanceState,
}

#[derive(Debug, thiserror::Error)]
pub enum RunnerError {
    #[error("instance `{0}` already exists")]
    Duplicate(String),
    #[error("instance `{0}` not found")]
    NotFound(String),
    #[error("token refused: {0}")]
    TokenRefused(BrokerError),
    #[error("failed to spawn `{executable}`: {reason}")]
    SpawnFailed { executable: String, reason: String },
    #[error("instance `{0}` did not connect in time")]
    HandshakeTimeout(String),
    #[error("instance `{id}` exited before connecting: {status}")]
    ExitedEarly { id: String, status: String },
    #[error("bus: {0}")]
    Bus(BrokerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

struct Status {
    state: InstanceState,
    stopping: bool,
    reason: Option<String>,
    ended: Option<Instant>,
}

struct Instance {
    spec: LaunchSpec,
    node: String,
    token: AccessToken,
    pid: u32,
    child: Mutex<Child>,
    started: Instant,
    socket_path: PathBuf,
    log_path: PathBuf,
    status: Mutex<Status>,
    /// Bridging is allowed while set. Publishes hold `publish_gate` and
    /// check this flag, so once teardown clears it no publish can follow.
    open: AtomicBool,
    publish_gate: Mutex<()>,
    published: AtomicU64,
    parse_failures: AtomicU32,
    subs: Mutex<Vec<Arc<dyn BusSubscription>>>,
    conn: Mutex<Option<UnixStream>>,
    writer: Mutex<Option<BufWriter<UnixStream>>>,
    sampler: Mutex<ResourceSampler>,
}

impl Instance {
    fn state(&self) -> InstanceState {
        self.status.lock().state
    }

    fn send(&self, frame: &Frame) -> bool {
        match self.writer.lock().as_mut() {
            Some(w) => write_frame(w, frame).is_ok(),
            None => false,
        }
    }

    fn summary(&self) -> InstanceSummary {
        let status = self.status.lock();
        InstanceSummary {
            instance_id: self.spec.instance_id.clone(),
            workload: self.spec.workload.clone(),
            entity: self.spec.entity.clone(),
            version: self.spec.version,
            fingerprint: self.spec.fingerprint.clone(),
            node: self.node.clone(),
            state: status.state,
            reason: status.reason.clone(),
        }
    }

    fn metrics(&self) -> InstanceMetrics {
        let mut m = InstanceMetrics {
            published: self.published.load(Ordering::Relaxed),
            ..Default::default()
        };
        for sub in self.subs.lock().iter() {
            let s = sub.stats();
            m.received += s.delivered;
            m.dropped += s.dropped;
            m.buffered += s.buffered;
            m.buffer_capacity += s.capacity;
        }
        let status = self.status.lock();
        let end = status.ended.unwrap_or_else(Instant::now);
        m.uptime_ms = end.duration_since(self.started).as_millis() as u64;
        if !status.state.is_terminal() {
            drop(status);
            let (cpu, rss) = self.sampler.lock().sample(self.pid);
            m.cpu_pct = cpu;
            m.rss_bytes = rss;
        }
        m
    }

    fn mark_unhealthy(&self, reason: &str) {
        let mut status = self.status.lock();
        if matches!(status.state, InstanceState::Running | InstanceState::Starting) && !status.stopping {
            status.state = InstanceState::Unhealthy;
            status.reason = Some(reason.to_string());
        }
    }

    fn recover(&self) {
        let mut status = self.status.lock();
        if status.state == InstanceState::Unhealthy && status.reason.as_deref() == Some(PARSE_REASON) {
            status.state = InstanceState::Running;
            status.reason = None;
        }
    }
}

const PARSE_REASON: &str = "repeated malformed frames";
const POLL: Duration = Duration::from_millis(100);

struct Shared {
    bus: Arc<dyn Bus>,
    store: Option<Arc<StateStore>>,
    config: RunnerConfig,
    events: Mutex<Vec<Sender<RunnerEvent>>>,
}

impl Shared {
    fn emit_event(&self, instance_id: &str, state: InstanceState) {
        let event = RunnerEvent {
            instance_id: instance_id.to_string(),
            state,
        };
        self.events.lock().retain(|tx| tx.send(event.clone()).is_ok());
    }

    /// Tears down bridging and marks the instance terminal. Only the first
    /// call has any effect.
    fn finish(&self, inst: &Instance, state: InstanceState, reason: Option<String>) {
        {
            let mut status = inst.status.lock();
            if status.state.is_terminal() {
                return;
            }
            status.stopping = true;
        }
        {
            let _gate = inst.publish_gate.lock();
            inst.open.store(false, Ordering::SeqCst);
        }
        self.bus.revoke_token(&inst.spec.instance_id);
        if let Some(conn) = inst.conn.lock().take() {
            let _ = conn.shutdown(std::net::Shutdown::Both);
        }
        *inst.writer.lock() = None;
        {
            let mut child = inst.child.lock();
            if matches!(child.try_wait(), Ok(None)) {
                process::signal_group(inst.pid, libc::SIGKILL);
                let _ = child.wait();
            }
        }
        let _ = std::fs::remove_file(&inst.socket_path);
        {
            let mut status = inst.status.lock();
            status.state = state;
            status.ended = Some(Instant::now());
            if reason.is_some() {
                status.reason = reason;
            }
        }
        debug!(instance = %inst.spec.instance_id, ?state, "instance finished");
        self.emit_event(&inst.spec.instance_id, state);
    }
}

/// A launched instance.
#[derive(Clone)]
pub struct InstanceHandle {
    inner: Arc<Instance>,
}

impl std::fmt::Debug for InstanceHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InstanceHandle")
            .field("id", &self.id())
            .field("pid", &self.pid())
            .field("state", &self.state())
            .finish()
    }
}

impl InstanceHandle {
    pub fn id(&self) -> &str {
        &self.inner.spec.instance_id
    }

    pub fn spec(&self) -> &LaunchSpec {
        &self.inner.spec
    }

    pub fn state(&self) -> InstanceState {
        self.inner.state()
    }

    pub fn pid(&self) -> u32 {
        self.inner.pid
    }

    pub fn token(&self) -> &AccessToken {
        &self.inner.token
    }

    pub fn metrics(&self) -> InstanceMetrics {
        self.inner.metrics()
    }
}

pub struct Runner {
    shared: Arc<Shared>,
    instances: RwLock<BTreeMap<String, Arc<Instance>>>,
    next_socket: AtomicU64,
}

impl Runner {
    pub fn new(bus: Arc<dyn Bus>, store: Option<Arc<StateStore>>, config: RunnerConfig) -> std::io::Result<Runner> {
        std::fs::create_dir_all(config.work_dir.join("sock"))?;
        std::fs::create_dir_all(config.work_dir.join("logs"))?;
        Ok(Runner {
            shared: Arc::new(Shared {
                bus,
                store,
                config,
                events: Mutex::new(Vec::new()),
            }),
            instances: RwLock::new(BTreeMap::new()),
            next_socket: AtomicU64::new(0),
        })
    }

    pub fn node_id(&self) -> &str {
        &self.shared.config.node_id
    }

    pub fn config(&self) -> &RunnerConfig {
        &self.shared.config
    }

    /// Receives a notification whenever an instance stops or fails.
    pub fn events(&self) -> Receiver<RunnerEvent> {
        let (tx, rx) = crossbeam_channel::unbounded();
        self.shared.events.lock().push(tx);
        rx
    }

    /// Starts the program and blocks until it has connected and received its
    /// configuration. On handshake failure the instance remains listed in
    /// state `failed`.
    pub fn launch_instance(&self, spec: LaunchSpec) -> Result<InstanceHandle, RunnerError> {
        let id = spec.instance_id.clone();
        if self.instances.read().contains_key(&id) {
            return Err(RunnerError::Duplicate(id));
        }
        let bus = &self.shared.bus;
        let token = bus
            .issue_token(&id, spec.output.as_deref(), &spec.inputs)
            .map_err(RunnerError::TokenRefused)?;

        let cfg = &self.shared.config;
        let n = self.next_socket.fetch_add(1, Ordering::Relaxed);
        let socket_path = cfg.work_dir.join("sock").join(format!("{n}.sock"));
        let _ = std::fs::remove_file(&socket_path);
        let listener = UnixListener::bind(&socket_path).inspect_err(|_| bus.revoke_token(&id))?;
        listener.set_nonblocking(true)?;

        let log_path = cfg.work_dir.join("logs").join(format!("{id}.log"));
        let socket_str = socket_path.to_string_lossy().into_owned();
        let child = match process::spawn(
            &spec.executable,
            &[(ENV_SOCKET, socket_str.as_str()), (ENV_INSTANCE_ID, id.as_str())],
            &log_path,
        ) {
            Ok(child) => child,
            Err(e) => {
                bus.revoke_token(&id);
                let _ = std::fs::remove_file(&socket_path);
                return Err(RunnerError::SpawnFailed {
                    executable: spec.executable.clone(),
                    reason: e.to_string(),
                });
            }
        };

        let inst = Arc::new(Instance {
            node: cfg.node_id.clone(),
            token,
            pid: child.id(),
            child: Mutex::new(child),
            started: Instant::now(),
            socket_path,
            log_path,
            status: Mutex::new(Status {
                state: InstanceState::Starting,
                stopping: false,
                reason: None,
                ended: None,
            }),
            open: AtomicBool::new(true),
            publish_gate: Mutex::new(()),
            published: AtomicU64::new(0),
            parse_failures: AtomicU32::new(0),
            subs: Mutex::new(Vec::new()),
            conn: Mutex::new(None),
            writer: Mutex::new(None),
            sampler: Mutex::new(ResourceSampler::new()),
            spec,
        });
        self.instances.write().insert(id.clone(), inst.clone());

        match self.handshake(&inst, listener) {
            Ok(()) => Ok(InstanceHandle { inner: inst }),
            Err(e) => {
                self.shared.finish(&inst, InstanceState::Failed, Some(e.to_string()));
                Err(e)
            }
        }
    }

    fn handshake(&self, inst: &Arc<Instance>, listener: UnixListener) -> Result<(), RunnerError> {
        let id = &inst.spec.instance_id;
        let deadline = Instant::now() + self.shared.config.handshake_timeout;
        let stream = loop {
            match listener.accept() {
                Ok((stream, _)) => break stream,
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {}
                Err(e) => return Err(e.into()),
            }
            if let Ok(Some(status)) = inst.child.lock().try_wait() {
                return Err(RunnerError::ExitedEarly {
                    id: id.clone(),
                    status: status.to_string(),
                });
            }
            if inst.status.lock().stopping {
                return Err(RunnerError::HandshakeTimeout(id.clone()));
            }
            if Instant::now() >= deadline {
                return Err(RunnerError::HandshakeTimeout(id.clone()));
            }
            thread::sleep(Duration::from_millis(5));
        };
        drop(listener);
        stream.set_nonblocking(false)?;

        let reader = BufReader::new(stream.try_clone()?);
        *inst.writer.lock() = Some(BufWriter::new(stream.try_clone()?));
        *inst.conn.lock() = Some(stream);

        let mut config_frame = Frame::config(inst.spec.config.clone());
        config_frame.stream = inst.spec.output.clone();
        if !inst.send(&config_frame) {
            return Err(RunnerError::Io(std::io::ErrorKind::BrokenPipe.into()));
        }

        for input in &inst.spec.inputs {
            let sub: Arc<dyn BusSubscription> = self
                .shared
                .bus
                .subscribe(&inst.token, input, &inst.spec.group)
                .map_err(RunnerError::Bus)?
                .into();
            inst.subs.lock().push(sub.clone());
            let inst = inst.clone();
            thread::Builder::new()
                .name(format!("fwd-{id}"))
                .spawn(move || forward(inst, sub))?;
        }

        {
            let mut status = inst.status.lock();
            if status.state == InstanceState::Starting {
                status.state = InstanceState::Running;
            }
        }

        {
            let shared = self.shared.clone();
            let inst = inst.clone();
            thread::Builder::new()
                .name(format!("rd-{id}"))
                .spawn(move || read_loop(shared, inst, reader))?;
        }
        {
            let shared = self.shared.clone();
            let inst = inst.clone();
            thread::Builder::new()
                .name(format!("mon-{id}"))
                .spawn(move || monitor(shared, inst))?;
        }
        Ok(())
    }

    fn get(&self, id: &str) -> Result<Arc<Instance>, RunnerError> {
        self.instances
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| RunnerError::NotFound(id.to_string()))
    }

    pub fn handle(&self, id: &str) -> Result<InstanceHandle, RunnerError> {
        self.get(id).map(|inner| InstanceHandle { inner })
    }

    /// Terminates politely, then forcibly after `grace`. Idempotent; unknown
    /// ids are ignored.
    pub fn stop_instance(&self, id: &str, grace: Duration) {
        let Ok(inst) = self.get(id) else {
            return;
        };
        {
            let mut status = inst.status.lock();
            if status.state.is_terminal() || status.stopping {
                return;
            }
            status.stopping = true;
        }
        process::signal_group(inst.pid, libc::SIGTERM);
        let deadline = Instant::now() + grace;
        loop {
            if !matches!(inst.child.lock().try_wait(), Ok(None)) {
                break;
            }
            if Instant::now() >= deadline {
                warn!(instance = id, "grace period elapsed, killing");
                break;
            }
            thread::sleep(Duration::from_millis(10));
        }
        self.shared.finish(&inst, InstanceState::Stopped, None);
    }

    pub fn metrics(&self, id: &str) -> Result<InstanceMetrics, RunnerError> {
        Ok(self.get(id)?.metrics())
    }

    pub fn health(&self, id: &str) -> Result<InstanceState, RunnerError> {
        Ok(self.get(id)?.state())
    }

    pub fn summary(&self, id: &str) -> Result<InstanceSummary, RunnerError> {
        Ok(self.get(id)?.summary())
    }

    pub fn instances(&self) -> Vec<InstanceSummary> {
        self.instances.read().values().map(|i| i.summary()).collect()
    }

    pub fn logs(&self, id: &str) -> Result<String, RunnerError> {
        let inst = self.get(id)?;
        Ok(String::from_utf8_lossy(&std::fs::read(&inst.log_path)?).into_owned())
    }

    /// Drops a terminal instance from the table.
    pub fn forget(&self, id: &str) {
        let mut instances = self.instances.write();
        if instances.get(id).is_some_and(|i| i.state().is_terminal()) {
            instances.remove(id);
        }
    }

    /// Stops every instance.
    pub fn shutdown(&self, grace: Duration) {
        let ids: Vec<String> = self.instances.read().keys().cloned().collect();
        thread::scope(|s| {
            for id in &ids {
                s.spawn(move || self.stop_instance(id, grace));
            }
        });
    }
}

impl Drop for Runner {
    fn drop(&mut self) {
        self.shutdown(Duration::from_millis(200));
    }
}

fn forward(inst: Arc<Instance>, sub: Arc<dyn BusSubscription>) {
    while inst.open.load(Ordering::SeqCst) {
        match sub.next_message(POLL) {
            Ok(Some(msg)) => {
                if !inst.send(&Frame::message(msg.stream, msg.payload)) {
                    break;
                }
            }
            Ok(None) => {}
            Err(_) => break,
        }
    }
}

fn monitor(shared: Arc<Shared>, inst: Arc<Instance>) {
    let period = (shared.config.liveness_period / 10).clamp(Duration::from_millis(10), Duration::from_millis(200));
    loop {
        {
            let status = inst.status.lock();
            if status.state.is_terminal() || status.stopping {
                return;
            }
        }
        let exited = match inst.child.lock().try_wait() {
            Ok(Some(status)) => Some(status.to_string()),
            Ok(None) => None,
            Err(e) => Some(e.to_string()),
        };
        if let Some(status) = exited {
            if !inst.status.lock().stopping {
                shared.finish(&inst, InstanceState::Failed, Some(format!("process exited: {status}")));
            }
            return;
        }
        thread::sleep(period);
    }
}

fn read_loop(shared: Arc<Shared>, inst: Arc<Instance>, mut reader: BufReader<UnixStream>) {
    let threshold = shared.config.parse_failure_threshold.max(1);
    loop {
        match read_body(&mut reader) {
            Ok(body) => match Frame::from_body(&body) {
                Ok(frame) => {
                    inst.parse_failures.store(0, Ordering::Relaxed);
                    inst.recover();
                    handle_frame(&shared, &inst, frame);
                }
                Err(e) => {
                    let n = inst.parse_failures.fetch_add(1, Ordering::Relaxed) + 1;
                    inst.send(&Frame::error(e.to_string()));
                    if n >= threshold {
                        inst.mark_unhealthy(PARSE_REASON);
                    }
                }
            },
            Err(FrameError::TooLarge(n)) => {
                inst.send(&Frame::error(format!("frame of {n} bytes exceeds the limit")));
                inst.mark_unhealthy("oversized frame");
                if let Some(conn) = inst.conn.lock().take() {
                    let _ = conn.shutdown(std::net::Shutdown::Both);
                }
                return;
            }
            Err(_) => {
                inst.mark_unhealthy("connection closed");
                return;
            }
        }
    }
}

fn handle_frame(shared: &Shared, inst: &Instance, frame: Frame) {
    match frame.kind {
        FrameType::Emit => {
            let Some(output) = &inst.spec.output else {
                inst.send(&Frame::error(NO_OUTPUT_REASON));
                return;
            };
            let _gate = inst.publish_gate.lock();
            if !inst.open.load(Ordering::SeqCst) {
                return;
            }
            match shared.bus.publish(&inst.token, output, frame.payload) {
                Ok(_) => {
                    inst.published.fetch_add(1, Ordering::Relaxed);
                }
                Err(e) => {
                    inst.send(&Frame::error(e.to_string()));
                }
            }
        }
        kind if kind.is_db_request() => {
            let reply = match handle_db(shared, inst, kind, &frame.payload) {
                Ok(payload) => Frame::ack(payload),
                Err(reason) => Frame::error(reason),
            };
            inst.send(&reply);
        }
        other => {
            inst.send(&Frame::error(format!("unexpected frame type `{other}`")));
        }
    }
}

fn handle_db(shared: &Shared, inst: &Instance, kind: FrameType, payload: &Document) -> Result<Document, String> {
    let store = shared.store.as_ref().ok_or("no state store available")?;
    let db = payload.get("db").and_then(Value::as_str).ok_or("missing `db`")?;
    if !inst.spec.databases.iter().any(|d| d == db) {
        return Err(format!("database `{db}` is not attached to this instance"));
    }
    let key = || payload.get("key").and_then(Value::as_str).ok_or("missing `key`");
    let reply = match kind {
        FrameType::DbPut => {
            let value = match payload.get("value") {
                Some(Value::Object(v)) => v.clone(),
                _ => return Err("`value` must be a map".into()),
            };
            store.kv_put(db, key()?, value).map_err(|e| e.to_string())?;
            json!({})
        }
        FrameType::DbGet => {
            let value = store.kv_get(db, key()?).map_err(|e| e.to_string())?;
            json!({ "value": value })
        }
        FrameType::DbDelete => {
            store.kv_delete(db, key()?).map_err(|e| e.to_string())?;
            json!({})
        }
        FrameType::DbScan => {
            let prefix = payload.get("prefix").and_then(Value::as_str).unwrap_or("");
            let entries: Vec<Value> = store
                .kv_scan(db, prefix)
                .map_err(|e| e.to_string())?
                .into_iter()
                .map(|(k, v)| json!({"key": k, "value": v}))
                .collect();
            json!({ "entries": entries })
        }
        _ => unreachable!("only db frames reach here"),
    };
    match reply {
        Value::Object(map) => Ok(map),
        _ => unreachable!(),
    }
}
