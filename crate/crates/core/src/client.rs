//! Worker-side session for the runner frame protocol.
//!
//! A business-logic process finds the runner through the `DATAX_SOCKET`
//! environment variable, receives its configuration in the first frame, then
//! reads input messages with [`Session::next`] and publishes with
//! [`Session::emit`]. The key-value methods reach the databases attached to
//! the instance.

use std::collections::VecDeque;
use std::io::{BufReader, BufWriter, Write};
use std::os::unix::net::UnixStream;
use std::path::Path;
use std::thread;
use std::time::Duration;

use crossbeam_channel::{Receiver, RecvTimeoutError};
use serde_json::json;

use crate::frame::{read_frame, write_frame, Frame, FrameError, FrameType};
use crate::value::{Document, Value};

pub const ENV_SOCKET: &str = "DATAX_SOCKET";
pub const ENV_INSTANCE_ID: &str = "DATAX_INSTANCE_ID";

/// Reason string the runner uses when an instance without an output emits.
pub const NO_OUTPUT_REASON: &str = "no output stream";

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("environment variable {0} is not set")]
    MissingEnv(&'static str),
    #[error("connection lost")]
    ConnectionLost,
    #[error("instance has no output stream")]
    NoOutput,
    #[error("runner error: {0}")]
    Runner(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub struct Session {
    instance_id: String,
    output: Option<String>,
    config: Document,
    writer: BufWriter<UnixStream>,
    inbound: Receiver<Result<Frame, String>>,
    pending: VecDeque<Frame>,
}

impl Session {
    pub fn from_env() -> Result<Session, ClientError> {
        let socket = std::env::var(ENV_SOCKET).map_err(|_| ClientError::MissingEnv(ENV_SOCKET))?;
        let id = std::env::var(ENV_INSTANCE_ID).unwrap_or_default();
        Session::connect(Path::new(&socket), id)
    }

    pub fn connect(socket: &Path, instance_id: impl Into<String>) -> Result<Session, ClientError> {
        let stream = UnixStream::connect(socket)?;
        let mut reader = BufReader::new(stream.try_clone()?);
        let first = read_frame(&mut reader).map_err(|e| match e {
            FrameError::Closed | FrameError::Io(_) => ClientError::ConnectionLost,
            other => ClientError::Protocol(other.to_string()),
        })?;
        if first.kind != FrameType::Config {
            return Err(ClientError::Protocol(format!("expected config frame, got {}", first.kind)));
        }

        let (tx, rx) = crossbeam_channel::unbounded();
        thread::spawn(move || loop {
            match read_frame(&mut reader) {
                Ok(frame) => {
                    if tx.send(Ok(frame)).is_err() {
                        break;
                    }
                }
                Err(e) if e.is_recoverable() => {
                    let _ = tx.send(Err(e.to_string()));
                }
                Err(_) => break,
            }
        });

        Ok(Session {
            instance_id: instance_id.into(),
            output: first.stream,
            config: first.payload,
            writer: BufWriter::new(stream),
            inbound: rx,
            pending: VecDeque::new(),
        })
    }

    pub fn instance_id(&self) -> &str {
        &self.instance_id
    }

    /// Output stream announced by the runner, if the instance has one.
    pub fn output(&self) -> Option<&str> {
        self.output.as_deref()
    }

    pub fn get_configuration(&self) -> &Document {
        &self.config
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<Option<Frame>, ClientError> {
        let received = match timeout {
            Some(t) => match self.inbound.recv_timeout(t) {
                Ok(r) => r,
                Err(RecvTimeoutError::Timeout) => return Ok(None),
                Err(RecvTimeoutError::Disconnected) => return Err(ClientError::ConnectionLost),
            },
            None => self.inbound.recv().map_err(|_| ClientError::ConnectionLost)?,
        };
        received.map(Some).map_err(ClientError::Protocol)
    }

    fn surface_error(frame: &Frame) -> ClientError {
        match frame.reason() {
            Some(NO_OUTPUT_REASON) => ClientError::NoOutput,
            Some(reason) => ClientError::Runner(reason.to_string()),
            None => ClientError::Runner("unspecified".into()),
        }
    }

    /// Blocks until the next input message arrives.
    #[allow(clippy::should_implement_trait)]
    pub fn next(&mut self) -> Result<(String, Document), ClientError> {
        loop {
            if let Some(msg) = self.next_timeout(Duration::from_secs(3600))? {
                return Ok(msg);
            }
        }
    }

    /// Like [`next`](Self::next) but gives up after `timeout`.
    pub fn next_timeout(&mut self, timeout: Duration) -> Result<Option<(String, Document)>, ClientError> {
        loop {
            let frame = match self.pending.pop_front() {
                Some(f) => f,
                None => match self.recv(Some(timeout))? {
                    Some(f) => f,
                    None => return Ok(None),
                },
            };
            match frame.kind {
                FrameType::Message => return Ok(Some((frame.stream.unwrap_or_default(), frame.payload))),
                FrameType::Error => return Err(Self::surface_error(&frame)),
                _ => continue,
            }
        }
    }

    fn send(&mut self, frame: &Frame) -> Result<(), ClientError> {
        write_frame(&mut self.writer, frame).map_err(|_| ClientError::ConnectionLost)?;
        self.writer.flush().map_err(|_| ClientError::ConnectionLost)
    }

    pub fn emit(&mut self, payload: Document) -> Result<(), ClientError> {
        self.send(&Frame::emit(payload))
    }

    /// Sends a key-value request and waits for its reply, queueing any
    /// message frames that arrive in between.
    fn db_request(&mut self, kind: FrameType, payload: Value) -> Result<Document, ClientError> {
        let payload = match payload {
            Value::Object(map) => map,
            _ => unreachable!("requests are objects"),
        };
        self.send(&Frame::new(kind, payload))?;
        loop {
            let frame = self.recv(None)?.ok_or(ClientError::ConnectionLost)?;
            match frame.kind {
                FrameType::Ack => return Ok(frame.payload),
                FrameType::Error => return Err(Self::surface_error(&frame)),
                _ => self.pending.push_back(frame),
            }
        }
    }

    pub fn db_put(&mut self, db: &str, key: &str, value: Document) -> Result<(), ClientError> {
        self.db_request(FrameType::DbPut, json!({"db": db, "key": key, "value": value}))
            .map(drop)
    }

    pub fn db_get(&mut self, db: &str, key: &str) -> Result<Option<Document>, ClientError> {
        let reply = self.db_request(FrameType::DbGet, json!({"db": db, "key": key}))?;
        match reply.get("value") {
            Some(Value::Object(v)) => Ok(Some(v.clone())),
            _ => Ok(None),
        }
    }

    pub fn db_delete(&mut self, db: &str, key: &str) -> Result<(), ClientError> {
        self.db_request(FrameType::DbDelete, json!({"db": db, "key": key}))
            .map(drop)
    }

    pub fn db_scan(&mut self, db: &str, prefix: &str) -> Result<Vec<(String, Document)>, ClientError> {
        let reply = self.db_request(FrameType::DbScan, json!({"db": db, "prefix": prefix}))?;
        let entries = reply
            .get("entries")
            .and_then(Value::as_array)
            .ok_or_else(|| ClientError::Protocol("scan reply without entries".into()))?;
        entries
            .iter()
            .map(|e| match (e.get("key").and_then(Value::as_str), e.get("value")) {
                (Some(k), Some(Value::Object(v))) => Ok((k.to_string(), v.clone())),
                _ => Err(ClientError::Protocol("malformed scan entry".into())),
            })
            .collect()
    }
}
