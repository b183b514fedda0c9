//! TCP access to a [`Broker`] for runners on other nodes.
//!
//! Uses the same framing as the runner protocol (4-byte big-endian length,
//! JSON body). A connection starts with a `connect` frame carrying the
//! instance id and token secret; every later request is checked against that
//! token. Revoking the token closes the connection.

use std::collections::HashMap;
use std::io::{self, BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use crossbeam_channel::{Receiver, Sender};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tracing::debug;

use super::{AccessToken, Broker, BrokerError, Message, Subscription};
use crate::frame::{decode_body, encode_body, read_body, write_body, FrameError};
use crate::value::Document;

const POLL: Duration = Duration::from_millis(200);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Wire {
    Connect {
        instance_id: String,
        secret: String,
    },
    Publish {
        id: u64,
        stream: String,
        payload: Document,
    },
    Subscribe {
        id: u64,
        stream: String,
        group: String,
    },
    Unsubscribe {
        sid: u64,
    },
    Ack {
        id: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seq: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sid: Option<u64>,
    },
    Error {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<u64>,
        code: String,
        reason: String,
    },
    Message {
        sid: u64,
        message: Message,
    },
}

fn error_wire(id: Option<u64>, err: &BrokerError) -> Wire {
    let code = match err {
        BrokerError::Unauthorized => "unauthorized",
        BrokerError::NoSuchSubject(_) => "no_such_subject",
        BrokerError::Duplicate(_) => "duplicate",
        BrokerError::Busy(_) => "busy",
        BrokerError::Connection(_) => "connection",
    };
    let reason = match err {
        BrokerError::NoSuchSubject(s) | BrokerError::Duplicate(s) | BrokerError::Busy(s) => s.clone(),
        other => other.to_string(),
    };
    Wire::Error {
        id,
        code: code.to_string(),
        reason,
    }
}

fn wire_error(code: &str, reason: String) -> BrokerError {
    match code {
        "unauthorized" => BrokerError::Unauthorized,
        "no_such_subject" => BrokerError::NoSuchSubject(reason),
        "duplicate" => BrokerError::Duplicate(reason),
        "busy" => BrokerError::Busy(reason),
        _ => BrokerError::Connection(reason),
    }
}

fn send(writer: &Mutex<BufWriter<TcpStream>>, wire: &Wire) -> io::Result<()> {
    write_body(&mut *writer.lock(), &encode_body(wire))
}

/// Accepts broker connections on a TCP listener.
pub struct BrokerServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
}

impl BrokerServer {
    pub fn bind(broker: Broker, addr: impl ToSocketAddrs) -> io::Result<BrokerServer> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop_flag = stop.clone();
        thread::Builder::new()
            .name("broker-accept".into())
            .spawn(move || {
                while !stop_flag.load(Ordering::Relaxed) {
                    match listener.accept() {
                        Ok((stream, peer)) => {
                            let broker = broker.clone();
                            let stop = stop_flag.clone();
                            thread::spawn(move || {
                                if let Err(e) = serve_connection(broker, stream, stop) {
                                    debug!(%peer, "broker connection ended: {e}");
                                }
                            });
                        }
                        Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(20)),
                        Err(e) => {
                            debug!("accept failed: {e}");
                            thread::sleep(POLL);
                        }
                    }
                }
            })?;
        Ok(BrokerServer { addr, stop })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for BrokerServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
    }
}

fn serve_connection(broker: Broker, stream: TcpStream, stop: Arc<AtomicBool>) -> Result<(), FrameError> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let writer = Arc::new(Mutex::new(BufWriter::new(stream.try_clone()?)));
    let mut reader = BufReader::new(stream.try_clone()?);

    let token = match decode_body::<Wire>(&read_body(&mut reader)?)? {
        Wire::Connect { instance_id, secret } => match broker.authenticate(&instance_id, &secret) {
            Ok(token) => token,
            Err(err) => {
                send(&writer, &error_wire(Some(0), &err))?;
                stream.shutdown(Shutdown::Both)?;
                return Ok(());
            }
        },
        _ => {
            send(
                &writer,
                &error_wire(Some(0), &BrokerError::Connection("expected connect".into())),
            )?;
            return Ok(());
        }
    };
    send(&writer, &Wire::Ack { id: 0, seq: None, sid: None })?;

    let alive = Arc::new(AtomicBool::new(true));
    let subscriptions: Arc<Mutex<HashMap<u64, Arc<AtomicBool>>>> = Arc::default();
    let next_sid = AtomicU64::new(1);

    // Watchdog: sever the connection when the token is revoked.
    {
        let broker = broker.clone();
        let token = token.clone();
        let alive = alive.clone();
        let writer = writer.clone();
        let stream = stream.try_clone()?;
        thread::spawn(move || {
            while alive.load(Ordering::Relaxed) && !stop.load(Ordering::Relaxed) {
                if broker.authenticate(&token.instance_id, &token.secret).is_err() {
                    let _ = send(&writer, &error_wire(None, &BrokerError::Unauthorized));
                    break;
                }
                thread::sleep(POLL);
            }
            alive.store(false, Ordering::Relaxed);
            let _ = stream.shutdown(Shutdown::Both);
        });
    }

    let result = loop {
        let body = match read_body(&mut reader) {
            Ok(body) => body,
            Err(e) => break Err(e),
        };
        let request = match decode_body::<Wire>(&body) {
            Ok(r) => r,
            Err(e) => {
                send(&writer, &error_wire(None, &BrokerError::Connection(e.to_string())))?;
                continue;
            }
        };
        match request {
            Wire::Publish { id, stream, payload } => {
                let reply = match broker.publish(&token, &stream, payload) {
                    Ok(seq) => Wire::Ack {
                        id,
                        seq: Some(seq),
                        sid: None,
                    },
                    Err(e) => error_wire(Some(id), &e),
                };
                send(&writer, &reply)?;
            }
            Wire::Subscribe { id, stream, group } => match broker.subscribe(&token, &stream, &group) {
                Ok(sub) => {
                    let sid = next_sid.fetch_add(1, Ordering::Relaxed);
                    let active = Arc::new(AtomicBool::new(true));
                    subscriptions.lock().insert(sid, active.clone());
                    send(&writer, &Wire::Ack { id, seq: None, sid: Some(sid) })?;
                    let writer = writer.clone();
                    let alive = alive.clone();
                    thread::spawn(move || forward(sub, sid, writer, alive, active));
                }
                Err(e) => send(&writer, &error_wire(Some(id), &e))?,
            },
            Wire::Unsubscribe { sid } => {
                if let Some(active) = subscriptions.lock().remove(&sid) {
                    active.store(false, Ordering::Relaxed);
                }
            }
            other => {
                let reason = format!("unexpected frame {other:?}");
                send(&writer, &error_wire(None, &BrokerError::Connection(reason)))?;
            }
        }
    };
    alive.store(false, Ordering::Relaxed);
    match result {
        Err(FrameError::Closed) => Ok(()),
        other => other,
    }
}

fn forward(
    sub: Subscription,
    sid: u64,
    writer: Arc<Mutex<BufWriter<TcpStream>>>,
    alive: Arc<AtomicBool>,
    active: Arc<AtomicBool>,
) {
    while alive.load(Ordering::Relaxed) && active.load(Ordering::Relaxed) {
        match sub.next_message(POLL) {
            Ok(Some(message)) => {
                if send(&writer, &Wire::Message { sid, message }).is_err() {
                    break;
                }
            }
            Ok(None) => {}
            Err(_) => break,
        }
    }
}

type Pending = Arc<Mutex<HashMap<u64, Sender<Result<Wire, BrokerError>>>>>;

/// Client side of a broker connection, bound to one token.
pub struct RemoteSession {
    writer: Mutex<BufWriter<TcpStream>>,
    stream: TcpStream,
    pending: Pending,
    routes: Arc<Mutex<HashMap<u64, Sender<Message>>>>,
    next_id: AtomicU64,
    closed: Arc<AtomicBool>,
    timeout: Duration,
}

impl RemoteSession {
    pub fn connect(addr: impl ToSocketAddrs, token: &AccessToken) -> Result<RemoteSession, BrokerError> {
        let conn_err = |e: io::Error| BrokerError::Connection(e.to_string());
        let stream = TcpStream::connect(addr).map_err(conn_err)?;
        stream.set_nodelay(true).map_err(conn_err)?;
        let mut reader = BufReader::new(stream.try_clone().map_err(conn_err)?);
        let writer = Mutex::new(BufWriter::new(stream.try_clone().map_err(conn_err)?));
        send(
            &writer,
            &Wire::Connect {
                instance_id: token.instance_id.clone(),
                secret: token.secret.clone(),
            },
        )
        .map_err(conn_err)?;
        let reply = read_body(&mut reader)
            .and_then(|b| decode_body::<Wire>(&b))
            .map_err(|e| BrokerError::Connection(e.to_string()))?;
        match reply {
            Wire::Ack { id: 0, .. } => {}
            Wire::Error { code, reason, .. } => return Err(wire_error(&code, reason)),
            other => return Err(BrokerError::Connection(format!("unexpected reply {other:?}"))),
        }

        let pending: Pending = Arc::default();
        let routes: Arc<Mutex<HashMap<u64, Sender<Message>>>> = Arc::default();
        let closed = Arc::new(AtomicBool::new(false));
        {
            let pending = pending.clone();
            let routes = routes.clone();
            let closed = closed.clone();
            thread::spawn(move || {
                while let Ok(wire) = read_body(&mut reader).and_then(|b| decode_body::<Wire>(&b)) {
                    match wire {
                        Wire::Message { sid, message } => {
                            if let Some(tx) = routes.lock().get(&sid) {
                                let _ = tx.send(message);
                            }
                        }
                        Wire::Ack { id, .. } => {
                            if let Some(tx) = pending.lock().remove(&id) {
                                let _ = tx.send(Ok(wire));
                            }
                        }
                        Wire::Error { id: Some(id), code, reason } => {
                            if let Some(tx) = pending.lock().remove(&id) {
                                let _ = tx.send(Err(wire_error(&code, reason)));
                            }
                        }
                        Wire::Error { id: None, .. } => {}
                        _ => {}
                    }
                }
                closed.store(true, Ordering::Relaxed);
                pending.lock().clear();
                routes.lock().clear();
            });
        }

        Ok(RemoteSession {
            writer,
            stream,
            pending,
            routes,
            next_id: AtomicU64::new(1),
            closed,
            timeout: Duration::from_secs(10),
        })
    }

    fn request(&self, build: impl FnOnce(u64) -> Wire) -> Result<Wire, BrokerError> {
        if self.closed.load(Ordering::Relaxed) {
            return Err(BrokerError::Unauthorized);
        }
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = crossbeam_channel::bounded(1);
        self.pending.lock().insert(id, tx);
        send(&self.writer, &build(id)).map_err(|e| BrokerError::Connection(e.to_string()))?;
        match rx.recv_timeout(self.timeout) {
            Ok(reply) => reply,
            // The reader drops pending requests when the server severs the connection.
            Err(_) if self.closed.load(Ordering::Relaxed) => Err(BrokerError::Unauthorized),
            Err(_) => Err(BrokerError::Connection("request timed out".into())),
        }
    }

    pub fn publish(&self, stream: &str, payload: Document) -> Result<u64, BrokerError> {
        match self.request(|id| Wire::Publish {
            id,
            stream: stream.to_string(),
            payload,
        })? {
            Wire::Ack { seq: Some(seq), .. } => Ok(seq),
            other => Err(BrokerError::Connection(format!("unexpected reply {other:?}"))),
        }
    }

    pub fn subscribe(&self, stream: &str, group: &str) -> Result<RemoteSubscription, BrokerError> {
        let (tx, rx) = crossbeam_channel::unbounded();
        match self.request(|id| Wire::Subscribe {
            id,
            stream: stream.to_string(),
            group: group.to_string(),
        })? {
            Wire::Ack { sid: Some(sid), .. } => {
                self.routes.lock().insert(sid, tx);
                Ok(RemoteSubscription {
                    sid,
                    rx,
                    closed: self.closed.clone(),
                })
            }
            other => Err(BrokerError::Connection(format!("unexpected reply {other:?}"))),
        }
    }

    pub fn unsubscribe(&self, sub: RemoteSubscription) -> Result<(), BrokerError> {
        self.routes.lock().remove(&sub.sid);
        send(&self.writer, &Wire::Unsubscribe { sid: sub.sid }).map_err(|e| BrokerError::Connection(e.to_string()))
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::Relaxed)
    }
}

impl Drop for RemoteSession {
    fn drop(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

pub struct RemoteSubscription {
    sid: u64,
    rx: Receiver<Message>,
    closed: Arc<AtomicBool>,
}

impl RemoteSubscription {
    pub fn next_message(&self, timeout: Duration) -> Result<Option<Message>, BrokerError> {
        match self.rx.recv_timeout(timeout) {
            Ok(msg) => Ok(Some(msg)),
            Err(crossbeam_channel::RecvTimeoutError::Timeout) => Ok(None),
            Err(crossbeam_channel::RecvTimeoutError::Disconnected) => Err(BrokerError::Unauthorized),
        }
        .and_then(|m| match m {
            None if self.closed.load(Ordering::Relaxed) => Err(BrokerError::Unauthorized),
            m => Ok(m),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::doc;
    use serde_json::json;
    use std::time::Instant;

    fn setup() -> (Broker, BrokerServer) {
        let broker = Broker::default();
        broker.create_subject("camA").unwrap();
        broker.create_subject("faces").unwrap();
        let server = BrokerServer::bind(broker.clone(), "127.0.0.1:0").unwrap();
        (broker, server)
    }

    #[test]
    fn remote_publish_and_subscribe() {
        let (broker, server) = setup();
        let au = broker
            .issue_token("faces-0", Some("faces"), &["camA".to_string()])
            .unwrap();
        let session = RemoteSession::connect(server.local_addr(), &au).unwrap();
        let sub = session.subscribe("camA", "faces").unwrap();
        assert_eq!(broker.group_size("camA", "faces"), 1);

        let drv = broker.issue_token("camA-0", Some("camA"), &[]).unwrap();
        broker.publish(&drv, "camA", doc(json!({"f": 1}))).unwrap();
        let msg = sub.next_message(Duration::from_secs(5)).unwrap().unwrap();
        assert_eq!(msg.payload, doc(json!({"f": 1})));
        assert_eq!(msg.seq, 1);

        let local = broker.issue_token("gate", None, &["faces".to_string()]).unwrap();
        let local_sub = broker.subscribe(&local, "faces", "gate1").unwrap();
        assert_eq!(session.publish("faces", doc(json!({"n": 2}))), Ok(1));
        assert_eq!(
            local_sub.next_message(Duration::from_secs(5)).unwrap().unwrap().payload,
            doc(json!({"n": 2}))
        );
        assert_eq!(session.publish("camA", Document::new()), Err(BrokerError::Unauthorized));
        assert!(matches!(session.subscribe("faces", "x"), Err(BrokerError::Unauthorized)));
        session.unsubscribe(sub).unwrap();
        let deadline = Instant::now() + Duration::from_secs(5);
        while broker.group_size("camA", "faces") != 0 && Instant::now() < deadline {
            thread::sleep(Duration::from_millis(20));
        }
        assert_eq!(broker.group_size("camA", "faces"), 0);
    }

    #[test]
    fn bad_secret_is_refused() {
        let (broker, server) = setup();
        let mut tok = broker.issue_token("x", Some("faces"), &[]).unwrap();
        tok.secret = "f".repeat(32);
        assert!(matches!(
            RemoteSession::connect(server.local_addr(), &tok),
            Err(BrokerError::Unauthorized)
        ));
    }

    #[test]
    fn revocation_severs_connection() {
        let (broker, server) = setup();
        let tok = broker.issue_token("x", Some("faces"), &["camA".to_string()]).unwrap();
        let session = RemoteSession::connect(server.local_addr(), &tok).unwrap();
        let sub = session.subscribe("camA", "g").unwrap();
        broker.revoke_token("x");
        let deadline = Instant::now() + Duration::from_secs(5);
        while !session.is_closed() && Instant::now() < deadline {
            thread::sleep(Duration::from_millis(20));
        }
        assert!(session.is_closed());
        assert_eq!(session.publish("faces", Document::new()), Err(BrokerError::Unauthorized));
        assert_eq!(sub.next_message(Duration::from_millis(10)), Err(BrokerError::Unauthorized));
    }
}
