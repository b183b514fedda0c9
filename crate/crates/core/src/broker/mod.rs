//! In-process message bus.
//!
//! One subject per stream. Publishers and subscribers present an
//! [`AccessToken`] that names exactly the subjects they may use. Subscribers
//! join a queue group; every published message is delivered to one member of
//! each group on the subject, chosen round-robin. Each member owns a bounded
//! FIFO buffer; when it is full the oldest message is dropped and counted.

mod net;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use parking_lot::{Condvar, Mutex, RwLock};
use rand::RngCore;
use serde::{Deserialize, Serialize};

pub use net::{BrokerServer, RemoteSession, RemoteSubscription};

use crate::value::Document;

pub const DEFAULT_CAPACITY: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BrokerError {
    #[error("subject `{0}` already exists")]
    Duplicate(String),
    #[error("no such subject `{0}`")]
    NoSuchSubject(String),
    #[error("subject `{0}` has live subscriptions")]
    Busy(String),
    #[error("unauthorized")]
    Unauthorized,
    #[error("broker connection: {0}")]
    Connection(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub stream: String,
    pub seq: u64,
    pub ts: u64,
    pub payload: Document,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessToken {
    pub instance_id: String,
    pub publish: BTreeSet<String>,
    pub subscribe: BTreeSet<String>,
    pub secret: String,
}

impl AccessToken {
    pub fn may_publish(&self, subject: &str) -> bool {
        self.publish.contains(subject)
    }

    pub fn may_subscribe(&self, subject: &str) -> bool {
        self.subscribe.contains(subject)
    }
}

/// Counters of one subscription. `received == delivered + dropped + buffered`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubscriptionStats {
    pub received: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub buffered: u64,
    pub capacity: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrokerStats {
    pub published: u64,
    pub rejected_publishes: u64,
    pub rejected_subscribes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectInfo {
    pub name: String,
    pub capacity: usize,
    pub last_seq: u64,
    /// Queue group name and member count.
    pub groups: BTreeMap<String, usize>,
}

struct Member {
    id: u64,
    subject: String,
    group: String,
    instance_id: String,
    capacity: usize,
    queue: Mutex<MemberQueue>,
    ready: Condvar,
    received: AtomicU64,
    delivered: AtomicU64,
    dropped: AtomicU64,
}

struct MemberQueue {
    buf: VecDeque<Message>,
    closed: bool,
}

impl Member {
    fn push(&self, msg: Message) {
        let mut queue = self.queue.lock();
        self.received.fetch_add(1, Ordering::Relaxed);
        if queue.buf.len() >= self.capacity {
            queue.buf.pop_front();
            self.dropped.fetch_add(1, Ordering::Relaxed);
        }
        queue.buf.push_back(msg);
        drop(queue);
        self.ready.notify_one();
    }

    fn close(&self) {
        self.queue.lock().closed = true;
        self.ready.notify_all();
    }

    fn stats(&self) -> SubscriptionStats {
        let queue = self.queue.lock();
        SubscriptionStats {
            received: self.received.load(Ordering::Relaxed),
            delivered: self.delivered.load(Ordering::Relaxed),
            dropped: self.dropped.load(Ordering::Relaxed),
            buffered: queue.buf.len() as u64,
            capacity: self.capacity as u64,
        }
    }
}

#[derive(Default)]
struct Group {
    members: Vec<Arc<Member>>,
    cursor: usize,
}

struct Subject {
    capacity: usize,
    state: Mutex<SubjectState>,
}

#[derive(Default)]
struct SubjectState {
    seq: u64,
    groups: BTreeMap<String, Group>,
}

#[derive(Default)]
struct Auth {
    tokens: HashMap<String, AccessToken>,
    members: Mutex<HashMap<String, Vec<Weak<Member>>>>,
}

struct Inner {
    subjects: RwLock<HashMap<String, Arc<Subject>>>,
    auth: RwLock<Auth>,
    default_capacity: usize,
    next_member: AtomicU64,
    published: AtomicU64,
    rejected_publishes: AtomicU64,
    rejected_subscribes: AtomicU64,
}

/// Cloneable handle to a shared broker.
#[derive(Clone)]
pub struct Broker {
    inner: Arc<Inner>,
}

impl Default for Broker {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY)
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn new_secret() -> String {
    let mut bytes = [0u8; 16];
    rand::rng().fill_bytes(&mut bytes);
    hex::encode(bytes)
}

impl Broker {
    pub fn new(default_capacity: usize) -> Self {
        Broker {
            inner: Arc::new(Inner {
                subjects: RwLock::new(HashMap::new()),
                auth: RwLock::new(Auth::default()),
                default_capacity: default_capacity.max(1),
                next_member: AtomicU64::new(1),
                published: AtomicU64::new(0),
                rejected_publishes: AtomicU64::new(0),
                rejected_subscribes: AtomicU64::new(0),
            }),
        }
    }

    pub fn create_subject(&self, name: &str) -> Result<(), BrokerError> {
        self.create_subject_with_capacity(name, self.inner.default_capacity)
    }

    pub fn create_subject_with_capacity(&self, name: &str, capacity: usize) -> Result<(), BrokerError> {
        let mut subjects = self.inner.subjects.write();
        if subjects.contains_key(name) {
            return Err(BrokerError::Duplicate(name.to_string()));
        }
        subjects.insert(
            name.to_string(),
            Arc::new(Subject {
                capacity: capacity.max(1),
                state: Mutex::new(SubjectState::default()),
            }),
        );
        Ok(())
    }

    pub fn destroy_subject(&self, name: &str) -> Result<(), BrokerError> {
        let mut subjects = self.inner.subjects.write();
        let subject = subjects
            .get(name)
            .ok_or_else(|| BrokerError::NoSuchSubject(name.to_string()))?;
        if subject.state.lock().groups.values().any(|g| !g.members.is_empty()) {
            return Err(BrokerError::Busy(name.to_string()));
        }
        subjects.remove(name);
        Ok(())
    }

    pub fn has_subject(&self, name: &str) -> bool {
        self.inner.subjects.read().contains_key(name)
    }

    pub fn subjects(&self) -> Vec<SubjectInfo> {
        let subjects = self.inner.subjects.read();
        let mut out: Vec<SubjectInfo> = subjects
            .iter()
            .map(|(name, subject)| {
                let state = subject.state.lock();
                SubjectInfo {
                    name: name.clone(),
                    capacity: subject.capacity,
                    last_seq: state.seq,
                    groups: state
                        .groups
                        .iter()
                        .map(|(g, group)| (g.clone(), group.members.len()))
                        .collect(),
                }
            })
            .collect();
        out.sort_by(|a, b| a.name.cmp(&b.name));
        out
    }

    fn subject(&self, name: &str) -> Result<Arc<Subject>, BrokerError> {
        self.inner
            .subjects
            .read()
            .get(name)
            .cloned()
            .ok_or_else(|| BrokerError::NoSuchSubject(name.to_string()))
    }

    /// Issues a token for `instance_id`, replacing (and revoking) any
    /// previous one.
    pub fn issue_token(
        &self,
        instance_id: &str,
        publish: Option<&str>,
        subscribe: &[String],
    ) -> Result<AccessToken, BrokerError> {
        {
            let subjects = self.inner.subjects.read();
            for name in publish.into_iter().chain(subscribe.iter().map(String::as_str)) {
                if !subjects.contains_key(name) {
                    return Err(BrokerError::NoSuchSubject(name.to_string()));
                }
            }
        }
        self.revoke_token(instance_id);
        let token = AccessToken {
            instance_id: instance_id.to_string(),
            publish: publish.into_iter().map(str::to_string).collect(),
            subscribe: subscribe.iter().cloned().collect(),
            secret: new_secret(),
        };
        self.inner
            .auth
            .write()
            .tokens
            .insert(instance_id.to_string(), token.clone());
        Ok(token)
    }

    /// Invalidates the instance's token and closes its subscriptions.
    pub fn revoke_token(&self, instance_id: &str) {
        let members = {
            let mut auth = self.inner.auth.write();
            auth.tokens.remove(instance_id);
            let members = auth.members.get_mut().remove(instance_id);
            members.unwrap_or_default()
        };
        for member in members.iter().filter_map(Weak::upgrade) {
            self.detach(&member);
        }
    }

    /// Looks up the token a remote peer presents as `(instance_id, secret)`.
    pub fn authenticate(&self, instance_id: &str, secret: &str) -> Result<AccessToken, BrokerError> {
        match self.inner.auth.read().tokens.get(instance_id) {
            Some(token) if token.secret == secret => Ok(token.clone()),
            _ => Err(BrokerError::Unauthorized),
        }
    }

    fn is_current(auth: &Auth, token: &AccessToken) -> bool {
        matches!(auth.tokens.get(&token.instance_id), Some(t) if t.secret == token.secret)
    }

    pub fn publish(&self, token: &AccessToken, subject: &str, payload: Document) -> Result<u64, BrokerError> {
        let auth = self.inner.auth.read();
        if !Self::is_current(&auth, token) || !token.may_publish(subject) {
            self.inner.rejected_publishes.fetch_add(1, Ordering::Relaxed);
            return Err(BrokerError::Unauthorized);
        }
        let subject_ref = self.subject(subject)?;
        let mut state = subject_ref.state.lock();
        state.seq += 1;
        let msg = Message {
            stream: subject.to_string(),
            seq: state.seq,
            ts: now_ms(),
            payload,
        };
        for group in state.groups.values_mut() {
            if group.members.is_empty() {
                continue;
            }
            let index = group.cursor % group.members.len();
            group.cursor = index + 1;
            group.members[index].push(msg.clone());
        }
        let seq = state.seq;
        drop(state);
        drop(auth);
        self.inner.published.fetch_add(1, Ordering::Relaxed);
        Ok(seq)
    }

    pub fn subscribe(&self, token: &AccessToken, subject: &str, group: &str) -> Result<Subscription, BrokerError> {
        let auth = self.inner.auth.read();
        if !Self::is_current(&auth, token) || !token.may_subscribe(subject) {
            self.inner.rejected_subscribes.fetch_add(1, Ordering::Relaxed);
            return Err(BrokerError::Unauthorized);
        }
        let subject_ref = self.subject(subject)?;
        let member = Arc::new(Member {
            id: self.inner.next_member.fetch_add(1, Ordering::Relaxed),
            subject: subject.to_string(),
            group: group.to_string(),
            instance_id: token.instance_id.clone(),
            capacity: subject_ref.capacity,
            queue: Mutex::new(MemberQueue {
                buf: VecDeque::new(),
                closed: false,
            }),
            ready: Condvar::new(),
            received: AtomicU64::new(0),
            delivered: AtomicU64::new(0),
            dropped: AtomicU64::new(0),
        });
        subject_ref
            .state
            .lock()
            .groups
            .entry(group.to_string())
            .or_default()
            .members
            .push(member.clone());
        auth.members
            .lock()
            .entry(token.instance_id.clone())
            .or_default()
            .push(Arc::downgrade(&member));
        Ok(Subscription {
            member,
            broker: Arc::downgrade(&self.inner),
        })
    }

    /// Removes a member from its group and closes it.
    fn detach(&self, member: &Arc<Member>) {
        if let Ok(subject) = self.subject(&member.subject) {
            let mut state = subject.state.lock();
            if let Some(group) = state.groups.get_mut(&member.group) {
                group.members.retain(|m| m.id != member.id);
                if group.members.is_empty() {
                    state.groups.remove(&member.group);
                }
            }
        }
        member.close();
    }

    pub fn group_size(&self, subject: &str, group: &str) -> usize {
        self.subject(subject)
            .map(|s| s.state.lock().groups.get(group).map_or(0, |g| g.members.len()))
            .unwrap_or(0)
    }

    pub fn stats(&self) -> BrokerStats {
        BrokerStats {
            published: self.inner.published.load(Ordering::Relaxed),
            rejected_publishes: self.inner.rejected_publishes.load(Ordering::Relaxed),
            rejected_subscribes: self.inner.rejected_subscribes.load(Ordering::Relaxed),
        }
    }
}

/// A queue-group membership. Dropping it unsubscribes.
pub struct Subscription {
    member: Arc<Member>,
    broker: Weak<Inner>,
}

impl std::fmt::Debug for Subscription {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Subscription")
            .field("subject", &self.member.subject)
            .field("group", &self.member.group)
            .field("instance", &self.member.instance_id)
            .finish()
    }
}

impl Subscription {
    pub fn subject(&self) -> &str {
        &self.member.subject
    }

    pub fn group(&self) -> &str {
        &self.member.group
    }

    /// Pops the oldest buffered message, waiting up to `timeout`.
    /// Returns `Unauthorized` once the subscription's token was revoked.
    pub fn next_message(&self, timeout: Duration) -> Result<Option<Message>, BrokerError> {
        let deadline = Instant::now() + timeout;
        let mut queue = self.member.queue.lock();
        loop {
            if queue.closed {
                return Err(BrokerError::Unauthorized);
            }
            if let Some(msg) = queue.buf.pop_front() {
                self.member.delivered.fetch_add(1, Ordering::Relaxed);
                return Ok(Some(msg));
            }
            if self.member.ready.wait_until(&mut queue, deadline).timed_out() {
                // One last look: a message may have raced the timeout.
                if let Some(msg) = queue.buf.pop_front().filter(|_| !queue.closed) {
                    self.member.delivered.fetch_add(1, Ordering::Relaxed);
                    return Ok(Some(msg));
                }
                return Ok(None);
            }
        }
    }

    pub fn stats(&self) -> SubscriptionStats {
        self.member.stats()
    }

    pub fn is_closed(&self) -> bool {
        self.member.queue.lock().closed
    }

    pub fn unsubscribe(self) {}
}

impl Drop for Subscription {
    fn drop(&mut self) {
        if let Some(inner) = self.broker.upgrade() {
            Broker { inner }.detach(&self.member);
        }
    }
}
