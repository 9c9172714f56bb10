//! In-process service bus.
//!
//! Named services register a handler for a fixed set of operations. Callers
//! reach them with one-way [`Bus::notify`], request-response
//! [`Bus::request`] with a timeout on the simulated clock, or topic
//! [`Bus::publish`]. Every service and every subscription owns a mailbox;
//! whichever thread enqueues into an idle mailbox drains it, so invocations
//! of one handler never overlap and a handler that calls back into its own
//! service gets queued behind itself instead of deadlocking.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock, Weak};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::types::{is_valid_id, Tick};

pub type Payload = Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MsgId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnvelopeKind {
    OneWay,
    Request,
    Response,
    Fault,
    Publish,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub msg_id: MsgId,
    pub correlation_id: Option<MsgId>,
    pub kind: EnvelopeKind,
    pub operation: String,
    pub topic: Option<String>,
    pub payload: Payload,
    pub at: Tick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FaultCode {
    ServiceNotFound,
    OperationNotFound,
    Timeout,
    HandlerFault,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{code:?}: {detail}")]
pub struct FaultInfo {
    pub code: FaultCode,
    pub detail: String,
}

impl FaultInfo {
    pub fn new(code: FaultCode, detail: impl Into<String>) -> FaultInfo {
        FaultInfo { code, detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceDescriptor {
    pub name: String,
    pub operations: BTreeSet<String>,
    pub registered_at: Tick,
}

impl ServiceDescriptor {
    pub fn new<I, S>(name: &str, operations: I) -> ServiceDescriptor
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ServiceDescriptor {
            name: name.to_string(),
            operations: operations.into_iter().map(Into::into).collect(),
            registered_at: Tick(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BusError {
    #[error("service '{0}' is already registered")]
    DuplicateName(String),
    #[error("invalid service name '{0}'")]
    InvalidName(String),
    #[error("service '{0}' declares no operations")]
    NoOperations(String),
    #[error("timeout must be positive")]
    ZeroTimeout,
}

/// What a service handler did with a request.
#[derive(Debug, Clone, PartialEq)]
pub enum Handled {
    Reply(Payload),
    /// The reply will come later through [`Bus::respond`].
    Pending,
}

/// Final outcome of one request.
#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub correlation_id: MsgId,
    pub at: Tick,
    pub result: Result<Payload, FaultInfo>,
}

impl Reply {
    pub fn envelope(&self, msg_id: MsgId, operation: &str) -> Envelope {
        let (kind, payload) = match &self.result {
            Ok(v) => (EnvelopeKind::Response, v.clone()),
            Err(f) => (EnvelopeKind::Fault, serde_json::to_value(f).expect("plain struct")),
        };
        Envelope {
            msg_id,
            correlation_id: Some(self.correlation_id),
            kind,
            operation: operation.to_string(),
            topic: None,
            payload,
            at: self.at,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[must_use = "an uncollected ticket keeps its outcome in memory"]
pub struct Ticket(pub MsgId);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BusMetrics {
    pub dropped_notifies: u64,
    pub late_replies: u64,
    pub handler_faults: u64,
    pub published: u64,
    pub delivered: u64,
}

type HandlerFn = dyn Fn(&Bus, &Envelope) -> Result<Handled, String> + Send + Sync;

struct Mailbox {
    id: u64,
    handler: Box<HandlerFn>,
    queue: Mutex<VecDeque<Envelope>>,
    draining: AtomicBool,
    live: AtomicBool,
    gate: RwLock<()>,
}

struct Service {
    desc: ServiceDescriptor,
    mailbox: Arc<Mailbox>,
}

struct SubscriptionEntry {
    pattern: String,
    mailbox: Arc<Mailbox>,
}

#[derive(Default)]
struct Requests {
    pending: HashMap<MsgId, Tick>,
    outcomes: HashMap<MsgId, Reply>,
}

#[derive(Default)]
struct Counters {
    dropped_notifies: AtomicU64,
    late_replies: AtomicU64,
    handler_faults: AtomicU64,
    published: AtomicU64,
    delivered: AtomicU64,
}

struct Inner {
    now: AtomicU64,
    next_id: AtomicU64,
    services: RwLock<BTreeMap<String, Service>>,
    subscriptions: RwLock<BTreeMap<u64, SubscriptionEntry>>,
    requests: Mutex<Requests>,
    resolved: Condvar,
    counters: Counters,
}

thread_local! {
    static ACTIVE: RefCell<Vec<u64>> = const { RefCell::new(Vec::new()) };
}

/// Cheaply cloneable handle to a shared bus.
#[derive(Clone)]
pub struct Bus {
    inner: Arc<Inner>,
}

impl Default for Bus {
    fn default() -> Self {
        Bus::new()
    }
}

/// `*` matches every topic, `a.*` matches `a.x` and `a.x.y`, anything else
/// matches exactly.
pub fn topic_matches(pattern: &str, topic: &str) -> bool {
    match pattern.strip_suffix('*') {
        Some("") => true,
        Some(prefix) if prefix.ends_with('.') => topic.starts_with(prefix) && topic.len() > prefix.len(),
        _ => pattern == topic,
    }
}

impl Bus {
    pub fn new() -> Bus {
        Bus {
            inner: Arc::new(Inner {
                now: AtomicU64::new(0),
                next_id: AtomicU64::new(0),
                services: RwLock::new(BTreeMap::new()),
                subscriptions: RwLock::new(BTreeMap::new()),
                requests: Mutex::new(Requests::default()),
                resolved: Condvar::new(),
                counters: Counters::default(),
            }),
        }
    }

    pub fn now(&self) -> Tick {
        Tick(self.inner.now.load(Ordering::SeqCst))
    }

    fn next_id(&self) -> u64 {
        self.inner.next_id.fetch_add(1, Ordering::SeqCst)
    }

    pub fn metrics(&self) -> BusMetrics {
        let c = &self.inner.counters;
        BusMetrics {
            dropped_notifies: c.dropped_notifies.load(Ordering::SeqCst),
            late_replies: c.late_replies.load(Ordering::SeqCst),
            handler_faults: c.handler_faults.load(Ordering::SeqCst),
            published: c.published.load(Ordering::SeqCst),
            delivered: c.delivered.load(Ordering::SeqCst),
        }
    }

    pub fn descriptor(&self, name: &str) -> Option<ServiceDescriptor> {
        self.inner.services.read().expect("lock").get(name).map(|s| s.desc.clone())
    }

    pub fn service_names(&self) -> Vec<String> {
        self.inner.services.read().expect("lock").keys().cloned().collect()
    }

    fn mailbox<F>(&self, handler: F) -> Arc<Mailbox>
    where
        F: Fn(&Bus, &Envelope) -> Result<Handled, String> + Send + Sync + 'static,
    {
        Arc::new(Mailbox {
            id: self.next_id(),
            handler: Box::new(handler),
            queue: Mutex::new(VecDeque::new()),
            draining: AtomicBool::new(false),
            live: AtomicBool::new(true),
            gate: RwLock::new(()),
        })
    }

    pub fn register<F>(&self, mut desc: ServiceDescriptor, handler: F) -> Result<Registration, BusError>
    where
        F: Fn(&Bus, &Envelope) -> Result<Handled, String> + Send + Sync + 'static,
    {
        if !is_valid_id(&desc.name) {
            return Err(BusError::InvalidName(desc.name));
        }
        if desc.operations.is_empty() {
            return Err(BusError::NoOperations(desc.name));
        }
        let mut services = self.inner.services.write().expect("lock");
        if services.contains_key(&desc.name) {
            return Err(BusError::DuplicateName(desc.name));
        }
        desc.registered_at = self.now();
        let mailbox = self.mailbox(handler);
        let name = desc.name.clone();
        services.insert(name.clone(), Service { desc, mailbox: Arc::clone(&mailbox) });
        Ok(Registration { bus: Arc::downgrade(&self.inner), name, mailbox })
    }

    pub fn subscribe<F>(&self, pattern: &str, handler: F) -> Subscription
    where
        F: Fn(&Bus, &Envelope) + Send + Sync + 'static,
    {
        let mailbox = self.mailbox(move |bus, env| {
            handler(bus, env);
            Ok(Handled::Reply(Value::Null))
        });
        let id = mailbox.id;
        self.inner
            .subscriptions
            .write()
            .expect("lock")
            .insert(id, SubscriptionEntry { pattern: pattern.to_string(), mailbox: Arc::clone(&mailbox) });
        Subscription { bus: Arc::downgrade(&self.inner), id, mailbox }
    }

    fn envelope(&self, kind: EnvelopeKind, operation: &str, topic: Option<&str>, payload: Payload) -> Envelope {
        Envelope {
            msg_id: MsgId(self.next_id()),
            correlation_id: None,
            kind,
            operation: operation.to_string(),
            topic: topic.map(str::to_string),
            payload,
            at: self.now(),
        }
    }

    /// Resolves `service` and checks it declares `operation`.
    fn route(&self, service: &str, operation: &str) -> Result<Arc<Mailbox>, FaultInfo> {
        let services = self.inner.services.read().expect("lock");
        let svc = services
            .get(service)
            .ok_or_else(|| FaultInfo::new(FaultCode::ServiceNotFound, format!("no service '{service}'")))?;
        if !svc.desc.operations.contains(operation) {
            return Err(FaultInfo::new(
                FaultCode::OperationNotFound,
                format!("service '{service}' has no operation '{operation}'"),
            ));
        }
        Ok(Arc::clone(&svc.mailbox))
    }

    /// Fire-and-forget. Unknown targets are counted in
    /// [`BusMetrics::dropped_notifies`].
    pub fn notify(&self, service: &str, operation: &str, payload: Payload) {
        match self.route(service, operation) {
            Ok(mb) => {
                let env = self.envelope(EnvelopeKind::OneWay, operation, None, payload);
                self.enqueue(&mb, env);
            }
            Err(_) => {
                self.inner.counters.dropped_notifies.fetch_add(1, Ordering::SeqCst);
            }
        }
    }

    /// Sends a request. Its single outcome is collected with
    /// [`Bus::take`], [`Bus::wait`] or by letting [`Bus::call`] do both.
    pub fn request(&self, service: &str, operation: &str, payload: Payload, timeout_ticks: u64) -> Result<Ticket, BusError> {
        if timeout_ticks == 0 {
            return Err(BusError::ZeroTimeout);
        }
        let env = self.envelope(EnvelopeKind::Request, operation, None, payload);
        let id = env.msg_id;
        self.inner.requests.lock().expect("lock").pending.insert(id, env.at.plus(timeout_ticks));
        match self.route(service, operation) {
            Ok(mb) => self.enqueue(&mb, env),
            Err(fault) => self.resolve(id, Err(fault)),
        }
        Ok(Ticket(id))
    }

    /// Completes a request whose handler returned [`Handled::Pending`]. A
    /// reply for a request that already timed out is counted and discarded.
    pub fn respond(&self, correlation_id: MsgId, result: Result<Payload, String>) {
        self.resolve(correlation_id, result.map_err(|d| FaultInfo::new(FaultCode::HandlerFault, d)));
    }

    fn resolve(&self, id: MsgId, result: Result<Payload, FaultInfo>) {
        let at = self.now();
        self.resolve_at(id, result, at);
    }

    fn resolve_at(&self, id: MsgId, result: Result<Payload, FaultInfo>, at: Tick) {
        let mut req = self.inner.requests.lock().expect("lock");
        if req.pending.remove(&id).is_some() {
            req.outcomes.insert(id, Reply { correlation_id: id, at, result });
            self.inner.resolved.notify_all();
        } else {
            self.inner.counters.late_replies.fetch_add(1, Ordering::SeqCst);
        }
    }

    /// Removes and returns the outcome if it is already known.
    pub fn take(&self, ticket: &Ticket) -> Option<Reply> {
        self.inner.requests.lock().expect("lock").outcomes.remove(&ticket.0)
    }

    /// Blocks until the outcome is known or `wall_cap` of real time passes.
    /// Timeouts still need someone to advance the simulated clock.
    pub fn wait(&self, ticket: &Ticket, wall_cap: Duration) -> Option<Reply> {
        let deadline = Instant::now() + wall_cap;
        let mut req = self.inner.requests.lock().expect("lock");
        loop {
            if let Some(r) = req.outcomes.remove(&ticket.0) {
                return Some(r);
            }
            let left = deadline.checked_duration_since(Instant::now())?;
            req = self.inner.resolved.wait_timeout(req, left).expect("lock").0;
        }
    }

    /// Forgets a request; any later outcome counts as a late reply.
    pub fn abandon(&self, ticket: Ticket) {
        let mut req = self.inner.requests.lock().expect("lock");
        req.pending.remove(&ticket.0);
        req.outcomes.remove(&ticket.0);
    }

    /// Request and collect, advancing the simulated clock one tick at a time
    /// while the outcome is outstanding. A zero timeout expires at once.
    pub fn call(&self, service: &str, operation: &str, payload: Payload, timeout_ticks: u64) -> Result<Payload, FaultInfo> {
        let Ok(ticket) = self.request(service, operation, payload, timeout_ticks) else {
            return Err(FaultInfo::new(FaultCode::Timeout, "zero timeout"));
        };
        loop {
            if let Some(r) = self.take(&ticket) {
                return r.result;
            }
            self.advance(1);
        }
    }

    /// Number of requests still waiting for an outcome.
    pub fn outstanding(&self) -> usize {
        self.inner.requests.lock().expect("lock").pending.len()
    }

    /// Delivers one copy to every subscription matching `topic` at the time
    /// of the call and returns how many there were.
    pub fn publish(&self, topic: &str, payload: Payload) -> usize {
        let targets: Vec<Arc<Mailbox>> = self
            .inner
            .subscriptions
            .read()
            .expect("lock")
            .values()
            .filter(|s| topic_matches(&s.pattern, topic))
            .map(|s| Arc::clone(&s.mailbox))
            .collect();
        self.inner.counters.published.fetch_add(1, Ordering::SeqCst);
        let env = self.envelope(EnvelopeKind::Publish, "publish", Some(topic), payload);
        for mb in &targets {
            self.enqueue(mb, Envelope { msg_id: MsgId(self.next_id()), ..env.clone() });
        }
        targets.len()
    }

    /// Moves the simulated clock forward, faulting every request whose
    /// deadline falls inside the window with `Timeout` stamped at that deadline.
    pub fn advance(&self, n_ticks: u64) {
        let start = self.inner.now.fetch_add(n_ticks, Ordering::SeqCst);
        let end = start + n_ticks;
        let mut expired: Vec<(Tick, MsgId)> = {
            let req = self.inner.requests.lock().expect("lock");
            req.pending.iter().filter(|(_, d)| d.0 <= end).map(|(id, d)| (*d, *id)).collect()
        };
        expired.sort();
        for (deadline, id) in expired {
            self.resolve_at(id, Err(FaultInfo::new(FaultCode::Timeout, format!("no reply by tick {}", deadline.0))), deadline);
        }
    }

    fn enqueue(&self, mb: &Arc<Mailbox>, env: Envelope) {
        mb.queue.lock().expect("lock").push_back(env);
        self.drain(mb);
    }

    fn drain(&self, mb: &Arc<Mailbox>) {
        loop {
            if mb.draining.compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst).is_err() {
                return;
            }
            loop {
                let next = mb.queue.lock().expect("lock").pop_front();
                match next {
                    Some(env) => self.invoke(mb, env),
                    None => break,
                }
            }
            mb.draining.store(false, Ordering::SeqCst);
            if mb.queue.lock().expect("lock").is_empty() {
                return;
            }
        }
    }

    fn invoke(&self, mb: &Mailbox, env: Envelope) {
        let _gate = mb.gate.read().unwrap_or_else(|e| e.into_inner());
        if !mb.live.load(Ordering::SeqCst) {
            match env.kind {
                EnvelopeKind::Request => {
                    self.resolve(env.msg_id, Err(FaultInfo::new(FaultCode::ServiceNotFound, "service unregistered")))
                }
                EnvelopeKind::OneWay => {
                    self.inner.counters.dropped_notifies.fetch_add(1, Ordering::SeqCst);
                }
                _ => {}
            }
            return;
        }
        ACTIVE.with(|a| a.borrow_mut().push(mb.id));
        let outcome = catch_unwind(AssertUnwindSafe(|| (mb.handler)(self, &env)));
        ACTIVE.with(|a| a.borrow_mut().pop());
        let outcome = match outcome {
            Ok(r) => r,
            Err(panic) => Err(panic_message(panic.as_ref())),
        };
        if env.kind == EnvelopeKind::Publish {
            self.inner.counters.delivered.fetch_add(1, Ordering::SeqCst);
        }
        match (env.kind, outcome) {
            (EnvelopeKind::Request, Ok(Handled::Reply(v))) => self.resolve(env.msg_id, Ok(v)),
            (EnvelopeKind::Request, Ok(Handled::Pending)) => {}
            (EnvelopeKind::Request, Err(detail)) => {
                self.inner.counters.handler_faults.fetch_add(1, Ordering::SeqCst);
                self.resolve(env.msg_id, Err(FaultInfo::new(FaultCode::HandlerFault, detail)));
            }
            (_, Err(_)) => {
                self.inner.counters.handler_faults.fetch_add(1, Ordering::SeqCst);
            }
            _ => {}
        }
    }
}

fn panic_message(p: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        format!("handler panicked: {s}")
    } else if let Some(s) = p.downcast_ref::<String>() {
        format!("handler panicked: {s}")
    } else {
        "handler panicked".to_string()
    }
}

/// Marks a mailbox dead and waits out an in-flight invocation, unless the
/// current thread is that invocation.
fn retire(mb: &Mailbox) {
    mb.live.store(false, Ordering::SeqCst);
    let reentrant = ACTIVE.with(|a| a.borrow().contains(&mb.id));
    if !reentrant {
        drop(mb.gate.write().unwrap_or_else(|e| e.into_inner()));
    }
}

/// Keeps a service registered; dropping it unregisters.
pub struct Registration {
    bus: Weak<Inner>,
    name: String,
    mailbox: Arc<Mailbox>,
}

impl Registration {
    pub fn name(&self) -> &str {
        &self.name
    }
}

impl Drop for Registration {
    fn drop(&mut self) {
        if let Some(inner) = self.bus.upgrade() {
            let mut services = inner.services.write().expect("lock");
            if services.get(&self.name).is_some_and(|s| Arc::ptr_eq(&s.mailbox, &self.mailbox)) {
                services.remove(&self.name);
            }
        }
        retire(&self.mailbox);
    }
}

/// Keeps a topic subscription alive; dropping it unsubscribes.
pub struct Subscription {
    bus: Weak<Inner>,
    id: u64,
    mailbox: Arc<Mailbox>,
}

impl Drop for Subscription {
    fn drop(&mut self) {
        if let Some(inner) = self.bus.upgrade() {
            inner.subscriptions.write().expect("lock").remove(&self.id);
        }
        retire(&self.mailbox);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use std::sync::atomic::AtomicUsize;

    fn echo(bus: &Bus, name: &str) -> Registration {
        bus.register(ServiceDescriptor::new(name, ["echo", "fail", "panic"]), |_, env| match env.operation.as_str() {
            "echo" => Ok(Handled::Reply(env.payload.clone())),
            "fail" => Err("nope".into()),
            _ => panic!("boom"),
        })
        .unwrap()
    }

    #[test]
    fn register_and_duplicate() {
        let bus = Bus::new();
        let _r = echo(&bus, "store");
        assert!(bus.descriptor("store").is_some());
        assert!(matches!(bus.register(ServiceDescriptor::new("store", ["x"]), |_, _| Ok(Handled::Pending)), Err(BusError::DuplicateName(_))));
        assert!(matches!(bus.register(ServiceDescriptor::new("empty", Vec::<String>::new()), |_, _| Ok(Handled::Pending)), Err(BusError::NoOperations(_))));
        assert!(matches!(bus.register(ServiceDescriptor::new("bad name", ["x"]), |_, _| Ok(Handled::Pending)), Err(BusError::InvalidName(_))));
    }

    #[test]
    fn request_reply_and_faults() {
        let bus = Bus::new();
        let _r = echo(&bus, "svc");
        assert_eq!(bus.call("svc", "echo", json!({"a": 1}), 5), Ok(json!({"a": 1})));
        assert_eq!(bus.call("nobody", "x", Value::Null, 5).unwrap_err().code, FaultCode::ServiceNotFound);
        assert_eq!(bus.call("svc", "zzz", Value::Null, 5).unwrap_err().code, FaultCode::OperationNotFound);
        let f = bus.call("svc", "fail", Value::Null, 5).unwrap_err();
        assert_eq!(f, FaultInfo::new(FaultCode::HandlerFault, "nope"));
        let f = bus.call("svc", "panic", Value::Null, 5).unwrap_err();
        assert_eq!(f.code, FaultCode::HandlerFault);
        // Still registered after faults.
        assert_eq!(bus.call("svc", "echo", json!(2), 5), Ok(json!(2)));
        assert_eq!(bus.metrics().handler_faults, 2);
        assert_eq!(bus.request("svc", "echo", Value::Null, 0), Err(BusError::ZeroTimeout));
    }

    #[test]
    fn timeout_fires_at_deadline() {
        let bus = Bus::new();
        let _r = bus.register(ServiceDescriptor::new("silent", ["x"]), |_, _| Ok(Handled::Pending)).unwrap();
        bus.advance(3);
        let t = bus.request("silent", "x", Value::Null, 20).unwrap();
        bus.advance(19);
        assert!(bus.take(&t).is_none());
        bus.advance(100);
        let r = bus.take(&t).unwrap();
        assert_eq!(r.at, Tick(23));
        assert_eq!(r.result.unwrap_err().code, FaultCode::Timeout);
        bus.respond(t.0, Ok(Value::Null));
        assert_eq!(bus.metrics().late_replies, 1);
        assert_eq!(bus.outstanding(), 0);
    }

    #[test]
    fn deferred_reply() {
        let bus = Bus::new();
        let parked = Arc::new(Mutex::new(Vec::new()));
        let p = Arc::clone(&parked);
        let _r = bus
            .register(ServiceDescriptor::new("later", ["x"]), move |_, env| {
                p.lock().unwrap().push(env.msg_id);
                Ok(Handled::Pending)
            })
            .unwrap();
        let t = bus.request("later", "x", Value::Null, 10).unwrap();
        assert!(bus.take(&t).is_none());
        let id = parked.lock().unwrap()[0];
        bus.respond(id, Ok(json!("done")));
        let r = bus.take(&t).unwrap();
        assert_eq!(r.correlation_id, t.0);
        assert_eq!(r.envelope(MsgId(999), "x").kind, EnvelopeKind::Response);
        assert_eq!(r.result, Ok(json!("done")));
    }

    #[test]
    fn drop_unregisters() {
        let bus = Bus::new();
        let r = echo(&bus, "svc");
        drop(r);
        assert_eq!(bus.call("svc", "echo", Value::Null, 5).unwrap_err().code, FaultCode::ServiceNotFound);
        let _again = echo(&bus, "svc");
    }

    #[test]
    fn notify_order_and_drops() {
        let bus = Bus::new();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let s = Arc::clone(&seen);
        let _r = bus
            .register(ServiceDescriptor::new("sink", ["put"]), move |_, env| {
                s.lock().unwrap().push(env.payload.as_u64().unwrap());
                Ok(Handled::Reply(Value::Null))
            })
            .unwrap();
        for i in 0..1000 {
            bus.notify("sink", "put", json!(i));
        }
        assert_eq!(*seen.lock().unwrap(), (0..1000).collect::<Vec<_>>());
        bus.notify("ghost", "put", Value::Null);
        bus.notify("sink", "nope", Value::Null);
        assert_eq!(bus.metrics().dropped_notifies, 2);
    }

    #[test]
    fn publish_snapshot_and_patterns() {
        let bus = Bus::new();
        assert_eq!(bus.publish("readings.temperature", Value::Null), 0);
        let hits = Arc::new(AtomicUsize::new(0));
        let mk = |pat: &str| {
            let h = Arc::clone(&hits);
            bus.subscribe(pat, move |_, _| {
                h.fetch_add(1, Ordering::SeqCst);
            })
        };
        let a = mk("readings.*");
        let _b = mk("readings.temperature");
        let _c = mk("*");
        let _d = mk("alerts.*");
        assert_eq!(bus.publish("readings.temperature", Value::Null), 3);
        assert_eq!(hits.load(Ordering::SeqCst), 3);
        drop(a);
        assert_eq!(bus.publish("readings.temperature", Value::Null), 2);
        assert_eq!(hits.load(Ordering::SeqCst), 5);
        assert!(!topic_matches("readings.*", "readings."));
        assert!(!topic_matches("readings.*", "readingsX"));
    }

    #[test]
    fn reentrant_call_to_self_is_queued() {
        let bus = Bus::new();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let s = Arc::clone(&seen);
        let _r = bus
            .register(ServiceDescriptor::new("loop", ["go"]), move |bus, env| {
                let n = env.payload.as_u64().unwrap();
                s.lock().unwrap().push(n);
                if n < 3 {
                    bus.notify("loop", "go", json!(n + 1));
                    // Not yet delivered: we are still inside the handler.
                    assert_eq!(s.lock().unwrap().last(), Some(&n));
                }
                Ok(Handled::Reply(Value::Null))
            })
            .unwrap();
        bus.notify("loop", "go", json!(0));
        assert_eq!(*seen.lock().unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn handler_can_drop_its_own_registration() {
        let bus = Bus::new();
        let slot: Arc<Mutex<Option<Registration>>> = Arc::new(Mutex::new(None));
        let s = Arc::clone(&slot);
        let reg = bus
            .register(ServiceDescriptor::new("once", ["x"]), move |_, _| {
                s.lock().unwrap().take();
                Ok(Handled::Reply(json!(1)))
            })
            .unwrap();
        *slot.lock().unwrap() = Some(reg);
        assert_eq!(bus.call("once", "x", Value::Null, 5), Ok(json!(1)));
        assert_eq!(bus.call("once", "x", Value::Null, 5).unwrap_err().code, FaultCode::ServiceNotFound);
    }

    #[test]
    fn concurrent_callers_are_serialized() {
        let bus = Bus::new();
        let inflight = Arc::new(AtomicUsize::new(0));
        let overlap = Arc::new(AtomicBool::new(false));
        let (i, o) = (Arc::clone(&inflight), Arc::clone(&overlap));
        let _r = bus
            .register(ServiceDescriptor::new("one", ["x"]), move |_, env| {
                if i.fetch_add(1, Ordering::SeqCst) > 0 {
                    o.store(true, Ordering::SeqCst);
                }
                std::thread::yield_now();
                i.fetch_sub(1, Ordering::SeqCst);
                Ok(Handled::Reply(env.payload.clone()))
            })
            .unwrap();
        let threads: Vec<_> = (0..8)
            .map(|t| {
                let bus = bus.clone();
                std::thread::spawn(move || {
                    let tickets: Vec<_> =
                        (0..200).map(|k| (k, bus.request("one", "x", json!([t, k]), 1000).unwrap())).collect();
                    for (k, tk) in tickets {
                        let r = bus.wait(&tk, Duration::from_secs(10)).unwrap();
                        assert_eq!(r.result, Ok(json!([t, k])));
                    }
                })
            })
            .collect();
        for th in threads {
            th.join().unwrap();
        }
        assert!(!overlap.load(Ordering::SeqCst));
        assert_eq!(bus.outstanding(), 0);
    }
}
