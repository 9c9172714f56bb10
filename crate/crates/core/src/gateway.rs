//! Newline-delimited JSON gateway over the service bus.
//!
//! Each line a client sends is one request frame
//! `{"id": "..", "op": "..", "params": {..}}`. Each request gets exactly one
//! reply `{"id": "..", "ok": true, "data": ..}` or
//! `{"id": "..", "ok": false, "error": {"code": "..", "detail": ".."}}`.
//! Frames that cannot be read as a request are answered with `BadFrame`,
//! echoing the id when one could be recovered and `null` otherwise.
//!
//! `series.stream` and `alerts.stream` open a stream. After the ok reply,
//! each event arrives as `{"id": <subscribe id>, "stream": true, "data": ..}`.
//! Streams close when the session ends.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::apps::{comfort, security};
use crate::bus::{Bus, FaultInfo, Subscription};
use crate::platform::Platform;
use crate::types::{ReadingEvent, SensorKind};

/// Ticks a gateway request may stay outstanding on the bus.
pub const REQUEST_TICKS: u64 = 600;
pub const DEFAULT_WALL_CAP: Duration = Duration::from_secs(30);

pub const OPS: [&str; 9] = [
    "series.query",
    "series.stream",
    "alerts.stream",
    "occupancy.get",
    "relay.set",
    "security.arm",
    "security.disarm",
    "feedback.submit",
    "report.energy",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireError {
    pub code: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireReply {
    pub id: Option<String>,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub stream: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<WireError>,
}

impl WireReply {
    fn ok(id: &str, data: Value) -> WireReply {
        WireReply { id: Some(id.to_string()), ok: true, stream: false, data: Some(data), error: None }
    }

    fn err(id: Option<&str>, code: &str, detail: impl Into<String>) -> WireReply {
        WireReply {
            id: id.map(str::to_string),
            ok: false,
            stream: false,
            data: None,
            error: Some(WireError { code: code.to_string(), detail: detail.into() }),
        }
    }

    fn event(id: &str, data: Value) -> WireReply {
        WireReply { id: Some(id.to_string()), ok: true, stream: true, data: Some(data), error: None }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("plain data")
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireRequest {
    id: String,
    op: String,
    #[serde(default)]
    params: Value,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct StreamFilter {
    #[serde(default)]
    nodes: Option<Vec<String>>,
    #[serde(default)]
    kinds: Option<Vec<SensorKind>>,
    #[serde(default)]
    room: Option<String>,
}

fn fault(id: &str, f: FaultInfo) -> WireReply {
    WireReply::err(Some(id), &format!("{:?}", f.code), f.detail)
}

/// One client's view of the gateway. Replies and stream events go to the
/// session's outgoing channel in the order they are produced.
pub struct Session {
    bus: Bus,
    out: Sender<String>,
    wall_cap: Duration,
    streams: Vec<Subscription>,
}

impl Session {
    pub fn new(bus: Bus) -> (Session, Receiver<String>) {
        Session::with_wall_cap(bus, DEFAULT_WALL_CAP)
    }

    pub fn with_wall_cap(bus: Bus, wall_cap: Duration) -> (Session, Receiver<String>) {
        let (out, rx) = mpsc::channel();
        (Session { bus, out, wall_cap, streams: Vec::new() }, rx)
    }

    pub fn open_streams(&self) -> usize {
        self.streams.len()
    }

    /// Handles one line and sends exactly one reply.
    pub fn handle_line(&mut self, line: &str) {
        if let Some(reply) = self.dispatch(line) {
            let _ = self.out.send(reply.to_line());
        }
    }

    /// `None` when the reply was already sent.
    fn dispatch(&mut self, line: &str) -> Option<WireReply> {
        let raw: Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => return Some(WireReply::err(None, "BadFrame", e.to_string())),
        };
        let echo = raw.get("id").and_then(Value::as_str).map(str::to_string);
        let req: WireRequest = match serde_json::from_value(raw) {
            Ok(r) => r,
            Err(e) => return Some(WireReply::err(echo.as_deref(), "BadFrame", e.to_string())),
        };
        let id = req.id.as_str();
        let p = req.params;
        let reply = match req.op.as_str() {
            "series.query" => self.forward(id, "store", "query", p),
            "occupancy.get" => self.forward(id, "occupancy", "get", p),
            "relay.set" => self.forward(id, "hub", "set_relay", p),
            "security.arm" => self.forward(id, security::SERVICE, "arm", p),
            "security.disarm" => self.forward(id, security::SERVICE, "disarm", p),
            "feedback.submit" => self.forward(id, comfort::SERVICE, "submit", p),
            "report.energy" => self.forward(id, "reports", "energy", p),
            "series.stream" => return self.open_series(id, p),
            "alerts.stream" => return self.open_alerts(id, p),
            op => WireReply::err(Some(id), "UnknownOp", format!("unknown op '{op}'")),
        };
        Some(reply)
    }

    fn forward(&self, id: &str, service: &str, op: &str, params: Value) -> WireReply {
        let params = if params.is_null() { json!({}) } else { params };
        let ticket = match self.bus.request(service, op, params, REQUEST_TICKS) {
            Ok(t) => t,
            Err(e) => return WireReply::err(Some(id), "Internal", e.to_string()),
        };
        match self.bus.wait(&ticket, self.wall_cap) {
            Some(reply) => match reply.result {
                Ok(data) => WireReply::ok(id, data),
                Err(f) => fault(id, f),
            },
            None => {
                self.bus.abandon(ticket);
                WireReply::err(Some(id), "Timeout", "no reply within the gateway wait cap")
            }
        }
    }

    fn filter(id: &str, params: Value) -> Result<StreamFilter, WireReply> {
        if params.is_null() {
            return Ok(StreamFilter::default());
        }
        serde_json::from_value(params).map_err(|e| WireReply::err(Some(id), "BadParams", e.to_string()))
    }

    fn open_series(&mut self, id: &str, params: Value) -> Option<WireReply> {
        let f = match Session::filter(id, params) {
            Ok(f) => f,
            Err(r) => return Some(r),
        };
        // Reply first so the ok precedes any event on this stream.
        let _ = self.out.send(WireReply::ok(id, json!({ "stream": "series" })).to_line());
        let out = self.out.clone();
        let sid = id.to_string();
        let sub = self.bus.subscribe("readings.*", move |_, env| {
            let Ok(ev) = serde_json::from_value::<ReadingEvent>(env.payload.clone()) else { return };
            let r = &ev.reading;
            if f.nodes.as_ref().is_some_and(|n| !n.contains(&r.node_id))
                || f.kinds.as_ref().is_some_and(|k| !k.contains(&r.kind))
                || f.room.as_ref().is_some_and(|room| ev.room.as_ref() != Some(room))
            {
                return;
            }
            let _ = out.send(WireReply::event(&sid, env.payload.clone()).to_line());
        });
        self.streams.push(sub);
        None
    }

    fn open_alerts(&mut self, id: &str, params: Value) -> Option<WireReply> {
        let f = match Session::filter(id, params) {
            Ok(f) => f,
            Err(r) => return Some(r),
        };
        let _ = self.out.send(WireReply::ok(id, json!({ "stream": "alerts" })).to_line());
        let out = self.out.clone();
        let sid = id.to_string();
        let sub = self.bus.subscribe(security::ALERT_TOPIC, move |_, env| {
            if let Some(room) = &f.room {
                if env.payload.get("room_id").and_then(Value::as_str) != Some(room) {
                    return;
                }
            }
            let _ = out.send(WireReply::event(&sid, env.payload.clone()).to_line());
        });
        self.streams.push(sub);
        None
    }
}

/// Serves sessions over TCP, one thread per client, until dropped.
pub struct Server {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl Server {
    pub fn start(listener: TcpListener, bus: Bus) -> std::io::Result<Server> {
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let accept = thread::spawn(move || {
            while !flag.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let bus = bus.clone();
                        thread::spawn(move || {
                            let _ = serve_client(stream, bus);
                        });
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(10)),
                    Err(_) => break,
                }
            }
        });
        Ok(Server { addr, stop, accept: Some(accept) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(&self) {
        self.stop.store(true, Ordering::Relaxed);
    }

    pub fn join(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
    }
}

fn serve_client(stream: TcpStream, bus: Bus) -> std::io::Result<()> {
    stream.set_nonblocking(false)?;
    let mut writer = stream.try_clone()?;
    let (mut session, rx) = Session::new(bus);
    let pump = thread::spawn(move || {
        for line in rx {
            if writeln!(writer, "{line}").and_then(|_| writer.flush()).is_err() {
                break;
            }
        }
    });
    for line in BufReader::new(stream).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        session.handle_line(&line);
    }
    drop(session);
    let _ = pump.join();
    Ok(())
}

/// Advances `platform` one tick every `tick_wall` until `stop` is set or
/// `max_ticks` have run. A zero `tick_wall` runs as fast as possible.
pub fn spawn_driver(
    platform: Arc<Mutex<Platform>>,
    tick_wall: Duration,
    max_ticks: Option<u64>,
    stop: Arc<AtomicBool>,
) -> JoinHandle<u64> {
    thread::spawn(move || {
        let mut n = 0u64;
        while !stop.load(Ordering::Relaxed) && max_ticks.is_none_or(|m| n < m) {
            platform.lock().unwrap_or_else(|e| e.into_inner()).step();
            n += 1;
            if !tick_wall.is_zero() {
                thread::sleep(tick_wall);
            }
        }
        n
    })
}
