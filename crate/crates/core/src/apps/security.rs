//! Door rules. An episode runs from a door opening to its closing; each
//! rule fires at most once per episode.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{decode, encode, AppError};
use crate::bus::{Bus, Envelope, Handled, Registration, ServiceDescriptor, Subscription};
use crate::occupancy::OccupancyEstimate;
use crate::types::{ReadingEvent, Timestamp, MINUTE_MS};

pub const SERVICE: &str = "security";
pub const ALERT_TOPIC: &str = "alerts";
pub const DEFAULT_LEFT_OPEN_MS: i64 = 5 * MINUTE_MS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AlertRule {
    DoorWhileEmpty,
    DoorLeftOpen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Severity {
    High,
    Medium,
}

impl AlertRule {
    pub fn severity(self) -> Severity {
        match self {
            AlertRule::DoorWhileEmpty => Severity::High,
            AlertRule::DoorLeftOpen => Severity::Medium,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alert {
    pub rule: AlertRule,
    pub severity: Severity,
    pub room_id: String,
    pub at: Timestamp,
    pub detail: String,
}

/// Highest-priority rule that holds and has not fired yet this episode.
pub fn evaluate_security(
    armed: bool,
    door_open: bool,
    count: u32,
    open_for_ms: i64,
    left_open_ms: i64,
    fired: &BTreeSet<AlertRule>,
) -> Option<AlertRule> {
    if !door_open {
        return None;
    }
    if armed && count == 0 && !fired.contains(&AlertRule::DoorWhileEmpty) {
        return Some(AlertRule::DoorWhileEmpty);
    }
    if open_for_ms >= left_open_ms && !fired.contains(&AlertRule::DoorLeftOpen) {
        return Some(AlertRule::DoorLeftOpen);
    }
    None
}

#[derive(Debug, Default, Clone)]
struct RoomWatch {
    armed: bool,
    count: u32,
    open: BTreeMap<String, Timestamp>,
    fired: BTreeSet<AlertRule>,
}

/// Per-room door state machine, independent of the bus.
#[derive(Debug, Clone)]
pub struct SecurityMonitor {
    left_open_ms: i64,
    rooms: BTreeMap<String, RoomWatch>,
    door_rooms: HashMap<String, String>,
}

impl SecurityMonitor {
    pub fn new(left_open_ms: i64) -> SecurityMonitor {
        SecurityMonitor { left_open_ms, rooms: BTreeMap::new(), door_rooms: HashMap::new() }
    }

    pub fn add_door(&mut self, door_node: &str, room_id: &str) {
        self.rooms.entry(room_id.to_string()).or_default();
        self.door_rooms.insert(door_node.to_string(), room_id.to_string());
    }

    pub fn is_armed(&self, room_id: &str) -> Option<bool> {
        self.rooms.get(room_id).map(|r| r.armed)
    }

    pub fn set_armed(&mut self, room_id: &str, armed: bool, at: Timestamp) -> Result<Vec<Alert>, String> {
        let room = self.rooms.get_mut(room_id).ok_or_else(|| format!("NoData: room '{room_id}' has no door sensor"))?;
        room.armed = armed;
        Ok(self.evaluate(room_id, at))
    }

    pub fn on_door(&mut self, door_node: &str, open: bool, at: Timestamp) -> Vec<Alert> {
        let Some(room_id) = self.door_rooms.get(door_node).cloned() else {
            return Vec::new();
        };
        let room = self.rooms.get_mut(&room_id).expect("door rooms exist");
        if open {
            if room.open.is_empty() {
                room.fired.clear();
            }
            room.open.entry(door_node.to_string()).or_insert(at);
            self.evaluate(&room_id, at)
        } else {
            let alerts = self.evaluate(&room_id, at);
            self.rooms.get_mut(&room_id).expect("door rooms exist").open.remove(door_node);
            alerts
        }
    }

    pub fn on_occupancy(&mut self, est: &OccupancyEstimate) -> Vec<Alert> {
        match self.rooms.get_mut(&est.room_id) {
            Some(room) => {
                room.count = est.count;
                self.evaluate(&est.room_id, est.at)
            }
            None => Vec::new(),
        }
    }

    /// Re-evaluates every room at `at`; catches doors that stay open.
    pub fn sweep(&mut self, at: Timestamp) -> Vec<Alert> {
        let ids: Vec<String> = self.rooms.keys().cloned().collect();
        ids.iter().flat_map(|id| self.evaluate(id, at)).collect()
    }

    fn evaluate(&mut self, room_id: &str, at: Timestamp) -> Vec<Alert> {
        let left_open_ms = self.left_open_ms;
        let room = self.rooms.get_mut(room_id).expect("caller checked");
        let oldest = room.open.iter().min_by_key(|(_, t)| **t).map(|(n, t)| (n.clone(), *t));
        let mut out = Vec::new();
        let Some((door, since)) = oldest else {
            return out;
        };
        while let Some(rule) = evaluate_security(room.armed, true, room.count, at.0 - since.0, left_open_ms, &room.fired) {
            room.fired.insert(rule);
            let detail = match rule {
                AlertRule::DoorWhileEmpty => format!("door {door} opened while room is empty and armed"),
                AlertRule::DoorLeftOpen => format!("door {door} open for {} s", (at.0 - since.0) / 1000),
            };
            out.push(Alert { rule, severity: rule.severity(), room_id: room_id.to_string(), at, detail });
        }
        out
    }
}

#[derive(Deserialize)]
struct ArmParams {
    room: String,
    #[serde(default)]
    at: Option<Timestamp>,
}

#[derive(Deserialize)]
struct SweepParams {
    at: Timestamp,
}

struct SecurityState {
    monitor: SecurityMonitor,
    log: Vec<Alert>,
    now: Timestamp,
}

impl SecurityState {
    fn emit(&mut self, bus: &Bus, alerts: Vec<Alert>) {
        for a in alerts {
            bus.publish(ALERT_TOPIC, encode(&a));
            self.log.push(a);
        }
    }
}

pub struct SecurityApp {
    _service: Registration,
    _subs: Vec<Subscription>,
}

impl SecurityApp {
    /// `doors` maps door node ids to their rooms.
    pub fn register(bus: &Bus, doors: &[(String, String)], left_open_ms: i64) -> Result<SecurityApp, AppError> {
        let mut monitor = SecurityMonitor::new(left_open_ms);
        for (node, room) in doors {
            monitor.add_door(node, room);
        }
        let shared = Arc::new(Mutex::new(SecurityState { monitor, log: Vec::new(), now: Timestamp(0) }));

        let st = Arc::clone(&shared);
        let door_sub = bus.subscribe("readings.door", move |bus, env| {
            let Ok(ev) = decode::<ReadingEvent>(&env.payload) else { return };
            let mut s = st.lock().expect("security state");
            s.now = s.now.max(ev.reading.at);
            let alerts = s.monitor.on_door(&ev.reading.node_id, ev.reading.value >= 0.5, ev.reading.at);
            s.emit(bus, alerts);
        });
        let st = Arc::clone(&shared);
        let occ_sub = bus.subscribe("occupancy.*", move |bus, env| {
            let Ok(est) = decode::<OccupancyEstimate>(&env.payload) else { return };
            let mut s = st.lock().expect("security state");
            s.now = s.now.max(est.at);
            let alerts = s.monitor.on_occupancy(&est);
            s.emit(bus, alerts);
        });
        let st = Arc::clone(&shared);
        let service = bus.register(
            ServiceDescriptor::new(SERVICE, ["arm", "disarm", "sweep", "alerts"]),
            move |bus, env: &Envelope| handle(bus, &mut st.lock().expect("security state"), env),
        )?;
        Ok(SecurityApp { _service: service, _subs: vec![door_sub, occ_sub] })
    }
}

fn handle(bus: &Bus, s: &mut SecurityState, env: &Envelope) -> Result<Handled, String> {
    match env.operation.as_str() {
        op @ ("arm" | "disarm") => {
            let p: ArmParams = decode(&env.payload)?;
            let at = p.at.unwrap_or(s.now);
            let alerts = s.monitor.set_armed(&p.room, op == "arm", at)?;
            s.emit(bus, alerts);
            Ok(Handled::Reply(json!({"room": p.room, "armed": op == "arm"})))
        }
        "sweep" => {
            let p: SweepParams = decode(&env.payload)?;
            s.now = s.now.max(p.at);
            let alerts = s.monitor.sweep(p.at);
            s.emit(bus, alerts);
            Ok(Handled::Reply(Value::Null))
        }
        "alerts" => Ok(Handled::Reply(encode(&s.log))),
        op => Err(format!("unsupported operation '{op}'")),
    }
}
