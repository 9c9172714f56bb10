//! Energy management: per-room thermostat with absence setback, and the
//! heater-energy accounting behind savings reports.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::thermostat::{occupancy_setback, thermostat_step, Mode, ThermostatConfig, ThermostatState};
use super::{decode, encode, AppError};
use crate::bus::{Bus, Envelope, Handled, Registration, ServiceDescriptor, Subscription};
use crate::occupancy::{Confidence, OccupancyEstimate};
use crate::types::{ActuationCommand, ReadingEvent, Timestamp, HOUR_MS};

pub const SERVICE: &str = "energy";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeatedRoom {
    pub room_id: String,
    pub heater_nodes: Vec<String>,
    pub temp_nodes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyConfig {
    pub thermostat: ThermostatConfig,
    pub rooms: Vec<HeatedRoom>,
}

/// Heater switch wanted by the thermostat, published on `actuation.<room>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActuationRequest {
    pub at: Timestamp,
    pub room_id: String,
    pub node_id: String,
    pub on: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavingsReport {
    pub room_id: String,
    pub from: Timestamp,
    pub to: Timestamp,
    pub baseline_kwh: f64,
    pub actual_kwh: f64,
    pub saved_kwh: f64,
    pub setback_hours: f64,
}

/// Milliseconds inside `[from, to)` during which at least one of `heaters`
/// was on, replaying `log` from an all-off start.
pub fn heater_on_ms(log: &[ActuationCommand], heaters: &BTreeSet<String>, from: Timestamp, to: Timestamp) -> i64 {
    let mut on: BTreeSet<&str> = BTreeSet::new();
    let mut since: Option<Timestamp> = None;
    let mut total = 0i64;
    let clip = |a: Timestamp, b: Timestamp| (b.0.min(to.0) - a.0.max(from.0)).max(0);
    for cmd in log.iter().filter(|c| heaters.contains(&c.node_id)) {
        if cmd.on {
            on.insert(&cmd.node_id);
        } else {
            on.remove(cmd.node_id.as_str());
        }
        match (since, on.is_empty()) {
            (None, false) => since = Some(cmd.at),
            (Some(start), true) => {
                total += clip(start, cmd.at);
                since = None;
            }
            _ => {}
        }
    }
    if let Some(start) = since {
        total += clip(start, to);
    }
    total
}

pub fn heater_kwh(on_ms: i64, heater_w: f64) -> f64 {
    on_ms as f64 / HOUR_MS as f64 * heater_w / 1000.0
}

/// Hours inside `[from, to)` spent in Setback, given mode transitions in
/// time order starting from Comfort.
pub fn setback_hours(modes: &[(Timestamp, Mode)], from: Timestamp, to: Timestamp) -> f64 {
    let mut ms = 0i64;
    let mut since: Option<Timestamp> = None;
    let clip = |a: Timestamp, b: Timestamp| (b.0.min(to.0) - a.0.max(from.0)).max(0);
    for &(at, mode) in modes {
        match (mode, since) {
            (Mode::Setback, None) => since = Some(at),
            (Mode::Comfort, Some(start)) => {
                ms += clip(start, at);
                since = None;
            }
            _ => {}
        }
    }
    if let Some(start) = since {
        ms += clip(start, to);
    }
    ms as f64 / HOUR_MS as f64
}

#[allow(clippy::too_many_arguments)]
pub fn savings_report(
    room_id: &str,
    heater_w: f64,
    heaters: &BTreeSet<String>,
    actual: &[ActuationCommand],
    baseline: &[ActuationCommand],
    modes: &[(Timestamp, Mode)],
    from: Timestamp,
    to: Timestamp,
) -> SavingsReport {
    let actual_kwh = heater_kwh(heater_on_ms(actual, heaters, from, to), heater_w);
    let baseline_kwh = heater_kwh(heater_on_ms(baseline, heaters, from, to), heater_w);
    SavingsReport {
        room_id: room_id.to_string(),
        from,
        to,
        baseline_kwh,
        actual_kwh,
        saved_kwh: baseline_kwh - actual_kwh,
        setback_hours: setback_hours(modes, from, to),
    }
}

struct RoomCtl {
    state: ThermostatState,
    heaters: Vec<String>,
    last: Option<OccupancyEstimate>,
    zero_since: Option<Timestamp>,
    modes: Vec<(Timestamp, Mode)>,
}

impl RoomCtl {
    fn estimate(&self, at: Timestamp) -> OccupancyEstimate {
        self.last.clone().unwrap_or(OccupancyEstimate {
            room_id: self.state.room_id.clone(),
            at,
            count: 0,
            known_macs: BTreeSet::new(),
            confidence: Confidence::High,
        })
    }

    fn apply_setback(&mut self, at: Timestamp, cfg: &ThermostatConfig) {
        let est = self.estimate(at);
        if est.count > 0 {
            self.zero_since = None;
        } else if self.zero_since.is_none() {
            self.zero_since = Some(at);
        }
        let absent_for = self.zero_since.map_or(0, |z| at.0 - z.0);
        let next = occupancy_setback(&self.state, &est, absent_for, cfg);
        if next.mode != self.state.mode {
            self.modes.push((at, next.mode));
        }
        self.state = next;
    }
}

struct EnergyState {
    cfg: ThermostatConfig,
    rooms: BTreeMap<String, RoomCtl>,
    temp_rooms: HashMap<String, String>,
    heater_rooms: HashMap<String, String>,
}

#[derive(Deserialize)]
struct SyncParams {
    node_id: String,
    on: bool,
}

#[derive(Deserialize)]
struct RoomParams {
    room: String,
}

/// Live registration of the energy app.
pub struct EnergyApp {
    _service: Registration,
    _subs: Vec<Subscription>,
}

impl EnergyApp {
    pub fn register(bus: &Bus, cfg: EnergyConfig) -> Result<EnergyApp, AppError> {
        let mut rooms = BTreeMap::new();
        let mut temp_rooms = HashMap::new();
        let mut heater_rooms = HashMap::new();
        for r in cfg.rooms.iter().filter(|r| !r.heater_nodes.is_empty()) {
            let state = ThermostatState::new(&r.room_id, &r.heater_nodes[0], &cfg.thermostat)?;
            for n in &r.temp_nodes {
                temp_rooms.insert(n.clone(), r.room_id.clone());
            }
            for n in &r.heater_nodes {
                heater_rooms.insert(n.clone(), r.room_id.clone());
            }
            rooms.insert(
                r.room_id.clone(),
                RoomCtl { state, heaters: r.heater_nodes.clone(), last: None, zero_since: None, modes: Vec::new() },
            );
        }
        let shared = Arc::new(Mutex::new(EnergyState { cfg: cfg.thermostat, rooms, temp_rooms, heater_rooms }));

        let st = Arc::clone(&shared);
        let temps = bus.subscribe("readings.temperature", move |bus, env| {
            let Ok(ev) = decode::<ReadingEvent>(&env.payload) else { return };
            let requests = on_temperature(&mut st.lock().expect("energy state"), &ev);
            for req in requests {
                bus.publish(&format!("actuation.{}", req.room_id), encode(&req));
            }
        });
        let st = Arc::clone(&shared);
        let occ = bus.subscribe("occupancy.*", move |_, env| {
            let Ok(est) = decode::<OccupancyEstimate>(&env.payload) else { return };
            let mut s = st.lock().expect("energy state");
            let cfg = s.cfg;
            if let Some(room) = s.rooms.get_mut(&est.room_id) {
                let at = est.at;
                room.last = Some(est);
                room.apply_setback(at, &cfg);
            }
        });
        let st = Arc::clone(&shared);
        let service = bus.register(
            ServiceDescriptor::new(SERVICE, ["status", "modes", "sync_relay"]),
            move |_, env: &Envelope| handle(&mut st.lock().expect("energy state"), env),
        )?;
        Ok(EnergyApp { _service: service, _subs: vec![temps, occ] })
    }
}

fn on_temperature(s: &mut EnergyState, ev: &ReadingEvent) -> Vec<ActuationRequest> {
    let r = &ev.reading;
    let Some(room_id) = s.temp_rooms.get(&r.node_id).cloned() else {
        return Vec::new();
    };
    let cfg = s.cfg;
    let room = s.rooms.get_mut(&room_id).expect("mapped rooms exist");
    room.apply_setback(r.at, &cfg);
    let (next, cmd) = thermostat_step(&room.state, r.value, r.at);
    room.state = next;
    match cmd {
        Some(cmd) => room
            .heaters
            .iter()
            .map(|h| ActuationRequest { at: cmd.at, room_id: room_id.clone(), node_id: h.clone(), on: cmd.on })
            .collect(),
        None => Vec::new(),
    }
}

fn handle(s: &mut EnergyState, env: &Envelope) -> Result<Handled, String> {
    match env.operation.as_str() {
        "status" => {
            let rooms: BTreeMap<&str, Value> = s
                .rooms
                .iter()
                .map(|(id, r)| {
                    (
                        id.as_str(),
                        json!({"mode": r.state.mode, "setpoint_c": r.state.setpoint_c, "heater_on": r.state.heater_on}),
                    )
                })
                .collect();
            Ok(Handled::Reply(encode(&rooms)))
        }
        "modes" => {
            let p: RoomParams = decode(&env.payload)?;
            let room = s.rooms.get(&p.room).ok_or_else(|| format!("NoData: room '{}' has no thermostat", p.room))?;
            Ok(Handled::Reply(encode(&room.modes)))
        }
        "sync_relay" => {
            let p: SyncParams = decode(&env.payload)?;
            if let Some(room) = s.heater_rooms.get(&p.node_id).and_then(|r| s.rooms.get_mut(r)) {
                room.state.heater_on = p.on;
            }
            Ok(Handled::Reply(Value::Null))
        }
        op => Err(format!("unsupported operation '{op}'")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{CommandSource, Reading, SensorKind};

    fn cmd(ms: i64, node: &str, on: bool) -> ActuationCommand {
        ActuationCommand { at: Timestamp(ms), node_id: node.into(), on, source: CommandSource::Auto }
    }

    #[test]
    fn on_time_union_and_clipping() {
        let heaters = BTreeSet::from(["a".to_string(), "b".to_string()]);
        let log = vec![cmd(0, "a", true), cmd(5, "b", true), cmd(10, "a", false), cmd(20, "b", false), cmd(30, "x", true)];
        assert_eq!(heater_on_ms(&log, &heaters, Timestamp(0), Timestamp(100)), 20);
        assert_eq!(heater_on_ms(&log, &heaters, Timestamp(8), Timestamp(12)), 4);
        let open = vec![cmd(50, "a", true)];
        assert_eq!(heater_on_ms(&open, &heaters, Timestamp(0), Timestamp(100)), 50);
        assert_eq!(heater_kwh(HOUR_MS, 1000.0), 1.0);
    }

    #[test]
    fn setback_hour_accounting() {
        let modes = vec![(Timestamp(0), Mode::Setback), (Timestamp(HOUR_MS), Mode::Comfort), (Timestamp(2 * HOUR_MS), Mode::Setback)];
        assert_eq!(setback_hours(&modes, Timestamp(0), Timestamp(3 * HOUR_MS)), 2.0);
    }

    #[test]
    fn report_is_exact_difference() {
        let heaters = BTreeSet::from(["h".to_string()]);
        let a = vec![cmd(0, "h", true), cmd(HOUR_MS, "h", false)];
        let b = vec![cmd(0, "h", true), cmd(3 * HOUR_MS, "h", false)];
        let r = savings_report("lab", 1500.0, &heaters, &a, &b, &[], Timestamp(0), Timestamp(4 * HOUR_MS));
        assert_eq!((r.actual_kwh, r.baseline_kwh, r.saved_kwh), (1.5, 4.5, 3.0));
    }

    #[test]
    fn service_drives_heater() {
        let bus = Bus::new();
        let cfg = EnergyConfig {
            thermostat: ThermostatConfig::default(),
            rooms: vec![HeatedRoom { room_id: "lab".into(), heater_nodes: vec!["h".into()], temp_nodes: vec!["t".into()] }],
        };
        let _app = EnergyApp::register(&bus, cfg).unwrap();
        let got = Arc::new(Mutex::new(Vec::new()));
        let g = Arc::clone(&got);
        let _sub = bus.subscribe("actuation.*", move |_, env| g.lock().unwrap().push(decode::<ActuationRequest>(&env.payload).unwrap()));
        let temp = |ms: i64, v: f64| {
            let ev = ReadingEvent { reading: Reading::new(Timestamp(ms), "t", SensorKind::Temperature, v).unwrap(), room: None };
            bus.publish("readings.temperature", encode(&ev));
        };
        temp(0, 20.0);
        temp(1000, 20.0);
        temp(2000, 23.0);
        let reqs = got.lock().unwrap().clone();
        assert_eq!(reqs.iter().map(|r| r.on).collect::<Vec<_>>(), vec![true, false]);

        // Empty for more than the delay: setpoint drops, heater stays off at 20.
        temp(2000 + 11 * 60_000, 20.0);
        let status = bus.call(SERVICE, "status", Value::Null, 5).unwrap();
        assert_eq!(status["lab"]["mode"], json!("Setback"));
        assert_eq!(got.lock().unwrap().len(), 2);
        let modes = bus.call(SERVICE, "modes", json!({"room": "lab"}), 5).unwrap();
        assert_eq!(modes.as_array().unwrap().len(), 1);
        assert!(bus.call(SERVICE, "modes", json!({"room": "zz"}), 5).unwrap_err().detail.starts_with("NoData"));
    }
}
