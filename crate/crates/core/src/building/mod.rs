//! Physical world model: rooms with first-order thermal dynamics, noisy
//! sensor nodes, scheduled occupants and relay actuators.
//!
//! Room temperature follows a lumped model integrated with explicit Euler,
//! one step per tick:
//!
//! ```text
//! T += (t_env - T) / tau_ticks + (heater_w * on + 90 W * occupants) * tick_s / c
//! ```
//!
//! so the heated equilibrium is `t_env + P * tau_s / c`.

mod scenario;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::types::{ActuationCommand, Clock, CommandSource, MacAddr, Reading, SensorKind, Tick, Timestamp};

pub use scenario::{
    ArmDecl, FeedbackDecl, DEFAULT_BLE_LINK, DEFAULT_ZWAVE_LINK, LinkDecl, LinkKind, ProfileDecl, ProfileQuantity, RoomDecl, Scenario, ScenarioError,
};

/// Metabolic heat gain per occupant, watts.
pub const OCCUPANT_GAIN_W: f64 = 90.0;
/// Repeated door events closer than this many ticks produce no new open/close pair.
pub const DOOR_DEBOUNCE_TICKS: u64 = 5;
/// Mean in-room RSSI of a presence beacon.
pub const BEACON_RSSI_DBM: f64 = -60.0;
pub const DEFAULT_HUMIDITY_PCT: f64 = 40.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BuildingError {
    #[error("unknown room '{0}'")]
    RoomUnknown(String),
    #[error("unknown node '{0}'")]
    NodeUnknown(String),
    #[error("node '{0}' is not a relay")]
    NotARelay(String),
    #[error("node '{node}' cannot sample {kind}")]
    NotMeasuring { node: String, kind: SensorKind },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelayLoad {
    Heater,
    Lamp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub node_id: String,
    pub room_id: String,
    pub kinds: BTreeSet<SensorKind>,
    pub mac: Option<MacAddr>,
    pub noise_sigma: f64,
    pub period_ticks: u64,
    /// What a relay node switches. `None` is a plain socket with no modelled load.
    pub drives: Option<RelayLoad>,
    /// Illuminance added while a lamp relay is on.
    pub lux_delta: f64,
    /// Explicit transport link; the platform picks a default when absent.
    pub link: Option<String>,
}

impl NodeSpec {
    pub fn has(&self, kind: SensorKind) -> bool {
        self.kinds.contains(&kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OccupantEventKind {
    Enter,
    Exit,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccupantEvent {
    pub at: Tick,
    pub room_id: String,
    pub kind: OccupantEventKind,
    pub mac: Option<MacAddr>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoomState {
    pub room_id: String,
    pub temp_c: f64,
    pub humidity_pct: f64,
    pub lux: f64,
    pub t_env_c: f64,
    pub tau_ticks: u64,
    pub heater_w: f64,
    pub c_j_per_k: f64,
    pub occupants: u32,
    pub heater_on: bool,
}

impl RoomState {
    /// Heated steady state for the current heater and occupant load.
    pub fn equilibrium_c(&self, clock: &Clock) -> f64 {
        let tau_s = self.tau_ticks as f64 * clock.tick_seconds();
        self.t_env_c + self.heat_input_w() * tau_s / self.c_j_per_k
    }

    pub fn heat_input_w(&self) -> f64 {
        let heater = if self.heater_on { self.heater_w } else { 0.0 };
        heater + OCCUPANT_GAIN_W * self.occupants as f64
    }
}

/// Something the world produced during a step.
#[derive(Debug, Clone, PartialEq)]
pub enum Effect {
    Reading(Reading),
    Occupant(OccupantEvent),
}

struct RoomSim {
    state: RoomState,
    humidity: Vec<(Tick, f64)>,
    lux: Vec<(Tick, f64)>,
    base_lux: f64,
}

fn profile_at(points: &[(Tick, f64)], t: Tick, default: f64) -> f64 {
    match points.partition_point(|p| p.0 <= t) {
        0 => points.first().map_or(default, |p| p.1),
        i => points[i - 1].1,
    }
}

struct NodeSim {
    spec: NodeSpec,
    relay_on: bool,
}

/// Where a tracked occupant's beacon currently is.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveBeacon {
    pub node_id: String,
    pub room_id: String,
}

pub struct World {
    clock: Clock,
    now: Tick,
    rng: ChaCha8Rng,
    rooms: BTreeMap<String, RoomSim>,
    nodes: BTreeMap<String, NodeSim>,
    mac_nodes: HashMap<MacAddr, String>,
    schedule: VecDeque<OccupantEvent>,
    deferred: BTreeMap<Tick, Vec<Reading>>,
    beacons: BTreeMap<MacAddr, ActiveBeacon>,
    last_door: HashMap<String, Tick>,
    actuations: Vec<ActuationCommand>,
}

impl World {
    /// Parses and validates `text`, then builds the world at tick 0.
    pub fn build_world(text: &str, seed: u64) -> Result<World, ScenarioError> {
        Ok(World::new(&Scenario::parse(text)?, seed))
    }

    pub fn new(sc: &Scenario, seed: u64) -> World {
        let mut rooms = BTreeMap::new();
        for r in &sc.rooms {
            let profile = |q: ProfileQuantity| {
                sc.profiles
                    .iter()
                    .filter(|p| p.room_id == r.id && p.quantity == q)
                    .flat_map(|p| p.points.iter().copied())
                    .collect::<Vec<_>>()
            };
            let humidity = profile(ProfileQuantity::Humidity);
            let lux = profile(ProfileQuantity::Lux);
            let state = RoomState {
                room_id: r.id.clone(),
                temp_c: r.temp_c,
                humidity_pct: profile_at(&humidity, Tick(0), DEFAULT_HUMIDITY_PCT),
                lux: profile_at(&lux, Tick(0), 0.0),
                t_env_c: r.t_env_c,
                tau_ticks: r.tau_ticks,
                heater_w: r.heater_w,
                c_j_per_k: r.c_j_per_k,
                occupants: 0,
                heater_on: false,
            };
            rooms.insert(r.id.clone(), RoomSim { base_lux: state.lux, state, humidity, lux });
        }
        let nodes = sc.nodes.iter().map(|n| (n.node_id.clone(), NodeSim { spec: n.clone(), relay_on: false })).collect();
        let mac_nodes = sc.nodes.iter().filter_map(|n| n.mac.map(|m| (m, n.node_id.clone()))).collect();
        World {
            clock: sc.clock(),
            now: Tick(0),
            rng: ChaCha8Rng::seed_from_u64(seed),
            rooms,
            nodes,
            mac_nodes,
            schedule: sc.events.iter().cloned().collect(),
            deferred: BTreeMap::new(),
            beacons: BTreeMap::new(),
            last_door: HashMap::new(),
            actuations: Vec::new(),
        }
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn clock(&self) -> Clock {
        self.clock
    }

    pub fn timestamp(&self) -> Timestamp {
        self.clock.timestamp(self.now)
    }

    pub fn room(&self, id: &str) -> Option<&RoomState> {
        self.rooms.get(id).map(|r| &r.state)
    }

    pub fn rooms(&self) -> impl Iterator<Item = &RoomState> {
        self.rooms.values().map(|r| &r.state)
    }

    pub fn node(&self, id: &str) -> Option<&NodeSpec> {
        self.nodes.get(id).map(|n| &n.spec)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeSpec> {
        self.nodes.values().map(|n| &n.spec)
    }

    pub fn relay_on(&self, node: &str) -> Option<bool> {
        self.nodes.get(node).filter(|n| n.spec.has(SensorKind::Relay)).map(|n| n.relay_on)
    }

    pub fn actuations(&self) -> &[ActuationCommand] {
        &self.actuations
    }

    pub fn active_beacon(&self, mac: &MacAddr) -> Option<&ActiveBeacon> {
        self.beacons.get(mac)
    }

    /// Advances `dt_ticks` ticks: integrates room temperatures, fires due
    /// occupant events and emits periodic sensor readings.
    pub fn step(&mut self, dt_ticks: u64) -> Vec<Effect> {
        let mut effects = Vec::new();
        let tick_s = self.clock.tick_seconds();
        for _ in 0..dt_ticks {
            for room in self.rooms.values_mut() {
                let s = &mut room.state;
                let input_w = s.heat_input_w();
                s.temp_c += (s.t_env_c - s.temp_c) / s.tau_ticks as f64 + input_w * tick_s / s.c_j_per_k;
            }
            let t = self.now.plus(1);
            self.now = t;
            let lamp_lux = self.lamp_lux();
            for room in self.rooms.values_mut() {
                room.state.humidity_pct = profile_at(&room.humidity, t, DEFAULT_HUMIDITY_PCT);
                room.base_lux = profile_at(&room.lux, t, 0.0);
                room.state.lux = room.base_lux + lamp_lux.get(&room.state.room_id).copied().unwrap_or(0.0);
            }

            let ts = self.clock.timestamp(t);
            while self.schedule.front().is_some_and(|e| e.at <= t) {
                let ev = self.schedule.pop_front().expect("front checked");
                let readings = self.apply_occupant_event(&ev).expect("scenario events are validated");
                effects.push(Effect::Occupant(ev));
                for r in readings {
                    if r.at <= ts {
                        effects.push(Effect::Reading(r));
                    } else {
                        let due = self.clock.tick_at(r.at).expect("after epoch");
                        self.deferred.entry(due).or_default().push(r);
                    }
                }
            }
            if let Some(due) = self.deferred.remove(&t) {
                effects.extend(due.into_iter().map(Effect::Reading));
            }

            let due_nodes: Vec<String> = self
                .nodes
                .values()
                .filter(|n| t.0.is_multiple_of(n.spec.period_ticks))
                .map(|n| n.spec.node_id.clone())
                .collect();
            for id in due_nodes {
                let spec = self.nodes[&id].spec.clone();
                for kind in spec.kinds.iter().filter(|k| k.is_measuring()) {
                    let r = self.sample_sensor(&id, *kind).expect("node and kind exist");
                    effects.push(Effect::Reading(r));
                }
                if spec.mac.is_some_and(|m| self.beacons.contains_key(&m)) {
                    let noise = self.noise(spec.noise_sigma);
                    let rssi = (BEACON_RSSI_DBM + noise).min(0.0);
                    effects.push(Effect::Reading(
                        Reading::new(ts, id.clone(), SensorKind::PresenceBeacon, rssi).expect("finite"),
                    ));
                }
            }
        }
        effects
    }

    fn lamp_lux(&self) -> HashMap<String, f64> {
        let mut out: HashMap<String, f64> = HashMap::new();
        for n in self.nodes.values().filter(|n| n.relay_on && n.spec.drives == Some(RelayLoad::Lamp)) {
            *out.entry(n.spec.room_id.clone()).or_default() += n.spec.lux_delta;
        }
        out
    }

    fn noise(&mut self, sigma: f64) -> f64 {
        let z: f64 = self.rng.sample(StandardNormal);
        sigma * z
    }

    /// Door open/close pair, people-counter delta and beacon stream change for
    /// one occupant movement. The close reading is stamped one tick later.
    pub fn apply_occupant_event(&mut self, ev: &OccupantEvent) -> Result<Vec<Reading>, BuildingError> {
        let room = self.rooms.get_mut(&ev.room_id).ok_or_else(|| BuildingError::RoomUnknown(ev.room_id.clone()))?;
        let enter = ev.kind == OccupantEventKind::Enter;
        if enter {
            room.state.occupants += 1;
        } else {
            room.state.occupants = room.state.occupants.saturating_sub(1);
        }

        let at = self.clock.timestamp(ev.at);
        let close_at = self.clock.timestamp(ev.at.plus(1));
        let mut out = Vec::new();
        let in_room: Vec<&NodeSpec> = self.nodes.values().map(|n| &n.spec).filter(|s| s.room_id == ev.room_id).collect();
        for door in in_room.iter().filter(|s| s.has(SensorKind::Door)) {
            let debounced = self.last_door.get(&door.node_id).is_some_and(|&last| ev.at.0 < last.0 + DOOR_DEBOUNCE_TICKS);
            if !debounced {
                out.push(Reading::new(at, door.node_id.clone(), SensorKind::Door, 1.0).expect("valid"));
                out.push(Reading::new(close_at, door.node_id.clone(), SensorKind::Door, 0.0).expect("valid"));
                self.last_door.insert(door.node_id.clone(), ev.at);
            }
        }
        let delta = if enter { 1.0 } else { -1.0 };
        for counter in in_room.iter().filter(|s| s.has(SensorKind::PeopleCounter)) {
            out.push(Reading::new(at, counter.node_id.clone(), SensorKind::PeopleCounter, delta).expect("valid"));
        }
        // Keep chronological order: the close readings go last.
        out.sort_by_key(|r| r.at);

        if let Some(mac) = ev.mac {
            if enter {
                if let Some(node_id) = self.mac_nodes.get(&mac) {
                    self.beacons.insert(mac, ActiveBeacon { node_id: node_id.clone(), room_id: ev.room_id.clone() });
                }
            } else {
                self.beacons.remove(&mac);
            }
        }
        Ok(out)
    }

    /// True room value plus seeded Gaussian noise, clamped to the physical range.
    pub fn sample_sensor(&mut self, node_id: &str, kind: SensorKind) -> Result<Reading, BuildingError> {
        let node = self.nodes.get(node_id).ok_or_else(|| BuildingError::NodeUnknown(node_id.to_string()))?;
        if !kind.is_measuring() || !node.spec.has(kind) {
            return Err(BuildingError::NotMeasuring { node: node_id.to_string(), kind });
        }
        let sigma = node.spec.noise_sigma;
        let room = &self.rooms[&node.spec.room_id].state;
        let truth = match kind {
            SensorKind::Temperature => room.temp_c,
            SensorKind::Humidity => room.humidity_pct,
            SensorKind::Luminance => room.lux,
            _ => unreachable!("measuring kinds only"),
        };
        let mut value = truth + self.noise(sigma);
        value = match kind {
            SensorKind::Humidity => value.clamp(0.0, 100.0),
            SensorKind::Luminance => value.max(0.0),
            _ => value,
        };
        Ok(Reading::new(self.timestamp(), node_id, kind, value).expect("finite"))
    }

    /// Switches a relay. Heater power takes effect from the next tick; lamp
    /// illuminance immediately.
    pub fn set_relay(&mut self, node_id: &str, on: bool, source: CommandSource) -> Result<ActuationCommand, BuildingError> {
        let node = self.nodes.get_mut(node_id).ok_or_else(|| BuildingError::NodeUnknown(node_id.to_string()))?;
        if !node.spec.has(SensorKind::Relay) {
            return Err(BuildingError::NotARelay(node_id.to_string()));
        }
        node.relay_on = on;
        let room_id = node.spec.room_id.clone();
        let heater_on = self
            .nodes
            .values()
            .any(|n| n.spec.room_id == room_id && n.relay_on && n.spec.drives == Some(RelayLoad::Heater));
        let lamp = self.lamp_lux().get(&room_id).copied().unwrap_or(0.0);
        let room = self.rooms.get_mut(&room_id).expect("validated room");
        room.state.heater_on = heater_on;
        room.state.lux = room.base_lux + lamp;
        let cmd = ActuationCommand { at: self.clock.timestamp(self.now), node_id: node_id.to_string(), on, source };
        self.actuations.push(cmd.clone());
        Ok(cmd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ROOM: &str = "room r1 temp=25 t_env=15 tau=50 heater_w=1000 c=20000\n";

    fn world(extra: &str) -> World {
        World::build_world(&format!("{ROOM}{extra}"), 7).unwrap()
    }

    fn readings(effects: &[Effect]) -> Vec<&Reading> {
        effects
            .iter()
            .filter_map(|e| match e {
                Effect::Reading(r) => Some(r),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn minimal_world() {
        let w = world("node t1 room=r1 kinds=temperature\n");
        assert_eq!(w.now(), Tick(0));
        assert_eq!(w.rooms().count(), 1);
        assert_eq!(w.room("r1").unwrap().temp_c, 25.0);
    }

    #[test]
    fn missing_room_is_validation_error() {
        let err = World::build_world("node t1 room=r9 kinds=temperature\n", 1).err().unwrap();
        assert!(matches!(err, ScenarioError::Validation(_)));
    }

    #[test]
    fn cooling_is_monotone_and_bounded() {
        let mut w = world("");
        let mut prev = w.room("r1").unwrap().temp_c;
        for _ in 0..2000 {
            w.step(1);
            let t = w.room("r1").unwrap().temp_c;
            assert!(t <= prev && t >= 15.0);
            prev = t;
        }
        assert!(prev < 15.001);
    }

    #[test]
    fn equilibrium_is_fixed_point() {
        let mut w = World::build_world("room r1 temp=15 t_env=15 tau=50 heater_w=1000 c=20000\n", 1).unwrap();
        w.step(500);
        assert_eq!(w.room("r1").unwrap().temp_c, 15.0);
    }

    #[test]
    fn heater_applies_from_next_tick() {
        let mut w = World::build_world(
            "room r1 temp=15 t_env=15 tau=50 heater_w=1000 c=20000\nnode h room=r1 kinds=relay drives=heater\n",
            1,
        )
        .unwrap();
        w.step(3);
        let cmd = w.set_relay("h", true, CommandSource::Manual).unwrap();
        assert_eq!(cmd.source, CommandSource::Manual);
        assert_eq!(cmd.at, w.clock().timestamp(Tick(3)));
        assert_eq!(w.room("r1").unwrap().temp_c, 15.0);
        w.step(1);
        // 1000 W * 0.1 s / 20000 J/K
        assert!((w.room("r1").unwrap().temp_c - 15.005).abs() < 1e-12);
        assert_eq!(w.actuations().len(), 1);
    }

    #[test]
    fn relay_errors() {
        let mut w = world("node t1 room=r1 kinds=temperature\n");
        assert_eq!(w.set_relay("t1", true, CommandSource::Manual), Err(BuildingError::NotARelay("t1".into())));
        assert_eq!(w.set_relay("zz", true, CommandSource::Auto), Err(BuildingError::NodeUnknown("zz".into())));
    }

    #[test]
    fn lamp_adds_lux() {
        let mut w = world("node l room=r1 kinds=relay drives=lamp lux=250\nprofile r1 lux 0=100\n");
        assert_eq!(w.room("r1").unwrap().lux, 100.0);
        w.set_relay("l", true, CommandSource::Auto).unwrap();
        assert_eq!(w.room("r1").unwrap().lux, 350.0);
        w.step(2);
        assert_eq!(w.room("r1").unwrap().lux, 350.0);
        w.set_relay("l", false, CommandSource::Auto).unwrap();
        assert_eq!(w.room("r1").unwrap().lux, 100.0);
    }

    #[test]
    fn zero_noise_sample_is_exact() {
        let mut w = World::build_world(
            "room r1 temp=21.5 t_env=21.5 tau=50 heater_w=0 c=20000\nnode t1 room=r1 kinds=temperature,humidity\n",
            1,
        )
        .unwrap();
        let r = w.sample_sensor("t1", SensorKind::Temperature).unwrap();
        assert_eq!(r.value, 21.5);
        assert_eq!(r.unit, crate::types::Unit::Celsius);
        assert!(matches!(w.sample_sensor("t1", SensorKind::Luminance), Err(BuildingError::NotMeasuring { .. })));
        assert!(matches!(w.sample_sensor("nope", SensorKind::Temperature), Err(BuildingError::NodeUnknown(_))));
    }

    #[test]
    fn humidity_is_clamped() {
        let mut w = world("node t1 room=r1 kinds=humidity sigma=500\nprofile r1 humidity 0=45\n");
        for _ in 0..50 {
            let v = w.sample_sensor("t1", SensorKind::Humidity).unwrap().value;
            assert!((0.0..=100.0).contains(&v));
        }
    }

    #[test]
    fn noisy_samples_are_deterministic() {
        let run = || {
            let mut w = world("node t1 room=r1 kinds=temperature sigma=0.2\n");
            (0..5).map(|_| w.sample_sensor("t1", SensorKind::Temperature).unwrap().value).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn periodic_readings_follow_period() {
        let mut w = world("node t1 room=r1 kinds=temperature period=10\n");
        let fx = w.step(30);
        let ticks: Vec<i64> = readings(&fx).iter().map(|r| (r.at.0 - w.clock().epoch.0) / 100).collect();
        assert_eq!(ticks, vec![10, 20, 30]);
    }

    const OCCUPIED: &str = "node d room=r1 kinds=door\nnode c room=r1 kinds=people-counter\n\
        node b room=r1 kinds=presence-beacon mac=aa:bb:cc:dd:ee:01 period=10\n";

    #[test]
    fn enter_with_mac() {
        let mut w = world(OCCUPIED);
        let mac: MacAddr = "aa:bb:cc:dd:ee:01".parse().unwrap();
        let ev = OccupantEvent { at: Tick(0), room_id: "r1".into(), kind: OccupantEventKind::Enter, mac: Some(mac) };
        let rs = w.apply_occupant_event(&ev).unwrap();
        let summary: Vec<(SensorKind, f64)> = rs.iter().map(|r| (r.kind, r.value)).collect();
        assert_eq!(
            summary,
            vec![(SensorKind::Door, 1.0), (SensorKind::PeopleCounter, 1.0), (SensorKind::Door, 0.0)]
        );
        assert_eq!(rs[2].at.0 - rs[0].at.0, 100);
        assert_eq!(w.room("r1").unwrap().occupants, 1);
        assert_eq!(w.active_beacon(&mac).unwrap().node_id, "b");

        let fx = w.step(10);
        assert!(readings(&fx).iter().any(|r| r.kind == SensorKind::PresenceBeacon && r.value <= 0.0));

        let exit = OccupantEvent { kind: OccupantEventKind::Exit, at: Tick(20), ..ev };
        let rs = w.apply_occupant_event(&exit).unwrap();
        assert!(rs.iter().any(|r| r.kind == SensorKind::PeopleCounter && r.value == -1.0));
        assert_eq!(w.room("r1").unwrap().occupants, 0);
        assert!(w.active_beacon(&mac).is_none());
        let fx = w.step(20);
        assert!(!readings(&fx).iter().any(|r| r.kind == SensorKind::PresenceBeacon));
    }

    #[test]
    fn enter_without_mac() {
        let mut w = world(OCCUPIED);
        let ev = OccupantEvent { at: Tick(0), room_id: "r1".into(), kind: OccupantEventKind::Enter, mac: None };
        let rs = w.apply_occupant_event(&ev).unwrap();
        assert_eq!(rs.iter().filter(|r| r.kind == SensorKind::PeopleCounter).count(), 1);
        let fx = w.step(30);
        assert!(!readings(&fx).iter().any(|r| r.kind == SensorKind::PresenceBeacon));
        let bad = OccupantEvent { room_id: "r9".into(), ..ev };
        assert_eq!(w.apply_occupant_event(&bad), Err(BuildingError::RoomUnknown("r9".into())));
    }

    #[test]
    fn door_debounce() {
        let mut w = world(&format!("{OCCUPIED}event 10 r1 enter\nevent 12 r1 enter\nevent 17 r1 exit\n"));
        let fx = w.step(30);
        let doors: Vec<(i64, f64)> = readings(&fx)
            .iter()
            .filter(|r| r.kind == SensorKind::Door)
            .map(|r| ((r.at.0 - w.clock().epoch.0) / 100, r.value))
            .collect();
        assert_eq!(doors, vec![(10, 1.0), (11, 0.0), (17, 1.0), (18, 0.0)]);
        let counts = readings(&fx).iter().filter(|r| r.kind == SensorKind::PeopleCounter).count();
        assert_eq!(counts, 3);
        assert_eq!(w.room("r1").unwrap().occupants, 1);
    }

    #[test]
    fn scheduled_events_fire_in_step() {
        let mut w = world(&format!("{OCCUPIED}event 0 r1 enter\nevent 5 r1 exit\n"));
        let fx = w.step(10);
        let occ: Vec<&OccupantEvent> = fx
            .iter()
            .filter_map(|e| match e {
                Effect::Occupant(o) => Some(o),
                _ => None,
            })
            .collect();
        assert_eq!(occ.len(), 2);
        assert_eq!(w.room("r1").unwrap().occupants, 0);
    }
}
