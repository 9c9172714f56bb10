//! Wires the simulated building, its radio links and the hub services into
//! one deterministic process and drives the clock.
//!
//! Every tick the world steps, new readings leave their nodes over the
//! node's link, and frames that reach the hub are published as
//! `readings.<kind>`. Hub-side services:
//!
//! | service     | role                                                   |
//! |-------------|--------------------------------------------------------|
//! | `store`     | appends every reading, answers range queries           |
//! | `occupancy` | fuses counters and beacons, publishes `occupancy.<room>` |
//! | `hub`       | relay control and the actuation log                    |
//! | `energy`, `security`, `comfort` | the apps                       |
//! | `reports`   | savings reports against a re-simulated baseline        |

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use crate::apps::comfort::{self, ComfortApp};
use crate::apps::energy::{self, savings_report, ActuationRequest, EnergyApp, EnergyConfig, HeatedRoom};
use crate::apps::security::{self, Alert, SecurityApp, DEFAULT_LEFT_OPEN_MS};
use crate::apps::{decode, encode, AppError, Mode, ThermostatConfig};
use crate::building::{
    Effect, LinkKind, RelayLoad, Scenario, ScenarioError, World, DEFAULT_BLE_LINK, DEFAULT_ZWAVE_LINK,
};
use crate::bus::{Bus, BusError, Envelope, FaultInfo, Handled, Registration, ServiceDescriptor, Subscription};
use crate::occupancy::{OccupancyEngine, OccupancyEstimate, OccupancyInput, PresenceSighting, DEFAULT_LEASE_MS, DEFAULT_MIN_GAP_MS};
use crate::report::{render_csv, render_text, RoomReport};
use crate::store::{downsample, Agg, RangeQuery, SharedStore};
use crate::transport::{
    Destination, LinkFlavor, LinkSpec, MeshTopology, TopologyError, Transport, TransportError, HUB,
};
use crate::types::{
    ActuationCommand, Clock, CommandSource, MacAddr, ReadingEvent, SensorKind, Tick, Timestamp, MINUTE_MS,
};

pub const DEFAULT_HOLD_MS: i64 = 15 * MINUTE_MS;
/// Real-time cap for one hub-internal request.
pub const INTERNAL_WAIT: Duration = Duration::from_secs(120);
const REQUEST_TICKS: u64 = 600;

#[derive(Debug, thiserror::Error)]
pub enum PlatformError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    App(#[from] AppError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error("{0}")]
    Fault(FaultInfo),
}

impl From<FaultInfo> for PlatformError {
    fn from(f: FaultInfo) -> Self {
        PlatformError::Fault(f)
    }
}

/// Which apps get registered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AppSet {
    pub energy: bool,
    pub security: bool,
    pub comfort: bool,
}

impl AppSet {
    pub const ALL: AppSet = AppSet { energy: true, security: true, comfort: true };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlatformConfig {
    pub seed: u64,
    pub apps: AppSet,
    pub thermostat: ThermostatConfig,
    pub hold_ms: i64,
    pub left_open_ms: i64,
    pub lease_ms: i64,
    /// Register the `reports` service.
    pub reports: bool,
}

impl PlatformConfig {
    pub fn new(seed: u64) -> PlatformConfig {
        PlatformConfig {
            seed,
            apps: AppSet::ALL,
            thermostat: ThermostatConfig::default(),
            hold_ms: DEFAULT_HOLD_MS,
            left_open_ms: DEFAULT_LEFT_OPEN_MS,
            lease_ms: DEFAULT_LEASE_MS,
            reports: true,
        }
    }

    /// Same run with the thermostat pinned to Comfort.
    pub fn baseline(&self) -> PlatformConfig {
        PlatformConfig {
            thermostat: ThermostatConfig { setback_enabled: false, ..self.thermostat },
            reports: false,
            ..*self
        }
    }
}

#[derive(Debug, Clone)]
struct Route {
    link_id: String,
    flavor: LinkFlavor,
}

struct HubState {
    world: Mutex<World>,
    holds: Mutex<BTreeMap<String, Timestamp>>,
    hold_ms: i64,
}

impl HubState {
    fn world(&self) -> MutexGuard<'_, World> {
        self.world.lock().unwrap_or_else(|e| e.into_inner())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PlatformStats {
    pub readings_published: u64,
    pub store_rejects: u64,
    pub suppressed_auto: u64,
    pub transport_errors: u64,
}

pub struct Platform {
    scenario: Scenario,
    cfg: PlatformConfig,
    clock: Clock,
    bus: Bus,
    hub: Arc<HubState>,
    store: SharedStore,
    transport: Transport,
    routes: HashMap<String, Route>,
    staged: HashMap<(String, SensorKind), ReadingEvent>,
    actuation_inbox: Arc<Mutex<Vec<ActuationRequest>>>,
    alerts: Arc<Mutex<Vec<Alert>>>,
    store_rejects: Arc<Mutex<u64>>,
    stats: PlatformStats,
    feedback_next: usize,
    arming_next: usize,
    _registrations: Vec<Registration>,
    _subscriptions: Vec<Subscription>,
    _energy: Option<EnergyApp>,
    _security: Option<SecurityApp>,
    _comfort: Option<ComfortApp>,
}

impl Platform {
    pub fn from_text(text: &str, cfg: PlatformConfig) -> Result<Platform, PlatformError> {
        Platform::new(Scenario::parse(text)?, cfg)
    }

    pub fn new(scenario: Scenario, cfg: PlatformConfig) -> Result<Platform, PlatformError> {
        let world = World::new(&scenario, cfg.seed);
        let clock = scenario.clock();
        let (transport, routes) = build_transport(&scenario, cfg.seed)?;
        let bus = Bus::new();
        let store = SharedStore::new();
        let hub = Arc::new(HubState { world: Mutex::new(world), holds: Mutex::new(BTreeMap::new()), hold_ms: cfg.hold_ms });

        let mut registrations = Vec::new();
        let mut subscriptions = Vec::new();

        let store_rejects = Arc::new(Mutex::new(0u64));
        let (reg, sub) = register_store(&bus, store.clone(), Arc::clone(&store_rejects))?;
        registrations.push(reg);
        subscriptions.push(sub);
        let (reg, sub) = register_occupancy(&bus, &scenario, cfg.lease_ms)?;
        registrations.push(reg);
        subscriptions.push(sub);
        registrations.push(register_hub(&bus, Arc::clone(&hub))?);

        let actuation_inbox = Arc::new(Mutex::new(Vec::new()));
        let inbox = Arc::clone(&actuation_inbox);
        subscriptions.push(bus.subscribe("actuation.*", move |_, env| {
            if let Ok(req) = decode::<ActuationRequest>(&env.payload) {
                inbox.lock().expect("inbox").push(req);
            }
        }));
        let alerts = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&alerts);
        subscriptions.push(bus.subscribe(security::ALERT_TOPIC, move |_, env| {
            if let Ok(a) = decode::<Alert>(&env.payload) {
                log.lock().expect("alerts").push(a);
            }
        }));

        let energy = cfg
            .apps
            .energy
            .then(|| EnergyApp::register(&bus, EnergyConfig { thermostat: cfg.thermostat, rooms: heated_rooms(&scenario) }))
            .transpose()?;
        let security = cfg
            .apps
            .security
            .then(|| SecurityApp::register(&bus, &nodes_of_kind(&scenario, SensorKind::Door), cfg.left_open_ms))
            .transpose()?;
        let comfort = cfg
            .apps
            .comfort
            .then(|| ComfortApp::register(&bus, &nodes_of_kind(&scenario, SensorKind::Temperature)))
            .transpose()?;
        if cfg.reports {
            registrations.push(register_reports(&bus, scenario.clone(), cfg, Arc::clone(&hub))?);
        }

        Ok(Platform {
            scenario,
            cfg,
            clock,
            bus,
            hub,
            store,
            transport,
            routes,
            staged: HashMap::new(),
            actuation_inbox,
            alerts,
            store_rejects,
            stats: PlatformStats::default(),
            feedback_next: 0,
            arming_next: 0,
            _registrations: registrations,
            _subscriptions: subscriptions,
            _energy: energy,
            _security: security,
            _comfort: comfort,
        })
    }

    pub fn bus(&self) -> Bus {
        self.bus.clone()
    }

    pub fn store(&self) -> SharedStore {
        self.store.clone()
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn config(&self) -> &PlatformConfig {
        &self.cfg
    }

    pub fn clock(&self) -> Clock {
        self.clock
    }

    pub fn now(&self) -> Tick {
        self.transport.now()
    }

    pub fn world(&self) -> MutexGuard<'_, World> {
        self.hub.world()
    }

    pub fn actuations(&self) -> Vec<ActuationCommand> {
        self.world().actuations().to_vec()
    }

    pub fn alerts(&self) -> Vec<Alert> {
        self.alerts.lock().expect("alerts").clone()
    }

    pub fn stats(&self) -> PlatformStats {
        PlatformStats { store_rejects: *self.store_rejects.lock().expect("counter"), ..self.stats }
    }

    pub fn run(&mut self, ticks: u64) {
        for _ in 0..ticks {
            self.step();
        }
    }

    pub fn step(&mut self) {
        let effects = self.hub.world().step(1);
        let mut direct = Vec::new();
        {
            let world = self.hub.world();
            for e in effects {
                let Effect::Reading(r) = e else { continue };
                let spec = world.node(&r.node_id).expect("readings come from known nodes");
                let room = if r.kind == SensorKind::PresenceBeacon {
                    spec.mac.and_then(|m| world.active_beacon(&m)).map(|b| b.room_id.clone())
                } else {
                    Some(spec.room_id.clone())
                };
                let route = &self.routes[&r.node_id];
                let ev = ReadingEvent { reading: r, room };
                if route.flavor == LinkFlavor::Ble && ev.reading.kind.is_measuring() {
                    self.staged.insert((ev.reading.node_id.clone(), ev.reading.kind), ev);
                } else {
                    direct.push(ev);
                }
            }
        }

        let staged = &mut self.staged;
        let delivered = self.transport.advance_with(1, |n| {
            staged
                .remove(&(n.node.clone(), n.kind))
                .map(|ev| serde_json::to_vec(&ev).expect("plain data"))
                .unwrap_or_default()
        });
        for ev in direct {
            let route = self.routes[&ev.reading.node_id].clone();
            let bytes = serde_json::to_vec(&ev).expect("plain data");
            let sent = if route.flavor == LinkFlavor::ZigbeeMesh {
                self.transport
                    .mesh_frame(&route.link_id, &ev.reading.node_id, Destination::Node(HUB.to_string()), bytes)
                    .and_then(|f| self.transport.send_mesh(&route.link_id, f))
                    .map(|_| ())
            } else {
                self.transport.transmit(&route.link_id, &ev.reading.node_id, bytes)
            };
            if sent.is_err() {
                self.stats.transport_errors += 1;
            }
        }

        self.bus.advance(1);
        let now = self.transport.now();
        let ts = self.clock.timestamp(now);
        for f in delivered {
            let Ok(ev) = serde_json::from_slice::<ReadingEvent>(&f.frame.payload) else { continue };
            self.stats.readings_published += 1;
            let topic = format!("readings.{}", ev.reading.kind.as_str());
            self.bus.publish(&topic, encode(&ev));
        }
        self.bus.notify("occupancy", "refresh", json!({ "at": ts }));
        if self.cfg.apps.security {
            self.bus.notify(security::SERVICE, "sweep", json!({ "at": ts }));
        }
        self.run_directives(now, ts);
        self.apply_actuations(ts);
        self.expire_holds(ts);
    }

    fn run_directives(&mut self, now: Tick, ts: Timestamp) {
        while let Some(f) = self.scenario.feedback.get(self.feedback_next).filter(|f| f.at <= now) {
            self.feedback_next += 1;
            if self.cfg.apps.comfort {
                let params = json!({
                    "user": f.user, "room": f.room_id, "thermal": f.thermal_vote,
                    "humidity": f.humidity_vote, "temp": f.temp_c, "at": ts,
                });
                let _ = self.bus.call(comfort::SERVICE, "submit", params, REQUEST_TICKS);
            }
        }
        while let Some(a) = self.scenario.arming.get(self.arming_next).filter(|a| a.at <= now) {
            self.arming_next += 1;
            if self.cfg.apps.security {
                let op = if a.armed { "arm" } else { "disarm" };
                let _ = self.bus.call(security::SERVICE, op, json!({ "room": a.room_id, "at": ts }), REQUEST_TICKS);
            }
        }
    }

    fn apply_actuations(&mut self, ts: Timestamp) {
        let requests = std::mem::take(&mut *self.actuation_inbox.lock().expect("inbox"));
        if requests.is_empty() {
            return;
        }
        let holds = self.hub.holds.lock().expect("holds");
        let mut world = self.hub.world();
        for req in requests {
            if holds.get(&req.node_id).is_some_and(|&until| ts < until) {
                self.stats.suppressed_auto += 1;
                continue;
            }
            if world.relay_on(&req.node_id) == Some(req.on) {
                continue;
            }
            if world.set_relay(&req.node_id, req.on, CommandSource::Auto).is_err() {
                self.stats.transport_errors += 1;
            }
        }
    }

    fn expire_holds(&mut self, ts: Timestamp) {
        let expired: Vec<String> = {
            let mut holds = self.hub.holds.lock().expect("holds");
            let done: Vec<String> = holds.iter().filter(|(_, &until)| until <= ts).map(|(n, _)| n.clone()).collect();
            for n in &done {
                holds.remove(n);
            }
            done
        };
        for node in expired {
            let on = self.hub.world().relay_on(&node).unwrap_or(false);
            self.bus.notify(energy::SERVICE, "sync_relay", json!({ "node_id": node, "on": on }));
        }
    }

    /// Savings report plus absence intervals for one room, via the bus.
    pub fn room_report(&self, room: &str, from: Timestamp, to: Timestamp) -> Result<RoomReport, PlatformError> {
        let v = self.bus.call("reports", "energy", json!({ "room": room, "from": from, "to": to }), REQUEST_TICKS)?;
        Ok(serde_json::from_value(v).map_err(|e| FaultInfo::new(crate::bus::FaultCode::HandlerFault, e.to_string()))?)
    }

    /// Rooms that have at least one heater relay, in id order.
    pub fn heated_room_ids(&self) -> Vec<String> {
        heated_rooms(&self.scenario).into_iter().filter(|r| !r.heater_nodes.is_empty()).map(|r| r.room_id).collect()
    }
}

fn link_flavor(kind: LinkKind) -> LinkFlavor {
    match kind {
        LinkKind::Ble => LinkFlavor::Ble,
        LinkKind::Zwave => LinkFlavor::Zwave,
        LinkKind::Mesh => LinkFlavor::ZigbeeMesh,
    }
}

fn build_transport(sc: &Scenario, seed: u64) -> Result<(Transport, HashMap<String, Route>), PlatformError> {
    let mut t = Transport::new(seed);
    let mut flavors: HashMap<String, LinkFlavor> = HashMap::new();
    for (id, flavor, latency) in [(DEFAULT_BLE_LINK, LinkFlavor::Ble, 1), (DEFAULT_ZWAVE_LINK, LinkFlavor::Zwave, 2)] {
        if sc.link(id).is_none() {
            t.add_link(LinkSpec::new(id, flavor, 0.0, latency)?)?;
            flavors.insert(id.to_string(), flavor);
        }
    }
    let mut routes = HashMap::new();
    for n in &sc.nodes {
        let link_id = n.link.clone().unwrap_or_else(|| {
            if n.has(SensorKind::Door) || n.has(SensorKind::PeopleCounter) {
                DEFAULT_ZWAVE_LINK.to_string()
            } else {
                DEFAULT_BLE_LINK.to_string()
            }
        });
        let flavor = match sc.link(&link_id) {
            Some(l) => link_flavor(l.kind),
            None => flavors[&link_id],
        };
        routes.insert(n.node_id.clone(), Route { link_id, flavor });
    }
    for l in &sc.links {
        let spec = LinkSpec::new(&l.id, link_flavor(l.kind), l.loss_prob, l.latency_ticks)?;
        if l.kind == LinkKind::Mesh {
            let mut topo = MeshTopology::default();
            topo.add_node(HUB)?;
            let members: BTreeSet<&str> =
                routes.iter().filter(|(_, r)| r.link_id == l.id).map(|(n, _)| n.as_str()).collect();
            for m in &members {
                topo.add_node(m)?;
            }
            for (a, b) in &sc.mesh_edges {
                if topo.contains(a) && topo.contains(b) {
                    topo.add_edge(a, b)?;
                }
            }
            t.add_mesh(spec, topo)?;
        } else {
            t.add_link(spec)?;
        }
    }
    let mut by_id: Vec<&String> = routes.keys().collect();
    by_id.sort();
    for id in by_id {
        let route = &routes[id];
        if route.flavor == LinkFlavor::ZigbeeMesh {
            continue;
        }
        t.register_node(&route.link_id, id)?;
        if route.flavor == LinkFlavor::Ble {
            let spec = sc.node(id).expect("route from node");
            let measuring: Vec<SensorKind> = spec.kinds.iter().copied().filter(|k| k.is_measuring()).collect();
            if !measuring.is_empty() {
                let conn = t.connect_ble(&route.link_id, id)?;
                for k in measuring {
                    t.subscribe_ble(conn, k.as_str(), spec.period_ticks)?;
                }
            }
        }
    }
    Ok((t, routes))
}

fn heated_rooms(sc: &Scenario) -> Vec<HeatedRoom> {
    sc.rooms
        .iter()
        .map(|r| {
            let in_room = sc.nodes.iter().filter(|n| n.room_id == r.id);
            HeatedRoom {
                room_id: r.id.clone(),
                heater_nodes: in_room.clone().filter(|n| n.drives == Some(RelayLoad::Heater)).map(|n| n.node_id.clone()).collect(),
                temp_nodes: in_room.filter(|n| n.has(SensorKind::Temperature)).map(|n| n.node_id.clone()).collect(),
            }
        })
        .collect()
}

fn nodes_of_kind(sc: &Scenario, kind: SensorKind) -> Vec<(String, String)> {
    sc.nodes.iter().filter(|n| n.has(kind)).map(|n| (n.node_id.clone(), n.room_id.clone())).collect()
}

#[derive(Deserialize)]
struct QueryParams {
    #[serde(default)]
    from: Option<Timestamp>,
    #[serde(default)]
    to: Option<Timestamp>,
    #[serde(default)]
    nodes: Option<BTreeSet<String>>,
    #[serde(default)]
    kinds: Option<BTreeSet<SensorKind>>,
    #[serde(default)]
    window_ms: Option<i64>,
    #[serde(default)]
    agg: Option<Agg>,
}

fn register_store(bus: &Bus, store: SharedStore, rejects: Arc<Mutex<u64>>) -> Result<(Registration, Subscription), BusError> {
    let s = store.clone();
    let sub = bus.subscribe("readings.*", move |_, env| {
        if let Ok(ev) = decode::<ReadingEvent>(&env.payload) {
            if s.append(ev.reading).is_err() {
                *rejects.lock().expect("counter") += 1;
            }
        }
    });
    let reg = bus.register(ServiceDescriptor::new("store", ["append", "query"]), move |_, env: &Envelope| {
        match env.operation.as_str() {
            "append" => {
                let ev: ReadingEvent = decode(&env.payload)?;
                let offset = store.append(ev.reading).map_err(|e| format!("Rejected: {e}"))?;
                Ok(Handled::Reply(json!({ "offset": offset })))
            }
            "query" => {
                let p: QueryParams = decode(&env.payload)?;
                let q = RangeQuery {
                    from: p.from.unwrap_or(Timestamp::MIN),
                    to: p.to.unwrap_or(Timestamp::MAX),
                    nodes: p.nodes,
                    kinds: p.kinds,
                };
                q.validate().map_err(|e| format!("BadParams: {e}"))?;
                let guard = store.read();
                match p.window_ms {
                    None => Ok(Handled::Reply(encode(&guard.query_range(&q)))),
                    Some(w) => {
                        let agg = p.agg.unwrap_or(Agg::Mean);
                        let series = guard
                            .query_series(&q)
                            .iter()
                            .map(|s| downsample(s, w, agg))
                            .collect::<Result<Vec<_>, _>>()
                            .map_err(|e| format!("BadParams: {e}"))?;
                        Ok(Handled::Reply(encode(&series)))
                    }
                }
            }
            op => Err(format!("unsupported operation '{op}'")),
        }
    })?;
    Ok((reg, sub))
}

struct OccupancyState {
    engine: OccupancyEngine,
    macs: HashMap<String, MacAddr>,
    published: BTreeMap<String, (u32, crate::occupancy::Confidence, BTreeSet<MacAddr>)>,
    now: Timestamp,
}

impl OccupancyState {
    fn publish_if_changed(&mut self, bus: &Bus, est: OccupancyEstimate) {
        let key = (est.count, est.confidence, est.known_macs.clone());
        if self.published.get(&est.room_id) != Some(&key) {
            self.published.insert(est.room_id.clone(), key);
            bus.publish(&format!("occupancy.{}", est.room_id), encode(&est));
        }
    }
}

#[derive(Deserialize)]
struct RoomAt {
    room: String,
    #[serde(default)]
    at: Option<Timestamp>,
}

#[derive(Deserialize)]
struct AbsenceParams {
    room: String,
    from: Timestamp,
    to: Timestamp,
    #[serde(default)]
    min_gap_ms: Option<i64>,
}

#[derive(Deserialize)]
struct AtParams {
    at: Timestamp,
}

fn register_occupancy(bus: &Bus, sc: &Scenario, lease_ms: i64) -> Result<(Registration, Subscription), PlatformError> {
    let mut engine = OccupancyEngine::new(lease_ms);
    for r in &sc.rooms {
        engine.add_room(&r.id);
    }
    for n in sc.nodes.iter().filter(|n| n.has(SensorKind::Door) || n.has(SensorKind::PeopleCounter)) {
        engine.attach_node(&n.node_id, &n.room_id).expect("validated rooms");
    }
    let macs = sc.nodes.iter().filter_map(|n| n.mac.map(|m| (n.node_id.clone(), m))).collect();
    let state = Arc::new(Mutex::new(OccupancyState {
        engine,
        macs,
        published: BTreeMap::new(),
        now: sc.start,
    }));

    let st = Arc::clone(&state);
    let sub = bus.subscribe("readings.*", move |bus, env| {
        let Ok(ev) = decode::<ReadingEvent>(&env.payload) else { return };
        let mut s = st.lock().expect("occupancy state");
        let r = ev.reading;
        let input = match r.kind {
            SensorKind::PeopleCounter => OccupancyInput::Counter(r),
            SensorKind::Door => OccupancyInput::Door(r),
            SensorKind::PresenceBeacon => {
                let (Some(mac), Some(room_id)) = (s.macs.get(&r.node_id).copied(), ev.room) else { return };
                OccupancyInput::Sighting(PresenceSighting { mac, room_id, at: r.at, rssi_dbm: r.value })
            }
            _ => return,
        };
        if let Ok(est) = s.engine.update(input) {
            s.publish_if_changed(bus, est);
        }
    });
    let reg = bus.register(
        ServiceDescriptor::new("occupancy", ["get", "absence", "timeline", "refresh"]),
        move |bus, env: &Envelope| {
            let mut s = state.lock().expect("occupancy state");
            let fault = |e: crate::occupancy::OccupancyError| match e {
                crate::occupancy::OccupancyError::RoomUnknown(_) => format!("NoData: {e}"),
                _ => format!("BadParams: {e}"),
            };
            match env.operation.as_str() {
                "get" => {
                    let p: RoomAt = decode(&env.payload)?;
                    let at = p.at.unwrap_or(s.now);
                    Ok(Handled::Reply(encode(&s.engine.current_estimate(&p.room, at).map_err(fault)?)))
                }
                "absence" => {
                    let p: AbsenceParams = decode(&env.payload)?;
                    let gap = p.min_gap_ms.unwrap_or(DEFAULT_MIN_GAP_MS);
                    Ok(Handled::Reply(encode(&s.engine.absence_intervals(&p.room, p.from, p.to, gap).map_err(fault)?)))
                }
                "timeline" => {
                    let p: AbsenceParams = decode(&env.payload)?;
                    Ok(Handled::Reply(encode(&s.engine.timeline(&p.room, p.from, p.to).map_err(fault)?)))
                }
                "refresh" => {
                    let p: AtParams = decode(&env.payload)?;
                    s.now = p.at;
                    let rooms: Vec<String> = s.engine.rooms().map(str::to_string).collect();
                    for room in rooms {
                        let est = s.engine.current_estimate(&room, p.at).map_err(fault)?;
                        s.publish_if_changed(bus, est);
                    }
                    Ok(Handled::Reply(Value::Null))
                }
                op => Err(format!("unsupported operation '{op}'")),
            }
        },
    )?;
    Ok((reg, sub))
}

#[derive(Deserialize)]
struct RelayParams {
    node: String,
    on: bool,
}

fn register_hub(bus: &Bus, hub: Arc<HubState>) -> Result<Registration, BusError> {
    bus.register(ServiceDescriptor::new("hub", ["set_relay", "relays", "actuations"]), move |_, env: &Envelope| {
        match env.operation.as_str() {
            "set_relay" => {
                let p: RelayParams = decode(&env.payload)?;
                let mut world = hub.world();
                let cmd = world.set_relay(&p.node, p.on, CommandSource::Manual).map_err(|e| match e {
                    crate::building::BuildingError::NodeUnknown(_) => format!("NodeUnknown: {e}"),
                    _ => format!("NotARelay: {e}"),
                })?;
                let until = cmd.at.plus_ms(hub.hold_ms);
                hub.holds.lock().expect("holds").insert(p.node.clone(), until);
                Ok(Handled::Reply(json!({ "command": cmd, "hold_until": until })))
            }
            "relays" => {
                let world = hub.world();
                let holds = hub.holds.lock().expect("holds");
                let relays: BTreeMap<String, Value> = world
                    .nodes()
                    .filter(|n| n.has(SensorKind::Relay))
                    .map(|n| {
                        let on = world.relay_on(&n.node_id).unwrap_or(false);
                        (n.node_id.clone(), json!({ "room": n.room_id, "on": on, "hold_until": holds.get(&n.node_id) }))
                    })
                    .collect();
                Ok(Handled::Reply(encode(&relays)))
            }
            "actuations" => Ok(Handled::Reply(encode(&hub.world().actuations()))),
            op => Err(format!("unsupported operation '{op}'")),
        }
    })
}

#[derive(Deserialize)]
struct ReportParams {
    room: String,
    #[serde(default)]
    from: Option<Timestamp>,
    #[serde(default)]
    to: Option<Timestamp>,
}

fn ask(bus: &Bus, service: &str, op: &str, params: Value) -> Result<Value, String> {
    let ticket = bus.request(service, op, params, REQUEST_TICKS).map_err(|e| e.to_string())?;
    match bus.wait(&ticket, INTERNAL_WAIT) {
        Some(r) => r.result.map_err(|f| f.detail),
        None => {
            bus.abandon(ticket);
            Err(format!("no reply from {service}"))
        }
    }
}

/// Actuation log of the counterfactual run, cached per duration in ticks.
type BaselineCache = Mutex<HashMap<u64, Arc<Vec<ActuationCommand>>>>;

fn register_reports(bus: &Bus, sc: Scenario, cfg: PlatformConfig, hub: Arc<HubState>) -> Result<Registration, BusError> {
    let cache: BaselineCache = Mutex::new(HashMap::new());
    bus.register(ServiceDescriptor::new("reports", ["energy"]), move |bus, env: &Envelope| {
        let p: ReportParams = decode(&env.payload)?;
        let room = sc.room(&p.room).ok_or_else(|| format!("NoData: unknown room '{}'", p.room))?;
        let heaters: BTreeSet<String> = sc
            .nodes
            .iter()
            .filter(|n| n.room_id == room.id && n.drives == Some(RelayLoad::Heater))
            .map(|n| n.node_id.clone())
            .collect();
        if heaters.is_empty() {
            return Err(format!("NoData: room '{}' has no heater", room.id));
        }
        let clock = sc.clock();
        let (now, actual) = {
            let world = hub.world();
            (clock.timestamp(world.now()), world.actuations().to_vec())
        };
        let from = p.from.unwrap_or(sc.start);
        let to = p.to.unwrap_or(now);
        if from > to {
            return Err("BadParams: from is after to".into());
        }
        if to > now {
            return Err(format!("NoData: simulation has only reached {}", now.to_iso()));
        }
        let ticks = clock.tick_at(to).map(|t| t.0).unwrap_or(0);
        let baseline = {
            let mut c = cache.lock().expect("baseline cache");
            match c.get(&ticks) {
                Some(b) => Arc::clone(b),
                None => {
                    let mut base = Platform::new(sc.clone(), cfg.baseline()).map_err(|e| e.to_string())?;
                    base.run(ticks);
                    let log = Arc::new(base.actuations());
                    c.insert(ticks, Arc::clone(&log));
                    log
                }
            }
        };
        let modes: Vec<(Timestamp, Mode)> = match ask(bus, energy::SERVICE, "modes", json!({ "room": room.id })) {
            Ok(v) => decode(&v)?,
            Err(_) => Vec::new(),
        };
        let savings = savings_report(&room.id, room.heater_w, &heaters, &actual, &baseline, &modes, from, to);
        let absences = decode(&ask(bus, "occupancy", "absence", json!({ "room": room.id, "from": from, "to": to }))?)?;
        Ok(Handled::Reply(encode(&RoomReport { savings, absences })))
    })
}

/// Files written by a scenario run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunArtifacts {
    pub readings_csv: String,
    pub actuations_csv: String,
    pub alerts_csv: String,
    pub report_txt: String,
    pub report_csv: String,
}

impl RunArtifacts {
    pub fn files(&self) -> [(&'static str, &str); 5] {
        [
            ("readings.csv", &self.readings_csv),
            ("actuations.csv", &self.actuations_csv),
            ("alerts.csv", &self.alerts_csv),
            ("report.txt", &self.report_txt),
            ("report.csv", &self.report_csv),
        ]
    }
}

pub fn actuations_csv(log: &[ActuationCommand]) -> String {
    let mut out = String::from("timestamp,node_id,on,source\n");
    for c in log {
        out.push_str(&format!("{},{},{},{}\n", c.at.to_iso(), c.node_id, c.on as u8, c.source));
    }
    out
}

pub fn alerts_csv(alerts: &[Alert]) -> String {
    let mut out = String::from("timestamp,room_id,rule,severity,detail\n");
    for a in alerts {
        out.push_str(&format!("{},{},{:?},{:?},{}\n", a.at.to_iso(), a.room_id, a.rule, a.severity, a.detail.replace(',', ";")));
    }
    out
}

/// Runs `ticks` ticks and renders every artifact.
pub fn run_scenario(scenario: Scenario, cfg: PlatformConfig, ticks: u64) -> Result<RunArtifacts, PlatformError> {
    let mut p = Platform::new(scenario, PlatformConfig { reports: true, ..cfg })?;
    p.run(ticks);
    let mut readings = Vec::new();
    p.store().read().export_csv(&RangeQuery::all(), &mut readings).expect("in-memory sink");
    let from = p.scenario().start;
    let to = p.clock().timestamp(p.now());
    let reports = p
        .heated_room_ids()
        .iter()
        .map(|room| p.room_report(room, from, to))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RunArtifacts {
        readings_csv: String::from_utf8(readings).expect("ascii csv"),
        actuations_csv: actuations_csv(&p.actuations()),
        alerts_csv: alerts_csv(&p.alerts()),
        report_txt: render_text(&reports),
        report_csv: render_csv(&reports),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const LAB: &str = "room lab temp=18 t_env=10 tau=36000 heater_w=1000 c=360000\n\
        node t1 room=lab kinds=temperature sigma=0\n\
        node h1 room=lab kinds=relay drives=heater\n\
        node d1 room=lab kinds=door\n\
        node pc room=lab kinds=people-counter\n";

    #[test]
    fn readings_flow_to_store() {
        let mut p = Platform::from_text(LAB, PlatformConfig::new(1)).unwrap();
        p.run(100);
        let n = p.store().read().len();
        // Temperature every 10 ticks, one tick of BLE latency.
        assert_eq!(n, 9);
        let first = p.store().read().query_range(&RangeQuery::all())[0].clone();
        assert_eq!(first.at, p.clock().timestamp(Tick(10)));
    }

    #[test]
    fn thermostat_switches_heater() {
        let mut p = Platform::from_text(&format!("{LAB}event 0 lab enter\n"), PlatformConfig::new(1)).unwrap();
        p.run(20);
        let log = p.actuations();
        assert_eq!(log.len(), 1);
        assert!(log[0].on && log[0].source == CommandSource::Auto);
        assert!(p.world().room("lab").unwrap().heater_on);
    }

    #[test]
    fn manual_hold_suppresses_auto() {
        let cfg = PlatformConfig { hold_ms: 60_000, ..PlatformConfig::new(1) };
        let mut p = Platform::from_text(&format!("{LAB}event 0 lab enter\n"), cfg).unwrap();
        p.run(5);
        let bus = p.bus();
        bus.call("hub", "set_relay", json!({"node": "h1", "on": false}), 5).unwrap();
        p.run(100);
        assert_eq!(p.actuations().len(), 1);
        assert!(p.stats().suppressed_auto > 0);
        p.run(600);
        let log = p.actuations();
        assert_eq!(log.len(), 2);
        assert_eq!((log[1].on, log[1].source), (true, CommandSource::Auto));
        assert!(bus.call("hub", "set_relay", json!({"node": "t1", "on": true}), 5).unwrap_err().detail.starts_with("NotARelay"));
        assert!(bus.call("hub", "set_relay", json!({"node": "zz", "on": true}), 5).unwrap_err().detail.starts_with("NodeUnknown"));
    }

    #[test]
    fn occupancy_published_from_counter() {
        let mut p = Platform::from_text(&format!("{LAB}event 5 lab enter\n"), PlatformConfig::new(1)).unwrap();
        p.run(20);
        let est = p.bus().call("occupancy", "get", json!({"room": "lab"}), 5).unwrap();
        assert_eq!(est["count"], json!(1));
        let d = p.store().read().query_range(&RangeQuery::all().kind(SensorKind::Door));
        assert_eq!(d.len(), 2);
    }

    #[test]
    fn arming_raises_alert() {
        let mut p = Platform::from_text(&format!("{LAB}arm 0 lab\nevent 50 lab enter\n"), PlatformConfig::new(1)).unwrap();
        p.run(100);
        let alerts = p.alerts();
        assert_eq!(alerts.len(), 1);
        assert_eq!(alerts[0].rule, security::AlertRule::DoorWhileEmpty);
    }

    #[test]
    fn mesh_nodes_reach_hub() {
        let text = "room lab temp=18 t_env=10 tau=36000 heater_w=0 c=360000\n\
            link zb mesh loss=0 latency=2\n\
            node a room=lab kinds=temperature link=zb\n\
            node b room=lab kinds=temperature link=zb\n\
            edge hub a\nedge a b\n";
        let mut p = Platform::from_text(text, PlatformConfig::new(3)).unwrap();
        p.run(35);
        let got = p.store().read().query_range(&RangeQuery::all());
        // a is one hop (2 ticks), b two hops (4 ticks); readings at 10, 20, 30.
        let per_node = |n: &str| got.iter().filter(|r| r.node_id == n).count();
        assert_eq!((per_node("a"), per_node("b")), (3, 3));
        p.run(2);
        let got = p.store().read().query_range(&RangeQuery::all());
        assert_eq!(got.iter().filter(|r| r.node_id == "b").count(), 3);
    }

    #[test]
    fn report_for_unknown_room_is_no_data() {
        let mut p = Platform::from_text(LAB, PlatformConfig::new(1)).unwrap();
        p.run(10);
        let err = p.room_report("nope", p.scenario().start, p.clock().timestamp(p.now())).unwrap_err();
        assert!(err.to_string().contains("NoData"));
    }
}
