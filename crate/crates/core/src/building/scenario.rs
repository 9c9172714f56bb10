//! Line-oriented scenario files.
//!
//! ```text
//! start 2017-03-01T00:00:00.000Z
//! room lab temp=21 t_env=10 tau=72000 heater_w=1000 c=360000
//! node tag-1 room=lab kinds=temperature,humidity,luminance sigma=0.1
//! node heater-1 room=lab kinds=relay drives=heater
//! node band-1 room=lab kinds=presence-beacon mac=c8:0f:10:aa:bb:01
//! event 600 lab enter mac=c8:0f:10:aa:bb:01
//! profile lab humidity 0=40 36000=45
//! link zb0 mesh loss=0 latency=2
//! edge hub tag-9
//! feedback 9000 lab alice thermal=-1 humidity=0 temp=20.5
//! arm 0 lab
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::str::FromStr;

use crate::transport::HUB;
use crate::types::{is_valid_id, Clock, MacAddr, SensorKind, Tick, Timestamp, DEFAULT_PERIOD_TICKS};

use super::{NodeSpec, OccupantEvent, OccupantEventKind, RelayLoad};

/// Point-to-point links that exist even when the scenario does not declare them.
pub const DEFAULT_BLE_LINK: &str = "ble0";
pub const DEFAULT_ZWAVE_LINK: &str = "zw0";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScenarioError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("invalid scenario: {0}")]
    Validation(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoomDecl {
    pub id: String,
    pub temp_c: f64,
    pub t_env_c: f64,
    pub tau_ticks: u64,
    pub heater_w: f64,
    pub c_j_per_k: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ProfileQuantity {
    Humidity,
    Lux,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileDecl {
    pub room_id: String,
    pub quantity: ProfileQuantity,
    /// Breakpoints sorted by tick; the value holds until the next breakpoint.
    pub points: Vec<(Tick, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkKind {
    Ble,
    Zwave,
    Mesh,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkDecl {
    pub id: String,
    pub kind: LinkKind,
    pub loss_prob: f64,
    pub latency_ticks: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackDecl {
    pub at: Tick,
    pub room_id: String,
    pub user: String,
    pub thermal_vote: i32,
    pub humidity_vote: i32,
    pub temp_c: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArmDecl {
    pub at: Tick,
    pub room_id: String,
    pub armed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub start: Timestamp,
    pub rooms: Vec<RoomDecl>,
    pub nodes: Vec<NodeSpec>,
    pub events: Vec<OccupantEvent>,
    pub profiles: Vec<ProfileDecl>,
    pub links: Vec<LinkDecl>,
    pub mesh_edges: Vec<(String, String)>,
    pub feedback: Vec<FeedbackDecl>,
    pub arming: Vec<ArmDecl>,
}

impl Scenario {
    pub fn clock(&self) -> Clock {
        Clock::new(self.start)
    }

    pub fn room(&self, id: &str) -> Option<&RoomDecl> {
        self.rooms.iter().find(|r| r.id == id)
    }

    pub fn node(&self, id: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.node_id == id)
    }

    pub fn link(&self, id: &str) -> Option<&LinkDecl> {
        self.links.iter().find(|l| l.id == id)
    }

    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        let mut sc = Scenario {
            start: Clock::DEFAULT_EPOCH,
            rooms: Vec::new(),
            nodes: Vec::new(),
            events: Vec::new(),
            profiles: Vec::new(),
            links: Vec::new(),
            mesh_edges: Vec::new(),
            feedback: Vec::new(),
            arming: Vec::new(),
        };
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            parse_line(&mut sc, line).map_err(|reason| ScenarioError::Parse { line: idx + 1, reason })?;
        }
        sc.feedback.sort_by_key(|f| f.at);
        sc.arming.sort_by_key(|a| a.at);
        sc.validate()?;
        Ok(sc)
    }

    fn validate(&self) -> Result<(), ScenarioError> {
        let fail = |m: String| Err(ScenarioError::Validation(m));
        let mut rooms = BTreeSet::new();
        for r in &self.rooms {
            if !rooms.insert(r.id.as_str()) {
                return fail(format!("duplicate room '{}'", r.id));
            }
            if r.tau_ticks == 0 {
                return fail(format!("room '{}': tau must be positive", r.id));
            }
            if !(r.c_j_per_k > 0.0) {
                return fail(format!("room '{}': c must be positive", r.id));
            }
            if r.heater_w < 0.0 {
                return fail(format!("room '{}': heater_w must be non-negative", r.id));
            }
        }
        let links: BTreeMap<&str, LinkKind> = self.links.iter().map(|l| (l.id.as_str(), l.kind)).collect();
        if links.len() != self.links.len() {
            return fail("duplicate link id".into());
        }
        let mut ids = BTreeSet::new();
        let mut macs: HashMap<MacAddr, &str> = HashMap::new();
        for n in &self.nodes {
            if n.node_id == HUB || !ids.insert(n.node_id.as_str()) {
                return fail(format!("duplicate or reserved node id '{}'", n.node_id));
            }
            if !rooms.contains(n.room_id.as_str()) {
                return fail(format!("node '{}' references missing room '{}'", n.node_id, n.room_id));
            }
            let beacon = n.kinds.contains(&SensorKind::PresenceBeacon);
            match (beacon, n.mac) {
                (true, None) => return fail(format!("presence-beacon node '{}' needs mac=", n.node_id)),
                (false, Some(_)) => return fail(format!("node '{}': mac= is only valid on presence-beacon nodes", n.node_id)),
                (true, Some(m)) => {
                    if let Some(other) = macs.insert(m, &n.node_id) {
                        return fail(format!("mac {m} used by both '{other}' and '{}'", n.node_id));
                    }
                }
                _ => {}
            }
            if n.drives.is_some() && !n.kinds.contains(&SensorKind::Relay) {
                return fail(format!("node '{}': drives= needs the relay kind", n.node_id));
            }
            if let Some(l) = &n.link {
                if !links.contains_key(l.as_str()) && l != DEFAULT_BLE_LINK && l != DEFAULT_ZWAVE_LINK {
                    return fail(format!("node '{}' references missing link '{l}'", n.node_id));
                }
            }
        }
        let mut last = Tick(0);
        // Anonymous occupants and tracked MACs per room.
        let mut anon: HashMap<&str, u64> = HashMap::new();
        let mut inside: HashMap<MacAddr, &str> = HashMap::new();
        for ev in &self.events {
            if ev.at < last {
                return fail(format!("event at tick {} is out of order (previous {})", ev.at, last));
            }
            last = ev.at;
            if !rooms.contains(ev.room_id.as_str()) {
                return fail(format!("event references missing room '{}'", ev.room_id));
            }
            match (ev.kind, ev.mac) {
                (OccupantEventKind::Enter, None) => *anon.entry(&ev.room_id).or_default() += 1,
                (OccupantEventKind::Exit, None) => {
                    let n = anon.entry(&ev.room_id).or_default();
                    if *n == 0 {
                        return fail(format!("exit at tick {} from '{}' without a matching enter", ev.at, ev.room_id));
                    }
                    *n -= 1;
                }
                (OccupantEventKind::Enter, Some(m)) => {
                    if !macs.contains_key(&m) {
                        return fail(format!("event mac {m} has no presence-beacon node"));
                    }
                    if inside.insert(m, &ev.room_id).is_some() {
                        return fail(format!("mac {m} enters at tick {} while already inside", ev.at));
                    }
                }
                (OccupantEventKind::Exit, Some(m)) => {
                    if inside.get(&m) != Some(&ev.room_id.as_str()) {
                        return fail(format!("mac {m} exits '{}' at tick {} without entering it", ev.room_id, ev.at));
                    }
                    inside.remove(&m);
                }
            }
        }
        for p in &self.profiles {
            if !rooms.contains(p.room_id.as_str()) {
                return fail(format!("profile references missing room '{}'", p.room_id));
            }
            for &(_, v) in &p.points {
                let ok = match p.quantity {
                    ProfileQuantity::Humidity => (0.0..=100.0).contains(&v),
                    ProfileQuantity::Lux => v >= 0.0,
                };
                if !ok {
                    return fail(format!("profile value {v} out of range for room '{}'", p.room_id));
                }
            }
        }
        for (a, b) in &self.mesh_edges {
            for end in [a, b] {
                if end != HUB && !ids.contains(end.as_str()) {
                    return fail(format!("mesh edge references unknown node '{end}'"));
                }
            }
            if a == b {
                return fail(format!("mesh edge self-loop on '{a}'"));
            }
        }
        for f in &self.feedback {
            if !rooms.contains(f.room_id.as_str()) {
                return fail(format!("feedback references missing room '{}'", f.room_id));
            }
        }
        for a in &self.arming {
            if !rooms.contains(a.room_id.as_str()) {
                return fail(format!("arm/disarm references missing room '{}'", a.room_id));
            }
        }
        Ok(())
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("bad value for {key}: '{v}'"))
}

fn parse_finite(key: &str, v: &str) -> Result<f64, String> {
    let x: f64 = parse_num(key, v)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(format!("{key} must be finite"))
    }
}

fn ident(s: &str) -> Result<String, String> {
    if is_valid_id(s) {
        Ok(s.to_string())
    } else {
        Err(format!("invalid identifier '{s}'"))
    }
}

/// Splits `key=value` options, rejecting unknown or repeated keys.
fn options<'a>(fields: &[&'a str], allowed: &[&str]) -> Result<BTreeMap<&'a str, &'a str>, String> {
    let mut out = BTreeMap::new();
    for f in fields {
        let (k, v) = f.split_once('=').ok_or_else(|| format!("expected key=value, got '{f}'"))?;
        if !allowed.contains(&k) {
            return Err(format!("unknown option '{k}'"));
        }
        if out.insert(k, v).is_some() {
            return Err(format!("option '{k}' given twice"));
        }
    }
    Ok(out)
}

fn required<'a>(opts: &BTreeMap<&str, &'a str>, key: &str) -> Result<&'a str, String> {
    opts.get(key).copied().ok_or_else(|| format!("missing {key}="))
}

fn parse_line(sc: &mut Scenario, line: &str) -> Result<(), String> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    match fields[0] {
        "start" => {
            let [_, ts] = fields[..] else { return Err("expected `start <timestamp>`".into()) };
            sc.start = ts.parse().map_err(|e: crate::types::TimestampError| e.to_string())?;
        }
        "room" => {
            let id = ident(fields.get(1).ok_or("missing room id")?)?;
            let o = options(&fields[2..], &["temp", "t_env", "tau", "heater_w", "c"])?;
            sc.rooms.push(RoomDecl {
                id,
                temp_c: parse_finite("temp", required(&o, "temp")?)?,
                t_env_c: parse_finite("t_env", required(&o, "t_env")?)?,
                tau_ticks: parse_num("tau", required(&o, "tau")?)?,
                heater_w: parse_finite("heater_w", required(&o, "heater_w")?)?,
                c_j_per_k: parse_finite("c", required(&o, "c")?)?,
            });
        }
        "node" => {
            let id = ident(fields.get(1).ok_or("missing node id")?)?;
            let o = options(&fields[2..], &["room", "kinds", "mac", "sigma", "period", "drives", "lux", "link"])?;
            let mut kinds = BTreeSet::new();
            for k in required(&o, "kinds")?.split(',') {
                kinds.insert(k.parse::<SensorKind>().map_err(|e| e.to_string())?);
            }
            let noise_sigma = o.get("sigma").map(|v| parse_finite("sigma", v)).transpose()?.unwrap_or(0.0);
            if noise_sigma < 0.0 {
                return Err("sigma must be non-negative".into());
            }
            let period_ticks = o.get("period").map(|v| parse_num("period", v)).transpose()?.unwrap_or(DEFAULT_PERIOD_TICKS);
            if period_ticks == 0 {
                return Err("period must be positive".into());
            }
            let drives = match o.get("drives") {
                None => None,
                Some(&"heater") => Some(RelayLoad::Heater),
                Some(&"lamp") => Some(RelayLoad::Lamp),
                Some(other) => return Err(format!("drives must be heater or lamp, got '{other}'")),
            };
            sc.nodes.push(NodeSpec {
                node_id: id,
                room_id: ident(required(&o, "room")?)?,
                kinds,
                mac: o.get("mac").map(|m| m.parse::<MacAddr>().map_err(|e| e.to_string())).transpose()?,
                noise_sigma,
                period_ticks,
                drives,
                lux_delta: o.get("lux").map(|v| parse_finite("lux", v)).transpose()?.unwrap_or(0.0),
                link: o.get("link").map(|l| ident(l)).transpose()?,
            });
        }
        "event" => {
            if fields.len() < 4 {
                return Err("expected `event <tick> <room> enter|exit [mac=<hex>]`".into());
            }
            let kind = match fields[3] {
                "enter" => OccupantEventKind::Enter,
                "exit" => OccupantEventKind::Exit,
                other => return Err(format!("expected enter or exit, got '{other}'")),
            };
            let o = options(&fields[4..], &["mac"])?;
            sc.events.push(OccupantEvent {
                at: Tick(parse_num("tick", fields[1])?),
                room_id: ident(fields[2])?,
                kind,
                mac: o.get("mac").map(|m| m.parse::<MacAddr>().map_err(|e| e.to_string())).transpose()?,
            });
        }
        "profile" => {
            if fields.len() < 4 {
                return Err("expected `profile <room> humidity|lux <tick>=<value> ...`".into());
            }
            let quantity = match fields[2] {
                "humidity" => ProfileQuantity::Humidity,
                "lux" => ProfileQuantity::Lux,
                other => return Err(format!("profile quantity must be humidity or lux, got '{other}'")),
            };
            let mut points = Vec::new();
            for p in &fields[3..] {
                let (t, v) = p.split_once('=').ok_or_else(|| format!("expected <tick>=<value>, got '{p}'"))?;
                points.push((Tick(parse_num("tick", t)?), parse_finite("value", v)?));
            }
            points.sort_by_key(|p| p.0);
            if points.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err("profile has two values for the same tick".into());
            }
            sc.profiles.push(ProfileDecl { room_id: ident(fields[1])?, quantity, points });
        }
        "link" => {
            if fields.len() < 3 {
                return Err("expected `link <id> ble|zwave|mesh [loss=<f>] [latency=<int>]`".into());
            }
            let kind = match fields[2] {
                "ble" => LinkKind::Ble,
                "zwave" => LinkKind::Zwave,
                "mesh" => LinkKind::Mesh,
                other => return Err(format!("unknown link flavor '{other}'")),
            };
            let o = options(&fields[3..], &["loss", "latency"])?;
            let loss_prob = o.get("loss").map(|v| parse_finite("loss", v)).transpose()?.unwrap_or(0.0);
            if !(0.0..=1.0).contains(&loss_prob) {
                return Err("loss must be in [0, 1]".into());
            }
            sc.links.push(LinkDecl {
                id: ident(fields[1])?,
                kind,
                loss_prob,
                latency_ticks: o.get("latency").map(|v| parse_num("latency", v)).transpose()?.unwrap_or(1),
            });
        }
        "edge" => {
            let [_, a, b] = fields[..] else { return Err("expected `edge <node> <node>`".into()) };
            sc.mesh_edges.push((ident(a)?, ident(b)?));
        }
        "feedback" => {
            if fields.len() < 4 {
                return Err("expected `feedback <tick> <room> <user> thermal=<i> humidity=<i> temp=<f>`".into());
            }
            let o = options(&fields[4..], &["thermal", "humidity", "temp"])?;
            sc.feedback.push(FeedbackDecl {
                at: Tick(parse_num("tick", fields[1])?),
                room_id: ident(fields[2])?,
                user: ident(fields[3])?,
                thermal_vote: parse_num("thermal", required(&o, "thermal")?)?,
                humidity_vote: o.get("humidity").map(|v| parse_num("humidity", v)).transpose()?.unwrap_or(0),
                temp_c: parse_finite("temp", required(&o, "temp")?)?,
            });
        }
        "arm" | "disarm" => {
            let [_, t, room] = fields[..] else { return Err(format!("expected `{} <tick> <room>`", fields[0])) };
            sc.arming.push(ArmDecl { at: Tick(parse_num("tick", t)?), room_id: ident(room)?, armed: fields[0] == "arm" });
        }
        other => return Err(format!("unknown directive '{other}'")),
    }
    Ok(())
}
