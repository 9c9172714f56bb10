//! Occupant thermal votes and the preferred-temperature model
//! `vote = a * (T - T_pref)`, fitted by ordinary least squares.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::thermostat::SAFE_SETPOINT_C;
use super::{decode, encode, AppError};
use crate::bus::{Bus, Envelope, Handled, Registration, ServiceDescriptor, Subscription};
use crate::types::{is_valid_id, ReadingEvent, Timestamp};

pub const SERVICE: &str = "comfort";
pub const MIN_FIT_VOTES: usize = 5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ComfortError {
    #[error("vote {0} outside [-2, 2]")]
    VoteOutOfRange(i64),
    #[error("temperature at vote is not finite")]
    NonFinite,
    #[error("invalid id '{0}'")]
    BadId(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComfortFeedback {
    pub user: String,
    pub room_id: String,
    pub at: Timestamp,
    pub thermal_vote: i64,
    pub humidity_vote: i64,
    pub temp_at_vote_c: f64,
}

impl ComfortFeedback {
    pub fn validate(&self) -> Result<(), ComfortError> {
        for v in [self.thermal_vote, self.humidity_vote] {
            if !(-2..=2).contains(&v) {
                return Err(ComfortError::VoteOutOfRange(v));
            }
        }
        if !self.temp_at_vote_c.is_finite() {
            return Err(ComfortError::NonFinite);
        }
        for id in [&self.user, &self.room_id] {
            if !is_valid_id(id) {
                return Err(ComfortError::BadId(id.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Preference {
    /// Zero crossing of the fitted line.
    Fitted { t_pref: f64, slope: f64, votes: usize },
    /// Median temperature among neutral votes.
    Fallback { t_pref: f64, votes: usize },
    Insufficient,
}

impl Preference {
    pub fn t_pref(&self) -> Option<f64> {
        match *self {
            Preference::Fitted { t_pref, .. } | Preference::Fallback { t_pref, .. } => Some(t_pref),
            Preference::Insufficient => None,
        }
    }
}

/// Fits `(temperature, thermal vote)` pairs. Needs at least five votes over
/// at least two distinct temperatures and a positive slope; otherwise falls
/// back to the median temperature of the neutral votes.
pub fn estimate_preference(votes: &[(f64, i64)]) -> Preference {
    let n = votes.len();
    let distinct = {
        let mut ts: Vec<f64> = votes.iter().map(|v| v.0).collect();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        ts.len()
    };
    if n >= MIN_FIT_VOTES && distinct >= 2 {
        let nf = n as f64;
        let mean_t = votes.iter().map(|v| v.0).sum::<f64>() / nf;
        let mean_v = votes.iter().map(|v| v.1 as f64).sum::<f64>() / nf;
        let var_t = votes.iter().map(|v| (v.0 - mean_t).powi(2)).sum::<f64>() / nf;
        let cov = votes.iter().map(|v| (v.0 - mean_t) * (v.1 as f64 - mean_v)).sum::<f64>() / nf;
        let slope = cov / var_t;
        if slope > 0.0 {
            return Preference::Fitted { t_pref: mean_t - mean_v * var_t / cov, slope, votes: n };
        }
    }
    let mut neutral: Vec<f64> = votes.iter().filter(|v| v.1 == 0).map(|v| v.0).collect();
    if neutral.is_empty() {
        return Preference::Insufficient;
    }
    neutral.sort_by(f64::total_cmp);
    let m = neutral.len();
    let median = if m % 2 == 1 { neutral[m / 2] } else { (neutral[m / 2 - 1] + neutral[m / 2]) / 2.0 };
    Preference::Fallback { t_pref: median, votes: n }
}

#[derive(Debug, Clone)]
pub enum Selector<'a> {
    Room(&'a str),
    User(&'a str),
}

#[derive(Debug, Default, Clone)]
pub struct FeedbackLog {
    entries: Vec<ComfortFeedback>,
    counts: BTreeMap<(String, String), usize>,
}

impl FeedbackLog {
    /// Stores a vote and returns how many the user has given in that room.
    pub fn record(&mut self, fb: ComfortFeedback) -> Result<usize, ComfortError> {
        fb.validate()?;
        let n = self.counts.entry((fb.room_id.clone(), fb.user.clone())).or_default();
        *n += 1;
        let n = *n;
        self.entries.push(fb);
        Ok(n)
    }

    pub fn count(&self, room_id: &str, user: &str) -> usize {
        self.counts.get(&(room_id.to_string(), user.to_string())).copied().unwrap_or(0)
    }

    pub fn entries(&self) -> &[ComfortFeedback] {
        &self.entries
    }

    pub fn preference(&self, sel: Selector<'_>) -> Preference {
        let votes: Vec<(f64, i64)> = self
            .entries
            .iter()
            .filter(|f| match sel {
                Selector::Room(r) => f.room_id == r,
                Selector::User(u) => f.user == u,
            })
            .map(|f| (f.temp_at_vote_c, f.thermal_vote))
            .collect();
        estimate_preference(&votes)
    }
}

/// Setpoint suggestion for a preference, clamped to the safe band.
pub fn recommended_setpoint(p: &Preference) -> Option<f64> {
    p.t_pref().map(|t| t.clamp(SAFE_SETPOINT_C.0, SAFE_SETPOINT_C.1))
}

#[derive(Deserialize)]
struct SubmitParams {
    user: String,
    room: String,
    thermal: i64,
    #[serde(default)]
    humidity: i64,
    #[serde(default)]
    temp: Option<f64>,
    #[serde(default)]
    at: Option<Timestamp>,
}

#[derive(Deserialize)]
struct PrefParams {
    #[serde(default)]
    room: Option<String>,
    #[serde(default)]
    user: Option<String>,
}

struct ComfortState {
    log: FeedbackLog,
    temp_rooms: HashMap<String, String>,
    latest: BTreeMap<String, (Timestamp, f64)>,
}

pub struct ComfortApp {
    _service: Registration,
    _subs: Vec<Subscription>,
}

impl ComfortApp {
    /// `temp_nodes` maps temperature node ids to rooms; the latest reading
    /// stands in for votes submitted without a temperature.
    pub fn register(bus: &Bus, temp_nodes: &[(String, String)]) -> Result<ComfortApp, AppError> {
        let shared = Arc::new(Mutex::new(ComfortState {
            log: FeedbackLog::default(),
            temp_rooms: temp_nodes.iter().cloned().collect(),
            latest: BTreeMap::new(),
        }));
        let st = Arc::clone(&shared);
        let temps = bus.subscribe("readings.temperature", move |_, env| {
            let Ok(ev) = decode::<ReadingEvent>(&env.payload) else { return };
            let mut s = st.lock().expect("comfort state");
            if let Some(room) = s.temp_rooms.get(&ev.reading.node_id).cloned() {
                s.latest.insert(room, (ev.reading.at, ev.reading.value));
            }
        });
        let st = Arc::clone(&shared);
        let service = bus.register(ServiceDescriptor::new(SERVICE, ["submit", "preference", "votes"]), move |_, env: &Envelope| {
            handle(&mut st.lock().expect("comfort state"), env)
        })?;
        Ok(ComfortApp { _service: service, _subs: vec![temps] })
    }
}

fn handle(s: &mut ComfortState, env: &Envelope) -> Result<Handled, String> {
    match env.operation.as_str() {
        "submit" => {
            let p: SubmitParams = decode(&env.payload)?;
            let latest = s.latest.get(&p.room).copied();
            let temp = p
                .temp
                .or(latest.map(|l| l.1))
                .ok_or_else(|| format!("NoData: no temperature known for room '{}'", p.room))?;
            let at = p.at.or(latest.map(|l| l.0)).unwrap_or(Timestamp(0));
            let fb = ComfortFeedback {
                user: p.user,
                room_id: p.room.clone(),
                at,
                thermal_vote: p.thermal,
                humidity_vote: p.humidity,
                temp_at_vote_c: temp,
            };
            let count = s.log.record(fb).map_err(|e| match e {
                ComfortError::VoteOutOfRange(_) => format!("VoteOutOfRange: {e}"),
                _ => format!("BadParams: {e}"),
            })?;
            let pref = s.log.preference(Selector::Room(&p.room));
            Ok(Handled::Reply(json!({
                "count": count,
                "preference": pref,
                "recommended_setpoint_c": recommended_setpoint(&pref),
            })))
        }
        "preference" => {
            let p: PrefParams = decode(&env.payload)?;
            let pref = match (&p.room, &p.user) {
                (Some(r), None) => s.log.preference(Selector::Room(r)),
                (None, Some(u)) => s.log.preference(Selector::User(u)),
                _ => return Err("BadParams: give exactly one of room or user".into()),
            };
            Ok(Handled::Reply(json!({"preference": pref, "recommended_setpoint_c": recommended_setpoint(&pref)})))
        }
        "votes" => Ok(Handled::Reply(encode(&s.log.entries))),
        op => Err(format!("unsupported operation '{op}'")),
    }
}
