//! Domain types shared by every subsystem: simulated time, sensor kinds,
//! readings, MAC addresses and actuation commands.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Simulated milliseconds per tick.
pub const TICK_MS: i64 = 100;

/// Default sensor period in ticks (one second at the default tick size).
pub const DEFAULT_PERIOD_TICKS: u64 = 10;

pub const MINUTE_MS: i64 = 60_000;
pub const HOUR_MS: i64 = 60 * MINUTE_MS;

/// Logical clock tick.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Tick(pub u64);

impl Tick {
    pub fn plus(self, n: u64) -> Tick {
        Tick(self.0 + n)
    }
}

impl fmt::Display for Tick {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// UTC instant with millisecond resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(pub i64);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid timestamp '{0}': expected YYYY-MM-DDTHH:MM:SS.mmmZ")]
pub struct TimestampError(pub String);

impl Timestamp {
    pub const MIN: Timestamp = Timestamp(i64::MIN);
    pub const MAX: Timestamp = Timestamp(i64::MAX);

    pub fn millis(self) -> i64 {
        self.0
    }

    pub fn plus_ms(self, ms: i64) -> Timestamp {
        Timestamp(self.0.saturating_add(ms))
    }

    /// ISO-8601 with millisecond precision and a `Z` suffix.
    pub fn to_iso(self) -> String {
        match DateTime::<Utc>::from_timestamp_millis(self.0) {
            Some(dt) => dt.format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string(),
            None => format!("@{}ms", self.0),
        }
    }

    /// Strict inverse of [`Timestamp::to_iso`]: anything that would not
    /// re-format to the same bytes is rejected.
    pub fn parse_iso(s: &str) -> Result<Timestamp, TimestampError> {
        let err = || TimestampError(s.to_string());
        let body = s.strip_suffix('Z').ok_or_else(err)?;
        let naive = NaiveDateTime::parse_from_str(body, "%Y-%m-%dT%H:%M:%S%.3f").map_err(|_| err())?;
        let ts = Timestamp(naive.and_utc().timestamp_millis());
        if ts.to_iso() != s {
            return Err(err());
        }
        Ok(ts)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_iso())
    }
}

impl FromStr for Timestamp {
    type Err = TimestampError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Timestamp::parse_iso(s)
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_iso())
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Timestamp::parse_iso(&s).map_err(serde::de::Error::custom)
    }
}

/// Maps ticks onto wall-clock timestamps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Clock {
    pub epoch: Timestamp,
    pub tick_ms: i64,
}

impl Clock {
    /// 2017-03-01T00:00:00.000Z
    pub const DEFAULT_EPOCH: Timestamp = Timestamp(1_488_326_400_000);

    pub fn new(epoch: Timestamp) -> Clock {
        Clock { epoch, tick_ms: TICK_MS }
    }

    pub fn timestamp(&self, tick: Tick) -> Timestamp {
        Timestamp(self.epoch.0 + tick.0 as i64 * self.tick_ms)
    }

    /// Tick containing `ts`, or `None` if `ts` precedes the epoch.
    pub fn tick_at(&self, ts: Timestamp) -> Option<Tick> {
        let d = ts.0.checked_sub(self.epoch.0)?;
        (d >= 0).then(|| Tick((d / self.tick_ms) as u64))
    }

    pub fn ticks_for_ms(&self, ms: i64) -> u64 {
        (ms / self.tick_ms).max(0) as u64
    }

    pub fn tick_seconds(&self) -> f64 {
        self.tick_ms as f64 / 1000.0
    }
}

impl Default for Clock {
    fn default() -> Self {
        Clock::new(Clock::DEFAULT_EPOCH)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SensorKind {
    Temperature,
    Humidity,
    Luminance,
    Door,
    PresenceBeacon,
    PeopleCounter,
    Relay,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown sensor kind '{0}'")]
pub struct UnknownKind(pub String);

impl SensorKind {
    pub const ALL: [SensorKind; 7] = [
        SensorKind::Temperature,
        SensorKind::Humidity,
        SensorKind::Luminance,
        SensorKind::Door,
        SensorKind::PresenceBeacon,
        SensorKind::PeopleCounter,
        SensorKind::Relay,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SensorKind::Temperature => "temperature",
            SensorKind::Humidity => "humidity",
            SensorKind::Luminance => "luminance",
            SensorKind::Door => "door",
            SensorKind::PresenceBeacon => "presence-beacon",
            SensorKind::PeopleCounter => "people-counter",
            SensorKind::Relay => "relay",
        }
    }

    /// Kinds that sample a continuous room quantity.
    pub fn is_measuring(self) -> bool {
        matches!(self, SensorKind::Temperature | SensorKind::Humidity | SensorKind::Luminance)
    }

    /// Unit carried by readings of this kind. Relays do not produce readings.
    pub fn unit(self) -> Option<Unit> {
        match self {
            SensorKind::Temperature => Some(Unit::Celsius),
            SensorKind::Humidity => Some(Unit::PctRh),
            SensorKind::Luminance => Some(Unit::Lux),
            SensorKind::Door => Some(Unit::Bool),
            SensorKind::PeopleCounter => Some(Unit::Count),
            SensorKind::PresenceBeacon => Some(Unit::Dbm),
            SensorKind::Relay => None,
        }
    }
}

impl fmt::Display for SensorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SensorKind {
    type Err = UnknownKind;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SensorKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| UnknownKind(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    Celsius,
    PctRh,
    Lux,
    Bool,
    Count,
    Dbm,
}

impl Unit {
    pub fn as_str(self) -> &'static str {
        match self {
            Unit::Celsius => "celsius",
            Unit::PctRh => "pct_rh",
            Unit::Lux => "lux",
            Unit::Bool => "bool",
            Unit::Count => "count",
            Unit::Dbm => "dbm",
        }
    }
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Unit {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Unit::Celsius, Unit::PctRh, Unit::Lux, Unit::Bool, Unit::Count, Unit::Dbm]
            .into_iter()
            .find(|u| u.as_str() == s)
            .ok_or_else(|| format!("unknown unit '{s}'"))
    }
}

/// Identifiers (nodes, rooms, links, users) are restricted so they can be
/// written into CSV and scenario files without quoting.
pub fn is_valid_id(s: &str) -> bool {
    !s.is_empty()
        && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.' | ':'))
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReadingError {
    #[error("kind {0} does not produce readings")]
    NoUnit(SensorKind),
    #[error("unit {unit} does not match kind {kind}")]
    UnitMismatch { kind: SensorKind, unit: Unit },
    #[error("value is not finite")]
    NonFinite,
    #[error("invalid node id '{0}'")]
    BadNodeId(String),
}

/// One timestamped sensor sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reading {
    #[serde(rename = "timestamp")]
    pub at: Timestamp,
    pub node_id: String,
    #[serde(rename = "sensor")]
    pub kind: SensorKind,
    pub value: f64,
    pub unit: Unit,
}

impl Reading {
    /// Builds a reading with the unit implied by `kind`.
    pub fn new(at: Timestamp, node_id: impl Into<String>, kind: SensorKind, value: f64) -> Result<Reading, ReadingError> {
        let unit = kind.unit().ok_or(ReadingError::NoUnit(kind))?;
        let r = Reading { at, node_id: node_id.into(), kind, value, unit };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), ReadingError> {
        if !is_valid_id(&self.node_id) {
            return Err(ReadingError::BadNodeId(self.node_id.clone()));
        }
        match self.kind.unit() {
            None => return Err(ReadingError::NoUnit(self.kind)),
            Some(u) if u != self.unit => {
                return Err(ReadingError::UnitMismatch { kind: self.kind, unit: self.unit })
            }
            _ => {}
        }
        if !self.value.is_finite() {
            return Err(ReadingError::NonFinite);
        }
        Ok(())
    }
}

/// A reading as published on the bus, tagged with the room when the hub knows it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReadingEvent {
    pub reading: Reading,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub room: Option<String>,
}

/// 48-bit hardware address.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MacAddr(pub [u8; 6]);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("malformed MAC address '{0}'")]
pub struct MacError(pub String);

impl FromStr for MacAddr {
    type Err = MacError;

    /// Accepts `aa:bb:cc:dd:ee:ff`, `aa-bb-..` or twelve bare hex digits.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || MacError(s.to_string());
        let hex: String = if s.len() == 17 {
            let sep = s.as_bytes()[2];
            if sep != b':' && sep != b'-' {
                return Err(err());
            }
            let parts: Vec<&str> = s.split(sep as char).collect();
            if parts.len() != 6 || parts.iter().any(|p| p.len() != 2) {
                return Err(err());
            }
            parts.concat()
        } else if s.len() == 12 {
            s.to_string()
        } else {
            return Err(err());
        };
        let mut out = [0u8; 6];
        for (i, byte) in out.iter_mut().enumerate() {
            *byte = u8::from_str_radix(hex.get(2 * i..2 * i + 2).ok_or_else(err)?, 16).map_err(|_| err())?;
        }
        Ok(MacAddr(out))
    }
}

impl fmt::Display for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        write!(f, "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}", b[0], b[1], b[2], b[3], b[4], b[5])
    }
}

impl fmt::Debug for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MacAddr({self})")
    }
}

impl Serialize for MacAddr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MacAddr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandSource {
    Auto,
    Manual,
}

impl fmt::Display for CommandSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CommandSource::Auto => "auto",
            CommandSource::Manual => "manual",
        })
    }
}

/// A relay state change and who asked for it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActuationCommand {
    pub at: Timestamp,
    pub node_id: String,
    pub on: bool,
    pub source: CommandSource,
}

/// Formats a value with at most six fractional digits, trailing zeros
/// trimmed and no `.0` on integers. Negative zero prints as `0`.
pub fn format_value(v: f64) -> String {
    let mut s = format!("{v:.6}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    if s == "-0" {
        s = "0".to_string();
    }
    s
}
