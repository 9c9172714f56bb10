//! Per-room occupancy from people-counter deltas and beacon sightings.
//!
//! The fused count is `max(clamped counter sum, live MACs)`. A MAC is live
//! at `t` when its latest sighting `s <= t` has `t - s <= lease`. The whole
//! input history is kept so estimates and timelines can be asked for any
//! past instant.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::types::{MacAddr, Reading, SensorKind, Timestamp, MINUTE_MS};

pub const DEFAULT_LEASE_MS: i64 = 5 * MINUTE_MS;
pub const DEFAULT_MIN_GAP_MS: i64 = 10 * MINUTE_MS;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OccupancyError {
    #[error("unknown room '{0}'")]
    RoomUnknown(String),
    #[error("node '{0}' is not attached to any room")]
    NodeUnknown(String),
    #[error("expected a {expected} reading, got {got}")]
    WrongKind { expected: SensorKind, got: SensorKind },
    #[error("counter delta must be a whole number, got {0}")]
    BadDelta(f64),
    #[error("rssi must be <= 0 dBm, got {0}")]
    BadRssi(f64),
    #[error("counter reading at {got} precedes the previous one at {last}")]
    OutOfOrder { last: String, got: String },
    #[error("min_gap must be positive")]
    ZeroGap,
    #[error("range start is after its end")]
    BadRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresenceSighting {
    pub mac: MacAddr,
    pub room_id: String,
    pub at: Timestamp,
    pub rssi_dbm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Confidence {
    High,
    Low,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupancyEstimate {
    pub room_id: String,
    pub at: Timestamp,
    pub count: u32,
    pub known_macs: BTreeSet<MacAddr>,
    pub confidence: Confidence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbsenceInterval {
    pub room_id: String,
    pub start: Timestamp,
    /// `None` when the room is still empty at the end of the queried range.
    pub end: Option<Timestamp>,
}

/// Constant-count stretch `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: Timestamp,
    pub end: Timestamp,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OccupancyInput {
    Counter(Reading),
    Door(Reading),
    Sighting(PresenceSighting),
}

#[derive(Debug, Clone, Copy)]
struct CounterState {
    at: Timestamp,
    total: u32,
    clamped: bool,
}

#[derive(Debug, Default, Clone)]
struct RoomTrack {
    counter: Vec<CounterState>,
    sightings: HashMap<MacAddr, Vec<Timestamp>>,
}

impl RoomTrack {
    fn counter_at(&self, at: Timestamp) -> (u32, bool) {
        match self.counter.partition_point(|c| c.at <= at) {
            0 => (0, false),
            i => (self.counter[i - 1].total, self.counter[i - 1].clamped),
        }
    }

    fn live_macs(&self, at: Timestamp, lease_ms: i64) -> BTreeSet<MacAddr> {
        self.sightings
            .iter()
            .filter(|(_, times)| {
                let i = times.partition_point(|&s| s <= at);
                i > 0 && at.0 - times[i - 1].0 <= lease_ms
            })
            .map(|(mac, _)| *mac)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct OccupancyEngine {
    lease_ms: i64,
    rooms: BTreeMap<String, RoomTrack>,
    node_rooms: HashMap<String, String>,
}

impl Default for OccupancyEngine {
    fn default() -> Self {
        OccupancyEngine::new(DEFAULT_LEASE_MS)
    }
}

impl OccupancyEngine {
    pub fn new(lease_ms: i64) -> OccupancyEngine {
        OccupancyEngine { lease_ms, rooms: BTreeMap::new(), node_rooms: HashMap::new() }
    }

    pub fn lease_ms(&self) -> i64 {
        self.lease_ms
    }

    pub fn add_room(&mut self, room_id: &str) {
        self.rooms.entry(room_id.to_string()).or_default();
    }

    /// Declares which room a counter or door node reports for.
    pub fn attach_node(&mut self, node_id: &str, room_id: &str) -> Result<(), OccupancyError> {
        if !self.rooms.contains_key(room_id) {
            return Err(OccupancyError::RoomUnknown(room_id.to_string()));
        }
        self.node_rooms.insert(node_id.to_string(), room_id.to_string());
        Ok(())
    }

    pub fn rooms(&self) -> impl Iterator<Item = &str> {
        self.rooms.keys().map(String::as_str)
    }

    fn track(&self, room_id: &str) -> Result<&RoomTrack, OccupancyError> {
        self.rooms.get(room_id).ok_or_else(|| OccupancyError::RoomUnknown(room_id.to_string()))
    }

    fn room_of(&self, node_id: &str) -> Result<String, OccupancyError> {
        self.node_rooms.get(node_id).cloned().ok_or_else(|| OccupancyError::NodeUnknown(node_id.to_string()))
    }

    pub fn update(&mut self, input: OccupancyInput) -> Result<OccupancyEstimate, OccupancyError> {
        match input {
            OccupancyInput::Counter(r) => {
                expect_kind(&r, SensorKind::PeopleCounter)?;
                if r.value.fract() != 0.0 {
                    return Err(OccupancyError::BadDelta(r.value));
                }
                let room = self.room_of(&r.node_id)?;
                let track = self.rooms.get_mut(&room).expect("attached rooms exist");
                let (total, _) = match track.counter.last() {
                    Some(last) if r.at < last.at => {
                        return Err(OccupancyError::OutOfOrder { last: last.at.to_iso(), got: r.at.to_iso() })
                    }
                    Some(last) => (last.total, last.clamped),
                    None => (0, false),
                };
                let raw = total as i64 + r.value as i64;
                track.counter.push(CounterState { at: r.at, total: raw.max(0) as u32, clamped: raw < 0 });
                self.current_estimate(&room, r.at)
            }
            OccupancyInput::Door(r) => {
                expect_kind(&r, SensorKind::Door)?;
                let room = self.room_of(&r.node_id)?;
                self.current_estimate(&room, r.at)
            }
            OccupancyInput::Sighting(s) => {
                if !(s.rssi_dbm <= 0.0) {
                    return Err(OccupancyError::BadRssi(s.rssi_dbm));
                }
                let track =
                    self.rooms.get_mut(&s.room_id).ok_or_else(|| OccupancyError::RoomUnknown(s.room_id.clone()))?;
                let times = track.sightings.entry(s.mac).or_default();
                let pos = times.partition_point(|&t| t <= s.at);
                times.insert(pos, s.at);
                self.current_estimate(&s.room_id, s.at)
            }
        }
    }

    pub fn current_estimate(&self, room_id: &str, at: Timestamp) -> Result<OccupancyEstimate, OccupancyError> {
        let track = self.track(room_id)?;
        let (total, clamped) = track.counter_at(at);
        let known_macs = track.live_macs(at, self.lease_ms);
        let macs = known_macs.len() as u32;
        let confidence = if total.abs_diff(macs) <= 1 && !clamped { Confidence::High } else { Confidence::Low };
        Ok(OccupancyEstimate { room_id: room_id.to_string(), at, count: total.max(macs), known_macs, confidence })
    }

    pub fn present_macs(&self, room_id: &str, at: Timestamp) -> Result<BTreeSet<MacAddr>, OccupancyError> {
        Ok(self.track(room_id)?.live_macs(at, self.lease_ms))
    }

    /// Piecewise-constant count over `[from, to)`, adjacent equal spans merged.
    pub fn timeline(&self, room_id: &str, from: Timestamp, to: Timestamp) -> Result<Vec<Span>, OccupancyError> {
        let track = self.track(room_id)?;
        if from > to {
            return Err(OccupancyError::BadRange);
        }
        let mut cuts: BTreeSet<Timestamp> = BTreeSet::from([from]);
        cuts.extend(track.counter.iter().map(|c| c.at));
        for times in track.sightings.values() {
            for &s in times {
                cuts.insert(s);
                cuts.insert(s.plus_ms(self.lease_ms + 1));
            }
        }
        let cuts: Vec<Timestamp> = cuts.range(from..to).copied().collect();
        let mut spans: Vec<Span> = Vec::new();
        for (i, &start) in cuts.iter().enumerate() {
            let end = cuts.get(i + 1).copied().unwrap_or(to);
            let count = self.current_estimate(room_id, start)?.count;
            match spans.last_mut() {
                Some(prev) if prev.count == count => prev.end = end,
                _ => spans.push(Span { start, end, count }),
            }
        }
        Ok(spans)
    }

    /// Maximal stretches inside `[from, to)` where the fused count stays at
    /// zero for at least `min_gap_ms`.
    pub fn absence_intervals(
        &self,
        room_id: &str,
        from: Timestamp,
        to: Timestamp,
        min_gap_ms: i64,
    ) -> Result<Vec<AbsenceInterval>, OccupancyError> {
        if min_gap_ms <= 0 {
            return Err(OccupancyError::ZeroGap);
        }
        Ok(self
            .timeline(room_id, from, to)?
            .into_iter()
            .filter(|s| s.count == 0 && s.end.0 - s.start.0 >= min_gap_ms)
            .map(|s| AbsenceInterval {
                room_id: room_id.to_string(),
                start: s.start,
                end: (s.end < to).then_some(s.end),
            })
            .collect())
    }
}

fn expect_kind(r: &Reading, expected: SensorKind) -> Result<(), OccupancyError> {
    if r.kind != expected {
        return Err(OccupancyError::WrongKind { expected, got: r.kind });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const T0: i64 = 1_488_326_400_000;

    fn at(ms: i64) -> Timestamp {
        Timestamp(T0 + ms)
    }

    fn engine() -> OccupancyEngine {
        let mut e = OccupancyEngine::default();
        e.add_room("r1");
        e.attach_node("pc", "r1").unwrap();
        e.attach_node("door", "r1").unwrap();
        e
    }

    fn count(ms: i64, delta: f64) -> OccupancyInput {
        OccupancyInput::Counter(Reading::new(at(ms), "pc", SensorKind::PeopleCounter, delta).unwrap())
    }

    fn seen(ms: i64, mac: u8) -> OccupancyInput {
        OccupancyInput::Sighting(PresenceSighting {
            mac: MacAddr([0, 0, 0, 0, 0, mac]),
            room_id: "r1".into(),
            at: at(ms),
            rssi_dbm: -60.0,
        })
    }

    #[test]
    fn fusion_examples() {
        let mut e = engine();
        let est = e.update(count(0, 1.0)).unwrap();
        assert_eq!((est.count, est.confidence), (1, Confidence::High));

        let mut e = engine();
        let est = e.update(count(0, -1.0)).unwrap();
        assert_eq!((est.count, est.confidence), (0, Confidence::Low));

        let mut e = engine();
        e.update(seen(0, 1)).unwrap();
        let est = e.update(seen(0, 2)).unwrap();
        assert_eq!((est.count, est.confidence), (2, Confidence::Low));
    }

    #[test]
    fn plus_then_minus_restores() {
        let mut e = engine();
        e.update(count(0, 1.0)).unwrap();
        e.update(count(1, 1.0)).unwrap();
        e.update(count(2, -1.0)).unwrap();
        assert_eq!(e.current_estimate("r1", at(2)).unwrap().count, 1);
    }

    #[test]
    fn door_does_not_count() {
        let mut e = engine();
        let est = e.update(OccupancyInput::Door(Reading::new(at(0), "door", SensorKind::Door, 1.0).unwrap())).unwrap();
        assert_eq!(est.count, 0);
        assert!(matches!(
            e.update(OccupancyInput::Door(Reading::new(at(0), "pc", SensorKind::PeopleCounter, 1.0).unwrap())),
            Err(OccupancyError::WrongKind { .. })
        ));
    }

    #[test]
    fn errors() {
        let mut e = engine();
        assert!(matches!(e.current_estimate("r9", at(0)), Err(OccupancyError::RoomUnknown(_))));
        let stray = Reading::new(at(0), "other", SensorKind::PeopleCounter, 1.0).unwrap();
        assert!(matches!(e.update(OccupancyInput::Counter(stray)), Err(OccupancyError::NodeUnknown(_))));
        e.update(count(10, 1.0)).unwrap();
        assert!(matches!(e.update(count(5, 1.0)), Err(OccupancyError::OutOfOrder { .. })));
        assert!(matches!(e.update(count(10, 0.5)), Err(OccupancyError::BadDelta(_))));
        assert!(matches!(e.absence_intervals("r1", at(0), at(1), 0), Err(OccupancyError::ZeroGap)));
        assert!(matches!(e.attach_node("x", "r9"), Err(OccupancyError::RoomUnknown(_))));
    }

    #[test]
    fn leases_expire() {
        let mut e = engine();
        e.update(seen(0, 1)).unwrap();
        assert_eq!(e.current_estimate("r1", at(DEFAULT_LEASE_MS)).unwrap().count, 1);
        assert_eq!(e.current_estimate("r1", at(DEFAULT_LEASE_MS + 1)).unwrap().count, 0);
        assert!(e.present_macs("r1", at(-1)).unwrap().is_empty());
        e.update(seen(60_000, 2)).unwrap();
        let live = e.present_macs("r1", at(DEFAULT_LEASE_MS + 1)).unwrap();
        assert_eq!(live, BTreeSet::from([MacAddr([0, 0, 0, 0, 0, 2])]));
    }

    #[test]
    fn absence_examples() {
        let mut e = engine();
        e.update(count(0, 1.0)).unwrap();
        let day = 24 * 60 * MINUTE_MS;
        assert!(e.absence_intervals("r1", at(0), at(day), DEFAULT_MIN_GAP_MS).unwrap().is_empty());

        let mut e = engine();
        e.update(count(0, 1.0)).unwrap();
        e.update(count(1000, -1.0)).unwrap();
        e.update(count(1000 + DEFAULT_MIN_GAP_MS, 1.0)).unwrap();
        e.update(count(2000 + DEFAULT_MIN_GAP_MS, -1.0)).unwrap();
        e.update(count(3000 + DEFAULT_MIN_GAP_MS, 1.0)).unwrap();
        let got = e.absence_intervals("r1", at(0), at(day), DEFAULT_MIN_GAP_MS).unwrap();
        assert_eq!(
            got,
            vec![AbsenceInterval { room_id: "r1".into(), start: at(1000), end: Some(at(1000 + DEFAULT_MIN_GAP_MS)) }]
        );
    }

    #[test]
    fn open_ended_absence() {
        let mut e = engine();
        e.update(count(0, 1.0)).unwrap();
        e.update(count(1000, -1.0)).unwrap();
        let got = e.absence_intervals("r1", at(0), at(60 * MINUTE_MS), DEFAULT_MIN_GAP_MS).unwrap();
        assert_eq!(got, vec![AbsenceInterval { room_id: "r1".into(), start: at(1000), end: None }]);
    }

    #[test]
    fn timeline_covers_range() {
        let mut e = engine();
        e.update(seen(100, 1)).unwrap();
        let spans = e.timeline("r1", at(0), at(DEFAULT_LEASE_MS * 2)).unwrap();
        assert_eq!(
            spans,
            vec![
                Span { start: at(0), end: at(100), count: 0 },
                Span { start: at(100), end: at(100 + DEFAULT_LEASE_MS + 1), count: 1 },
                Span { start: at(100 + DEFAULT_LEASE_MS + 1), end: at(DEFAULT_LEASE_MS * 2), count: 0 },
            ]
        );
        assert!(e.timeline("r1", at(5), at(5)).unwrap().is_empty());
    }
}
