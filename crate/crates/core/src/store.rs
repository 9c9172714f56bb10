//! Append-only time-series store with a CSV surface.
//!
//! CSV layout, one reading per LF-terminated line:
//!
//! ```text
//! timestamp,node_id,sensor,value,unit
//! 2017-03-01T10:00:00.000Z,tag-1,temperature,21.5,celsius
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{self, BufRead, Write};
use std::sync::{Arc, RwLock, RwLockReadGuard, RwLockWriteGuard};

use serde::{Deserialize, Serialize};

use crate::types::{format_value, Reading, ReadingError, SensorKind, Timestamp, Unit};

pub const CSV_HEADER: &str = "timestamp,node_id,sensor,value,unit";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("reading for {node}/{kind} at {got} is earlier than {last}")]
    OutOfOrder { node: String, kind: SensorKind, last: String, got: String },
    #[error("value is not finite")]
    NonFinite,
    #[error("invalid reading: {0}")]
    Invalid(ReadingError),
    #[error("range start is after its end")]
    BadRange,
    #[error("window must be positive")]
    ZeroWindow,
    #[error("unexpected CSV header")]
    BadHeader,
    #[error("line {line}: {reason}")]
    BadRow { line: usize, reason: String },
    #[error("i/o: {0}")]
    Sink(#[from] io::Error),
}

impl From<ReadingError> for StoreError {
    fn from(e: ReadingError) -> Self {
        match e {
            ReadingError::NonFinite => StoreError::NonFinite,
            other => StoreError::Invalid(other),
        }
    }
}

pub type SeriesKey = (String, SensorKind);

/// Half-open `[from, to)` selection with optional node and kind filters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RangeQuery {
    pub from: Timestamp,
    pub to: Timestamp,
    #[serde(default)]
    pub nodes: Option<BTreeSet<String>>,
    #[serde(default)]
    pub kinds: Option<BTreeSet<SensorKind>>,
}

impl RangeQuery {
    pub fn all() -> RangeQuery {
        RangeQuery { from: Timestamp::MIN, to: Timestamp::MAX, nodes: None, kinds: None }
    }

    pub fn between(from: Timestamp, to: Timestamp) -> Result<RangeQuery, StoreError> {
        let q = RangeQuery { from, to, ..RangeQuery::all() };
        q.validate()?;
        Ok(q)
    }

    pub fn node(mut self, id: impl Into<String>) -> RangeQuery {
        self.nodes.get_or_insert_with(BTreeSet::new).insert(id.into());
        self
    }

    pub fn kind(mut self, kind: SensorKind) -> RangeQuery {
        self.kinds.get_or_insert_with(BTreeSet::new).insert(kind);
        self
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if self.from > self.to {
            return Err(StoreError::BadRange);
        }
        Ok(())
    }

    pub fn matches(&self, r: &Reading) -> bool {
        r.at >= self.from
            && r.at < self.to
            && self.nodes.as_ref().is_none_or(|n| n.contains(&r.node_id))
            && self.kinds.as_ref().is_none_or(|k| k.contains(&r.kind))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub node_id: String,
    pub kind: SensorKind,
    pub points: Vec<(Timestamp, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Agg {
    Mean,
    Min,
    Max,
    Last,
}

impl std::str::FromStr for Agg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Agg::Mean),
            "min" => Ok(Agg::Min),
            "max" => Ok(Agg::Max),
            "last" => Ok(Agg::Last),
            _ => Err(format!("unknown aggregation '{s}'")),
        }
    }
}

/// Groups points into windows aligned to multiples of `window_ms` since the
/// Unix epoch and emits one aggregated point per non-empty window, stamped
/// at the window start.
pub fn downsample(s: &Series, window_ms: i64, agg: Agg) -> Result<Series, StoreError> {
    if window_ms <= 0 {
        return Err(StoreError::ZeroWindow);
    }
    let mut points: Vec<(Timestamp, f64)> = Vec::new();
    let mut acc: Option<(i64, f64, usize)> = None;
    let flush = |points: &mut Vec<(Timestamp, f64)>, (start, v, n): (i64, f64, usize)| {
        let v = if agg == Agg::Mean { v / n as f64 } else { v };
        points.push((Timestamp(start), v));
    };
    for &(t, v) in &s.points {
        let start = t.0.div_euclid(window_ms) * window_ms;
        acc = match acc {
            Some((w, a, n)) if w == start => Some((
                w,
                match agg {
                    Agg::Mean => a + v,
                    Agg::Min => a.min(v),
                    Agg::Max => a.max(v),
                    Agg::Last => v,
                },
                n + 1,
            )),
            prev => {
                if let Some(p) = prev {
                    flush(&mut points, p);
                }
                Some((start, v, 1))
            }
        };
    }
    if let Some(p) = acc {
        flush(&mut points, p);
    }
    Ok(Series { node_id: s.node_id.clone(), kind: s.kind, points })
}

#[derive(Debug, Default, Clone)]
pub struct Store {
    log: Vec<Reading>,
    last: HashMap<SeriesKey, Timestamp>,
}

fn sort_key(r: &Reading) -> (Timestamp, &str, SensorKind) {
    (r.at, r.node_id.as_str(), r.kind)
}

impl Store {
    pub fn new() -> Store {
        Store::default()
    }

    pub fn len(&self) -> usize {
        self.log.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log.is_empty()
    }

    fn check(&self, r: &Reading, pending: &HashMap<SeriesKey, Timestamp>) -> Result<SeriesKey, StoreError> {
        r.validate()?;
        let key = (r.node_id.clone(), r.kind);
        if let Some(&last) = pending.get(&key).or_else(|| self.last.get(&key)) {
            if r.at < last {
                return Err(StoreError::OutOfOrder {
                    node: r.node_id.clone(),
                    kind: r.kind,
                    last: last.to_iso(),
                    got: r.at.to_iso(),
                });
            }
        }
        Ok(key)
    }

    /// Appends and returns the reading's offset in the log.
    pub fn append(&mut self, r: Reading) -> Result<u64, StoreError> {
        let key = self.check(&r, &HashMap::new())?;
        self.last.insert(key, r.at);
        self.log.push(r);
        Ok(self.log.len() as u64 - 1)
    }

    pub fn get(&self, offset: u64) -> Option<&Reading> {
        self.log.get(offset as usize)
    }

    /// Matching readings ordered by `(timestamp, node_id, kind)`, ties in append order.
    pub fn query_range(&self, q: &RangeQuery) -> Vec<Reading> {
        let mut out: Vec<Reading> = self.log.iter().filter(|r| q.matches(r)).cloned().collect();
        out.sort_by(|a, b| sort_key(a).cmp(&sort_key(b)));
        out
    }

    /// Matching readings grouped per `(node, kind)`, keys in order.
    pub fn query_series(&self, q: &RangeQuery) -> Vec<Series> {
        let mut groups: BTreeMap<SeriesKey, Vec<(Timestamp, f64)>> = BTreeMap::new();
        for r in self.log.iter().filter(|r| q.matches(r)) {
            groups.entry((r.node_id.clone(), r.kind)).or_default().push((r.at, r.value));
        }
        groups.into_iter().map(|((node_id, kind), points)| Series { node_id, kind, points }).collect()
    }

    pub fn series(&self, node_id: &str, kind: SensorKind) -> Series {
        let q = RangeQuery::all().node(node_id).kind(kind);
        self.query_series(&q)
            .pop()
            .unwrap_or(Series { node_id: node_id.to_string(), kind, points: Vec::new() })
    }

    pub fn export_csv<W: Write>(&self, q: &RangeQuery, sink: &mut W) -> Result<usize, StoreError> {
        q.validate()?;
        let rows = self.query_range(q);
        let mut out = io::BufWriter::new(sink);
        writeln!(out, "{CSV_HEADER}")?;
        for r in &rows {
            writeln!(out, "{}", csv_row(r))?;
        }
        out.flush()?;
        Ok(rows.len())
    }

    /// Appends all rows of a CSV file in order. Nothing is appended unless
    /// every row is valid.
    pub fn import_csv<R: BufRead>(&mut self, source: R) -> Result<usize, StoreError> {
        let mut lines = source.lines();
        match lines.next().transpose()? {
            Some(h) if h.trim_end_matches('\r') == CSV_HEADER => {}
            _ => return Err(StoreError::BadHeader),
        }
        let mut rows = Vec::new();
        let mut pending: HashMap<SeriesKey, Timestamp> = HashMap::new();
        for (idx, line) in lines.enumerate() {
            let line_no = idx + 2;
            let line = line?;
            let r = parse_row(line.trim_end_matches('\r')).map_err(|reason| StoreError::BadRow { line: line_no, reason })?;
            let key = self
                .check(&r, &pending)
                .map_err(|e| StoreError::BadRow { line: line_no, reason: e.to_string() })?;
            pending.insert(key, r.at);
            rows.push(r);
        }
        let n = rows.len();
        for r in rows {
            self.append(r).expect("rows checked above");
        }
        Ok(n)
    }
}

pub fn csv_row(r: &Reading) -> String {
    format!("{},{},{},{},{}", r.at.to_iso(), r.node_id, r.kind.as_str(), format_value(r.value), r.unit.as_str())
}

pub fn parse_row(line: &str) -> Result<Reading, String> {
    let fields: Vec<&str> = line.split(',').collect();
    let [ts, node, sensor, value, unit] = fields.as_slice() else {
        return Err(format!("expected 5 fields, found {}", fields.len()));
    };
    let at = Timestamp::parse_iso(ts).map_err(|e| e.to_string())?;
    let kind: SensorKind = sensor.parse().map_err(|e: crate::types::UnknownKind| e.to_string())?;
    let value: f64 = value.parse().map_err(|_| format!("bad value '{value}'"))?;
    let unit: Unit = unit.parse().map_err(|_| format!("bad unit '{unit}'"))?;
    let r = Reading { at, node_id: node.to_string(), kind, value, unit };
    r.validate().map_err(|e| e.to_string())?;
    Ok(r)
}

/// Store shared between the ingest path and readers. Readers see the log
/// as of the moment they take the read lock.
#[derive(Debug, Clone, Default)]
pub struct SharedStore(Arc<RwLock<Store>>);

impl SharedStore {
    pub fn new() -> SharedStore {
        SharedStore::default()
    }

    pub fn read(&self) -> RwLockReadGuard<'_, Store> {
        self.0.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn write(&self) -> RwLockWriteGuard<'_, Store> {
        self.0.write().unwrap_or_else(|e| e.into_inner())
    }

    pub fn append(&self, r: Reading) -> Result<u64, StoreError> {
        self.write().append(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(ms: i64) -> Timestamp {
        Timestamp(1_488_362_400_000 + ms)
    }

    fn reading(ms: i64, node: &str, v: f64) -> Reading {
        Reading::new(ts(ms), node, SensorKind::Temperature, v).unwrap()
    }

    #[test]
    fn append_offsets_and_errors() {
        let mut s = Store::new();
        assert_eq!(s.append(reading(10, "a", 1.0)).unwrap(), 0);
        assert_eq!(s.append(reading(10, "b", 1.0)).unwrap(), 1);
        assert!(matches!(s.append(reading(5, "a", 1.0)), Err(StoreError::OutOfOrder { .. })));
        // Another key is independent.
        assert_eq!(s.append(reading(5, "c", 1.0)).unwrap(), 2);
        let mut nan = reading(20, "a", 0.0);
        nan.value = f64::NAN;
        assert!(matches!(s.append(nan), Err(StoreError::NonFinite)));
        assert_eq!(s.len(), 3);
    }

    #[test]
    fn half_open_ranges() {
        let mut s = Store::new();
        assert!(s.query_range(&RangeQuery::all()).is_empty());
        for t in 1..=3 {
            s.append(reading(t, "a", t as f64)).unwrap();
        }
        let got = s.query_range(&RangeQuery::between(ts(1), ts(3)).unwrap());
        assert_eq!(got.iter().map(|r| r.value).collect::<Vec<_>>(), vec![1.0, 2.0]);
        assert!(s.query_range(&RangeQuery::between(ts(2), ts(2)).unwrap()).is_empty());
        assert!(matches!(RangeQuery::between(ts(3), ts(2)), Err(StoreError::BadRange)));
    }

    #[test]
    fn filters_and_order() {
        let mut s = Store::new();
        s.append(reading(5, "b", 1.0)).unwrap();
        s.append(reading(5, "a", 2.0)).unwrap();
        s.append(Reading::new(ts(1), "a", SensorKind::Humidity, 40.0).unwrap()).unwrap();
        let all = s.query_range(&RangeQuery::all());
        let ids: Vec<(&str, SensorKind)> = all.iter().map(|r| (r.node_id.as_str(), r.kind)).collect();
        assert_eq!(
            ids,
            vec![("a", SensorKind::Humidity), ("a", SensorKind::Temperature), ("b", SensorKind::Temperature)]
        );
        assert_eq!(s.query_range(&RangeQuery::all().node("b")).len(), 1);
        assert_eq!(s.query_range(&RangeQuery::all().kind(SensorKind::Humidity)).len(), 1);
    }

    #[test]
    fn downsample_examples() {
        let s = Series {
            node_id: "a".into(),
            kind: SensorKind::Temperature,
            points: vec![(Timestamp(0), 1.0), (Timestamp(1), 2.0), (Timestamp(2), 3.0), (Timestamp(15), 9.0)],
        };
        let m = downsample(&s, 10, Agg::Mean).unwrap();
        assert_eq!(m.points, vec![(Timestamp(0), 2.0), (Timestamp(10), 9.0)]);
        assert_eq!(downsample(&s, 10, Agg::Min).unwrap().points[0].1, 1.0);
        assert_eq!(downsample(&s, 10, Agg::Max).unwrap().points[0].1, 3.0);
        assert_eq!(downsample(&s, 10, Agg::Last).unwrap().points[0].1, 3.0);
        let empty = Series { points: vec![], ..s.clone() };
        assert!(downsample(&empty, 10, Agg::Mean).unwrap().points.is_empty());
        assert!(matches!(downsample(&s, 0, Agg::Mean), Err(StoreError::ZeroWindow)));
        // Negative timestamps floor towards minus infinity.
        let neg = Series { points: vec![(Timestamp(-1), 4.0)], ..s };
        assert_eq!(downsample(&neg, 10, Agg::Mean).unwrap().points, vec![(Timestamp(-10), 4.0)]);
    }

    #[test]
    fn csv_export_format() {
        let mut s = Store::new();
        let mut buf = Vec::new();
        assert_eq!(s.export_csv(&RangeQuery::all(), &mut buf).unwrap(), 0);
        assert_eq!(String::from_utf8(buf).unwrap(), "timestamp,node_id,sensor,value,unit\n");
        let at = Timestamp::parse_iso("2017-03-01T10:00:00.000Z").unwrap();
        s.append(Reading::new(at, "tag-1", SensorKind::Temperature, 21.5).unwrap()).unwrap();
        let mut buf = Vec::new();
        s.export_csv(&RangeQuery::all(), &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "timestamp,node_id,sensor,value,unit\n2017-03-01T10:00:00.000Z,tag-1,temperature,21.5,celsius\n"
        );
    }

    #[test]
    fn csv_import_errors() {
        let mut s = Store::new();
        assert!(matches!(s.import_csv("a,b,c\n".as_bytes()), Err(StoreError::BadHeader)));
        assert!(matches!(s.import_csv("".as_bytes()), Err(StoreError::BadHeader)));
        let body = "timestamp,node_id,sensor,value,unit\n\
            2017-03-01T10:00:00.000Z,t,temperature,21.5,celsius\n\
            2017-03-01T10:00:01.000Z,t,temperature,21.5\n";
        assert!(matches!(s.import_csv(body.as_bytes()), Err(StoreError::BadRow { line: 3, .. })));
        assert!(s.is_empty());
        let units = "timestamp,node_id,sensor,value,unit\n2017-03-01T10:00:00.000Z,t,temperature,21.5,percent\n";
        assert!(matches!(s.import_csv(units.as_bytes()), Err(StoreError::BadRow { line: 2, .. })));
        let order = "timestamp,node_id,sensor,value,unit\n\
            2017-03-01T10:00:01.000Z,t,temperature,1,celsius\n\
            2017-03-01T10:00:00.000Z,t,temperature,1,celsius\n";
        assert!(matches!(s.import_csv(order.as_bytes()), Err(StoreError::BadRow { line: 3, .. })));
        let good = "timestamp,node_id,sensor,value,unit\r\n2017-03-01T10:00:00.000Z,t,door,1,bool\r\n";
        assert_eq!(s.import_csv(good.as_bytes()).unwrap(), 1);
    }

    #[test]
    fn csv_round_trip() {
        let mut s = Store::new();
        for i in 0..50 {
            s.append(reading(i * 7, if i % 2 == 0 { "a" } else { "b" }, (i as f64) * 0.1234567 - 3.0)).unwrap();
        }
        let mut first = Vec::new();
        s.export_csv(&RangeQuery::all(), &mut first).unwrap();
        let mut t = Store::new();
        assert_eq!(t.import_csv(first.as_slice()).unwrap(), 50);
        let mut second = Vec::new();
        t.export_csv(&RangeQuery::all(), &mut second).unwrap();
        assert_eq!(first, second);
    }
}
