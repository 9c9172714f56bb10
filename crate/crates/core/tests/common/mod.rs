//! Independent reference computations shared by the property tests and the
//! acceptance suite. Nothing here calls into the code it checks.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sb_core::types::{ActuationCommand, Timestamp};

pub const T0: i64 = 1_488_326_400_000;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---- thermal ------------------------------------------------------------

/// Heater-off, unoccupied room: `t_env + (t0 - t_env) * exp(-n / tau)`.
pub fn cooling_closed_form(t0: f64, t_env: f64, tau_ticks: f64, n: u64) -> f64 {
    t_env + (t0 - t_env) * (-(n as f64) / tau_ticks).exp()
}

// ---- energy -------------------------------------------------------------

/// Milliseconds in `[from, to)` with at least one listed heater on, found by
/// sampling the replayed relay states at every command boundary.
pub fn on_ms(log: &[ActuationCommand], heaters: &[&str], from: Timestamp, to: Timestamp) -> i64 {
    let mut cuts: Vec<i64> = log.iter().map(|c| c.at.0).filter(|&t| t > from.0 && t < to.0).collect();
    cuts.push(from.0);
    cuts.push(to.0);
    cuts.sort_unstable();
    cuts.dedup();
    let state_at = |t: i64| {
        let mut on: BTreeMap<&str, bool> = BTreeMap::new();
        for c in log.iter().filter(|c| c.at.0 <= t) {
            on.insert(c.node_id.as_str(), c.on);
        }
        heaters.iter().any(|h| on.get(h).copied().unwrap_or(false))
    };
    cuts.windows(2).filter(|w| state_at(w[0])).map(|w| w[1] - w[0]).sum()
}

pub fn kwh(on_ms: i64, watts: f64) -> f64 {
    on_ms as f64 / 3_600_000.0 * watts / 1000.0
}

// ---- comfort ------------------------------------------------------------

/// Least squares `v = b0 + b1 t` through the 2x2 normal equations; returns
/// the zero crossing `-b0 / b1` and the slope.
pub fn ols_zero_crossing(votes: &[(f64, i64)]) -> (f64, f64) {
    let n = votes.len() as f64;
    let (st, sv) = votes.iter().fold((0.0, 0.0), |(a, b), &(t, v)| (a + t, b + v as f64));
    let (stt, stv) = votes.iter().fold((0.0, 0.0), |(a, b), &(t, v)| (a + t * t, b + t * v as f64));
    let det = n * stt - st * st;
    let b1 = (n * stv - st * sv) / det;
    let b0 = (stt * sv - st * stv) / det;
    (-b0 / b1, b1)
}

/// `n` votes at uniform temperatures in `[lo, hi]`, each the rounded
/// `a (t - t_pref) + N(0, sigma)` clamped to the valid [-2, 2] scale.
pub fn planted_votes(r: &mut ChaCha8Rng, n: usize, t_pref: f64, a: f64, sigma: f64, lo: f64, hi: f64) -> Vec<(f64, i64)> {
    use rand_distr::{Distribution, Normal};
    let noise = Normal::new(0.0, sigma).unwrap();
    (0..n)
        .map(|_| {
            let t = r.random_range(lo..=hi);
            let v = (a * (t - t_pref) + noise.sample(r)).round().clamp(-2.0, 2.0) as i64;
            (t, v)
        })
        .collect()
}

// ---- occupancy ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OccEvent {
    Counter { at: i64, delta: i64 },
    Sight { at: i64, mac: u8 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleEstimate {
    pub count: u32,
    pub macs: BTreeSet<u8>,
    pub high: bool,
}

/// Full re-scan of the trace as seen at time `t`.
pub fn occupancy_oracle(events: &[OccEvent], t: i64, lease_ms: i64) -> OracleEstimate {
    let mut total: i64 = 0;
    let mut clamped = false;
    let mut latest: BTreeMap<u8, i64> = BTreeMap::new();
    for e in events {
        match *e {
            OccEvent::Counter { at, delta } if at <= t => {
                let raw = total + delta;
                clamped = raw < 0;
                total = raw.max(0);
            }
            OccEvent::Sight { at, mac } if at <= t => {
                let s = latest.entry(mac).or_insert(at);
                *s = (*s).max(at);
            }
            _ => {}
        }
    }
    let macs: BTreeSet<u8> = latest.iter().filter(|(_, &s)| t - s <= lease_ms).map(|(m, _)| *m).collect();
    let n = macs.len() as i64;
    OracleEstimate { count: total.max(n) as u32, high: (total - n).abs() <= 1 && !clamped, macs }
}

/// Random trace with non-decreasing counter times and jittered sightings.
pub fn random_trace(r: &mut ChaCha8Rng, max_events: usize) -> Vec<OccEvent> {
    let n = r.random_range(1..=max_events);
    let mut clock = 0i64;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        clock += r.random_range(0..=120_000);
        if r.random_bool(0.55) {
            let delta = if r.random_bool(0.55) { 1 } else { -1 };
            out.push(OccEvent::Counter { at: clock, delta });
        } else {
            let jitter = r.random_range(-60_000..=30_000);
            out.push(OccEvent::Sight { at: (clock + jitter).max(0), mac: r.random_range(1..=5) });
        }
    }
    out
}

// ---- mesh ---------------------------------------------------------------

pub type Graph = BTreeMap<String, BTreeSet<String>>;

pub fn node_name(i: usize) -> String {
    format!("m{i}")
}

/// Random connected graph on `n` nodes: a random tree plus extra edges.
pub fn random_connected(r: &mut ChaCha8Rng, n: usize, extra_p: f64) -> Graph {
    let mut g: Graph = (0..n).map(|i| (node_name(i), BTreeSet::new())).collect();
    let add = |g: &mut Graph, a: usize, b: usize| {
        g.get_mut(&node_name(a)).unwrap().insert(node_name(b));
        g.get_mut(&node_name(b)).unwrap().insert(node_name(a));
    };
    for i in 1..n {
        let parent = r.random_range(0..i);
        add(&mut g, i, parent);
    }
    for a in 0..n {
        for b in a + 1..n {
            if r.random_bool(extra_p) {
                add(&mut g, a, b);
            }
        }
    }
    g
}

pub fn edges(g: &Graph) -> Vec<(String, String)> {
    g.iter().flat_map(|(a, ns)| ns.iter().filter(move |b| a < *b).map(move |b| (a.clone(), b.clone()))).collect()
}

/// Level-by-level flood from `src`: the hop count at which each node first
/// hears the frame, limited to `ttl` hops.
pub fn flood_levels(g: &Graph, src: &str, ttl: u32) -> BTreeMap<String, u32> {
    let mut level = BTreeMap::from([(src.to_string(), 0u32)]);
    let mut q = VecDeque::from([src.to_string()]);
    while let Some(u) = q.pop_front() {
        let d = level[&u];
        if d == ttl {
            continue;
        }
        for v in &g[&u] {
            if !level.contains_key(v) {
                level.insert(v.clone(), d + 1);
                q.push_back(v.clone());
            }
        }
    }
    level
}

pub fn without(g: &Graph, drop: &str) -> Graph {
    g.iter()
        .filter(|(k, _)| k.as_str() != drop)
        .map(|(k, ns)| (k.clone(), ns.iter().filter(|n| n.as_str() != drop).cloned().collect()))
        .collect()
}

pub fn connected(g: &Graph) -> bool {
    match g.keys().next() {
        None => true,
        Some(first) => flood_levels(g, first, u32::MAX).len() == g.len(),
    }
}

/// Nodes whose removal leaves the rest connected.
pub fn non_articulation(g: &Graph) -> Vec<String> {
    g.keys().filter(|v| connected(&without(g, v))).cloned().collect()
}
