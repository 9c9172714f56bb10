//! Controlled flooding over a [`MeshTopology`].
//!
//! Every node keeps a duplicate cache keyed on `(src, seq)`. A node that hears
//! a frame for the first time records it, hands it to its application when it
//! is addressed there, and re-broadcasts it to all neighbors while hops remain.
//! A unicast destination consumes the frame and does not re-broadcast it.
//! Each transmission to a neighbor costs one Bernoulli loss draw.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use rand::Rng;

use super::topology::MeshTopology;
use super::{Delivery, Destination, Frame, TransportError};

/// Per-node record of `(src, seq)` pairs already handled.
#[derive(Debug, Default, Clone)]
pub struct DuplicateCache {
    seen: HashMap<String, HashSet<(String, u64)>>,
}

impl DuplicateCache {
    /// Returns `true` if this is the first time `node` sees the key.
    fn first_sighting(&mut self, node: &str, src: &str, seq: u64) -> bool {
        self.seen.entry(node.to_string()).or_default().insert((src.to_string(), seq))
    }

    pub fn contains(&self, node: &str, src: &str, seq: u64) -> bool {
        self.seen.get(node).is_some_and(|s| s.contains(&(src.to_string(), seq)))
    }
}

/// Everything that happened during one flood.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FloodTrace {
    /// First-arrival path to every node that received the frame, source included.
    pub reached: BTreeMap<String, Vec<String>>,
    /// Application deliveries per node; at most one by construction.
    pub app_deliveries: BTreeMap<String, usize>,
    pub transmissions: usize,
    pub lost: usize,
    pub suppressed: usize,
}

impl FloodTrace {
    /// Summarises the trace for the frame's destination.
    pub fn delivery(&self, frame: &Frame, latency_per_hop: u64) -> Delivery {
        let path = match &frame.dst {
            Destination::Node(dst) => self.reached.get(dst).cloned(),
            // For broadcasts report the last node reached.
            Destination::Broadcast => self
                .reached
                .values()
                .filter(|p| p.len() > 1)
                .max_by(|a, b| a.len().cmp(&b.len()).then_with(|| b.last().cmp(&a.last())))
                .cloned(),
        };
        match path {
            Some(path) => {
                let hops = path.len() - 1;
                Delivery {
                    delivered: true,
                    hops,
                    delivered_at: Some(frame.sent_at.plus(hops as u64 * latency_per_hop)),
                    path,
                }
            }
            None => Delivery::undelivered(),
        }
    }
}

/// Floods `frame` through `topo`, consuming exactly one `rng` draw per
/// transmission, in transmission order.
pub fn flood<R: Rng>(
    topo: &MeshTopology,
    frame: &Frame,
    loss_prob: f64,
    cache: &mut DuplicateCache,
    rng: &mut R,
) -> Result<FloodTrace, TransportError> {
    if !topo.contains(&frame.src) {
        return Err(TransportError::SrcUnknown(frame.src.clone()));
    }
    let mut trace = FloodTrace::default();
    if frame.ttl == 0 || !cache.first_sighting(&frame.src, &frame.src, frame.seq) {
        return Ok(trace);
    }
    let addressed_to = |node: &str| match &frame.dst {
        Destination::Node(d) => d == node,
        Destination::Broadcast => true,
    };
    trace.reached.insert(frame.src.clone(), vec![frame.src.clone()]);
    if addressed_to(&frame.src) && frame.dst != Destination::Broadcast {
        *trace.app_deliveries.entry(frame.src.clone()).or_default() += 1;
        return Ok(trace);
    }

    let mut queue: VecDeque<(String, u32)> = VecDeque::from([(frame.src.clone(), frame.ttl)]);
    while let Some((node, remaining)) = queue.pop_front() {
        if remaining == 0 {
            continue;
        }
        let path = trace.reached[&node].clone();
        for nb in topo.neighbors(&node) {
            trace.transmissions += 1;
            let draw: f64 = rng.random();
            if draw < loss_prob {
                trace.lost += 1;
                continue;
            }
            if !cache.first_sighting(nb, &frame.src, frame.seq) {
                trace.suppressed += 1;
                continue;
            }
            let mut next = path.clone();
            next.push(nb.to_string());
            trace.reached.insert(nb.to_string(), next);
            let for_me = addressed_to(nb);
            if for_me {
                *trace.app_deliveries.entry(nb.to_string()).or_default() += 1;
            }
            let consumed = for_me && frame.dst != Destination::Broadcast;
            if !consumed {
                queue.push_back((nb.to_string(), remaining - 1));
            }
        }
    }
    Ok(trace)
}
