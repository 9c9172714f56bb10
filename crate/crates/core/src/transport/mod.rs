//! Simulated radio links: a BLE-like connect/subscribe link, a Z-Wave-like
//! unsolicited event link and a ZigBee-like flooding mesh, all driven by one
//! logical clock.
//!
//! Loss is an independent Bernoulli draw per frame per hop. Each link owns a
//! ChaCha stream derived from the world seed and the link id, and draws on a
//! point-to-point link happen in `(sent_at, src, seq)` order, so a seeded run
//! can be replayed draw for draw.

mod mesh;
mod topology;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::types::{SensorKind, Tick};

pub use mesh::{flood, DuplicateCache, FloodTrace};
pub use topology::{MeshTopology, TopologyError, DEFAULT_TTL};

/// Address of the hub that terminates every point-to-point link.
pub const HUB: &str = "hub";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TransportError {
    #[error("node '{0}' is not registered on this link")]
    NodeUnknown(String),
    #[error("node '{0}' is already connected")]
    AlreadyConnected(String),
    #[error("kind '{0}' cannot be subscribed over BLE")]
    InvalidKind(String),
    #[error("connection is closed")]
    Disconnected,
    #[error("unknown link '{0}'")]
    LinkUnknown(String),
    #[error("duplicate link '{0}'")]
    DuplicateLink(String),
    #[error("link '{link}' is {actual:?}, operation needs {expected:?}")]
    WrongFlavor { link: String, expected: LinkFlavor, actual: LinkFlavor },
    #[error("source '{0}' is not a mesh node")]
    SrcUnknown(String),
    #[error("loss probability {0} outside [0, 1]")]
    BadLoss(f64),
    #[error("period must be positive")]
    ZeroPeriod,
    #[error("frame ttl {ttl} exceeds mesh default {max}")]
    TtlTooLarge { ttl: u32, max: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LinkFlavor {
    Ble,
    Zwave,
    ZigbeeMesh,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkSpec {
    pub link_id: String,
    pub flavor: LinkFlavor,
    pub loss_prob: f64,
    pub latency_ticks: u64,
}

impl LinkSpec {
    pub fn new(link_id: impl Into<String>, flavor: LinkFlavor, loss_prob: f64, latency_ticks: u64) -> Result<LinkSpec, TransportError> {
        if !(0.0..=1.0).contains(&loss_prob) {
            return Err(TransportError::BadLoss(loss_prob));
        }
        Ok(LinkSpec { link_id: link_id.into(), flavor, loss_prob, latency_ticks })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Destination {
    Node(String),
    Broadcast,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub src: String,
    pub dst: Destination,
    pub seq: u64,
    pub ttl: u32,
    pub payload: Vec<u8>,
    pub sent_at: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub delivered: bool,
    pub path: Vec<String>,
    pub hops: usize,
    pub delivered_at: Option<Tick>,
}

impl Delivery {
    pub fn undelivered() -> Delivery {
        Delivery { delivered: false, path: Vec::new(), hops: 0, delivered_at: None }
    }
}

/// A frame handed to the hub application.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveredFrame {
    pub link_id: String,
    pub frame: Frame,
    pub delivered_at: Tick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ConnHandle(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubscriptionId(usize);

/// A BLE notification about to be sent; the payload source fills its bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Notification {
    pub subscription: SubscriptionId,
    pub link_id: String,
    pub node: String,
    pub kind: SensorKind,
    pub tick: Tick,
}

struct Link {
    spec: LinkSpec,
    nodes: BTreeSet<String>,
    rng: ChaCha8Rng,
    mesh: Option<(MeshTopology, DuplicateCache)>,
}

struct Connection {
    link_id: String,
    node: String,
    open: bool,
}

struct BleSubscription {
    conn: ConnHandle,
    kind: SensorKind,
    period: u64,
    next_due: Tick,
    active: bool,
}

struct Outgoing {
    link_id: String,
    frame: Frame,
}

/// Owner of every simulated link. Single driver, no internal locking.
pub struct Transport {
    seed: u64,
    now: Tick,
    links: BTreeMap<String, Link>,
    seqs: HashMap<String, u64>,
    conns: Vec<Connection>,
    subs: Vec<BleSubscription>,
    outbox: Vec<Outgoing>,
    pending: BTreeMap<(Tick, String, u64), DeliveredFrame>,
    lost: u64,
}

/// Stable 64-bit FNV-1a, used to give each link its own RNG stream.
fn stream_id(link_id: &str) -> u64 {
    link_id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// The RNG a link with this id uses under `seed`. Exposed so tests can replay
/// the exact loss stream.
pub fn link_rng(seed: u64, link_id: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(link_id));
    rng
}

impl Transport {
    pub fn new(seed: u64) -> Transport {
        Transport {
            seed,
            now: Tick(0),
            links: BTreeMap::new(),
            seqs: HashMap::new(),
            conns: Vec::new(),
            subs: Vec::new(),
            outbox: Vec::new(),
            pending: BTreeMap::new(),
            lost: 0,
        }
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    /// Frames dropped by the loss model so far (point-to-point links only).
    pub fn lost_frames(&self) -> u64 {
        self.lost
    }

    pub fn add_link(&mut self, spec: LinkSpec) -> Result<(), TransportError> {
        if spec.flavor == LinkFlavor::ZigbeeMesh {
            return Err(TransportError::WrongFlavor {
                link: spec.link_id,
                expected: LinkFlavor::Ble,
                actual: LinkFlavor::ZigbeeMesh,
            });
        }
        self.insert_link(spec, None)
    }

    pub fn add_mesh(&mut self, spec: LinkSpec, topo: MeshTopology) -> Result<(), TransportError> {
        if spec.flavor != LinkFlavor::ZigbeeMesh {
            return Err(TransportError::WrongFlavor {
                link: spec.link_id,
                expected: LinkFlavor::ZigbeeMesh,
                actual: spec.flavor,
            });
        }
        // Mesh membership is the topology's node set.
        self.insert_link(spec, Some((topo, DuplicateCache::default())))
    }

    fn insert_link(&mut self, spec: LinkSpec, mesh: Option<(MeshTopology, DuplicateCache)>) -> Result<(), TransportError> {
        if self.links.contains_key(&spec.link_id) {
            return Err(TransportError::DuplicateLink(spec.link_id));
        }
        let nodes = mesh.as_ref().map(|(t, _)| t.nodes().map(str::to_string).collect()).unwrap_or_default();
        let link = Link { rng: link_rng(self.seed, &spec.link_id), spec, nodes, mesh };
        self.links.insert(link.spec.link_id.clone(), link);
        Ok(())
    }

    pub fn link_spec(&self, link_id: &str) -> Option<&LinkSpec> {
        self.links.get(link_id).map(|l| &l.spec)
    }

    /// Makes `node` known on a point-to-point link.
    pub fn register_node(&mut self, link_id: &str, node: &str) -> Result<(), TransportError> {
        let link = self.link_mut(link_id)?;
        if link.mesh.is_some() {
            return Err(TransportError::WrongFlavor {
                link: link_id.to_string(),
                expected: LinkFlavor::Ble,
                actual: LinkFlavor::ZigbeeMesh,
            });
        }
        link.nodes.insert(node.to_string());
        Ok(())
    }

    fn link_mut(&mut self, link_id: &str) -> Result<&mut Link, TransportError> {
        self.links.get_mut(link_id).ok_or_else(|| TransportError::LinkUnknown(link_id.to_string()))
    }

    fn expect_flavor(&self, link_id: &str, flavor: LinkFlavor) -> Result<&Link, TransportError> {
        let link = self.links.get(link_id).ok_or_else(|| TransportError::LinkUnknown(link_id.to_string()))?;
        if link.spec.flavor != flavor {
            return Err(TransportError::WrongFlavor { link: link_id.to_string(), expected: flavor, actual: link.spec.flavor });
        }
        Ok(link)
    }

    fn next_seq(&mut self, src: &str) -> u64 {
        let seq = self.seqs.entry(src.to_string()).or_insert(0);
        *seq += 1;
        *seq
    }

    pub fn connect_ble(&mut self, link_id: &str, node: &str) -> Result<ConnHandle, TransportError> {
        let link = self.expect_flavor(link_id, LinkFlavor::Ble)?;
        if !link.nodes.contains(node) {
            return Err(TransportError::NodeUnknown(node.to_string()));
        }
        if self.conns.iter().any(|c| c.open && c.link_id == link_id && c.node == node) {
            return Err(TransportError::AlreadyConnected(node.to_string()));
        }
        self.conns.push(Connection { link_id: link_id.to_string(), node: node.to_string(), open: true });
        Ok(ConnHandle(self.conns.len() - 1))
    }

    /// Closes the connection and ends all of its subscriptions.
    pub fn disconnect(&mut self, conn: ConnHandle) {
        if let Some(c) = self.conns.get_mut(conn.0) {
            c.open = false;
        }
        for s in self.subs.iter_mut().filter(|s| s.conn == conn) {
            s.active = false;
        }
    }

    /// Queues one notification every `period_ticks`, starting one period from now.
    pub fn subscribe_ble(&mut self, conn: ConnHandle, kind: &str, period_ticks: u64) -> Result<SubscriptionId, TransportError> {
        if !self.conns.get(conn.0).is_some_and(|c| c.open) {
            return Err(TransportError::Disconnected);
        }
        let kind = kind
            .parse::<SensorKind>()
            .ok()
            .filter(|k| k.is_measuring())
            .ok_or_else(|| TransportError::InvalidKind(kind.to_string()))?;
        if period_ticks == 0 {
            return Err(TransportError::ZeroPeriod);
        }
        self.subs.push(BleSubscription {
            conn,
            kind,
            period: period_ticks,
            next_due: self.now.plus(period_ticks),
            active: true,
        });
        Ok(SubscriptionId(self.subs.len() - 1))
    }

    pub fn unsubscribe(&mut self, id: SubscriptionId) {
        if let Some(s) = self.subs.get_mut(id.0) {
            s.active = false;
        }
    }

    /// Unsolicited device event towards the hub on a Z-Wave link.
    pub fn emit_zwave_event(&mut self, link_id: &str, node: &str, event: Vec<u8>) -> Result<(), TransportError> {
        self.expect_flavor(link_id, LinkFlavor::Zwave)?;
        self.transmit(link_id, node, event)
    }

    /// Unsolicited frame towards the hub on any point-to-point link (BLE
    /// advertisements, Z-Wave events).
    pub fn transmit(&mut self, link_id: &str, node: &str, payload: Vec<u8>) -> Result<(), TransportError> {
        let link = self.links.get(link_id).ok_or_else(|| TransportError::LinkUnknown(link_id.to_string()))?;
        if link.mesh.is_some() {
            return Err(TransportError::WrongFlavor {
                link: link_id.to_string(),
                expected: LinkFlavor::Zwave,
                actual: LinkFlavor::ZigbeeMesh,
            });
        }
        if !link.nodes.contains(node) {
            return Err(TransportError::NodeUnknown(node.to_string()));
        }
        let frame = Frame {
            src: node.to_string(),
            dst: Destination::Node(HUB.to_string()),
            seq: self.next_seq(node),
            ttl: 1,
            payload,
            sent_at: self.now,
        };
        self.outbox.push(Outgoing { link_id: link_id.to_string(), frame });
        Ok(())
    }

    /// Builds a mesh frame stamped now with the next sequence number for `src`
    /// and the mesh's default TTL.
    pub fn mesh_frame(&mut self, link_id: &str, src: &str, dst: Destination, payload: Vec<u8>) -> Result<Frame, TransportError> {
        let link = self.expect_flavor(link_id, LinkFlavor::ZigbeeMesh)?;
        let ttl = link.mesh.as_ref().map_or(DEFAULT_TTL, |(t, _)| t.ttl_default());
        Ok(Frame { src: src.to_string(), dst, seq: self.next_seq(src), ttl, payload, sent_at: self.now })
    }

    /// Floods `frame` over the mesh link immediately. If the frame reaches a
    /// unicast destination it is also queued for delivery at `delivered_at`.
    pub fn send_mesh(&mut self, link_id: &str, frame: Frame) -> Result<Delivery, TransportError> {
        self.expect_flavor(link_id, LinkFlavor::ZigbeeMesh)?;
        let link = self.links.get_mut(link_id).expect("checked above");
        let (topo, cache) = link.mesh.as_mut().expect("mesh link");
        if frame.ttl > topo.ttl_default() {
            return Err(TransportError::TtlTooLarge { ttl: frame.ttl, max: topo.ttl_default() });
        }
        let trace = flood(topo, &frame, link.spec.loss_prob, cache, &mut link.rng)?;
        let delivery = trace.delivery(&frame, link.spec.latency_ticks);
        if let (true, Destination::Node(_), Some(at)) = (delivery.delivered, &frame.dst, delivery.delivered_at) {
            let key = (at, frame.src.clone(), frame.seq);
            self.pending.insert(key, DeliveredFrame { link_id: link_id.to_string(), frame, delivered_at: at });
        }
        Ok(delivery)
    }

    /// Advances the clock with empty notification payloads.
    pub fn advance(&mut self, n_ticks: u64) -> Vec<DeliveredFrame> {
        self.advance_with(n_ticks, |_| Vec::new())
    }

    /// Advances the clock by `n_ticks`, asking `source` for the payload of
    /// every BLE notification that comes due, and returns all frames whose
    /// delivery tick is at or before the new time, in `(tick, src, seq)` order.
    pub fn advance_with<F>(&mut self, n_ticks: u64, mut source: F) -> Vec<DeliveredFrame>
    where
        F: FnMut(&Notification) -> Vec<u8>,
    {
        let end = self.now.plus(n_ticks);
        // Frames queued between advances were sent at the current tick.
        self.flush_outbox();
        loop {
            let next = self.subs.iter().filter(|s| s.active).map(|s| s.next_due).min();
            let Some(t) = next.filter(|t| *t <= end) else { break };
            self.now = t;
            for i in 0..self.subs.len() {
                if !self.subs[i].active || self.subs[i].next_due != t {
                    continue;
                }
                let sub = &self.subs[i];
                let conn = &self.conns[sub.conn.0];
                let note = Notification {
                    subscription: SubscriptionId(i),
                    link_id: conn.link_id.clone(),
                    node: conn.node.clone(),
                    kind: sub.kind,
                    tick: t,
                };
                let payload = source(&note);
                let frame = Frame {
                    src: note.node.clone(),
                    dst: Destination::Node(HUB.to_string()),
                    seq: self.next_seq(&note.node),
                    ttl: 1,
                    payload,
                    sent_at: t,
                };
                self.outbox.push(Outgoing { link_id: note.link_id, frame });
                let sub = &mut self.subs[i];
                sub.next_due = sub.next_due.plus(sub.period);
            }
            self.flush_outbox();
        }
        self.now = end;

        let due: Vec<_> = self.pending.range(..(end.plus(1), String::new(), 0)).map(|(k, _)| k.clone()).collect();
        due.into_iter().filter_map(|k| self.pending.remove(&k)).collect()
    }

    /// Applies loss and latency to queued frames in `(sent_at, src, seq)` order.
    fn flush_outbox(&mut self) {
        let mut out = std::mem::take(&mut self.outbox);
        out.sort_by(|a, b| {
            (a.frame.sent_at, &a.frame.src, a.frame.seq).cmp(&(b.frame.sent_at, &b.frame.src, b.frame.seq))
        });
        for Outgoing { link_id, frame } in out {
            let link = self.links.get_mut(&link_id).expect("link checked at enqueue");
            let draw: f64 = link.rng.random();
            if draw < link.spec.loss_prob {
                self.lost += 1;
                continue;
            }
            let at = frame.sent_at.plus(link.spec.latency_ticks);
            self.pending.insert((at, frame.src.clone(), frame.seq), DeliveredFrame { link_id, frame, delivered_at: at });
        }
    }
}
