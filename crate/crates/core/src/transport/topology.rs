use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::types::is_valid_id;

pub const DEFAULT_TTL: u32 = 8;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TopologyError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("edge references undeclared node '{0}'")]
    UnknownNode(String),
    #[error("self-loop on node '{0}'")]
    SelfLoop(String),
    #[error("invalid node id '{0}'")]
    BadId(String),
    #[error("ttl must be positive")]
    ZeroTtl,
}

/// Undirected mesh graph. Edges are stored with endpoints in sorted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeshTopology {
    nodes: BTreeSet<String>,
    edges: BTreeSet<(String, String)>,
    adjacency: BTreeMap<String, BTreeSet<String>>,
    ttl_default: u32,
}

impl Default for MeshTopology {
    fn default() -> Self {
        MeshTopology {
            nodes: BTreeSet::new(),
            edges: BTreeSet::new(),
            adjacency: BTreeMap::new(),
            ttl_default: DEFAULT_TTL,
        }
    }
}

impl MeshTopology {
    pub fn new(ttl_default: u32) -> Result<MeshTopology, TopologyError> {
        if ttl_default == 0 {
            return Err(TopologyError::ZeroTtl);
        }
        Ok(MeshTopology { ttl_default, ..MeshTopology::default() })
    }

    pub fn ttl_default(&self) -> u32 {
        self.ttl_default
    }

    pub fn add_node(&mut self, id: &str) -> Result<(), TopologyError> {
        if !is_valid_id(id) {
            return Err(TopologyError::BadId(id.to_string()));
        }
        self.nodes.insert(id.to_string());
        self.adjacency.entry(id.to_string()).or_default();
        Ok(())
    }

    pub fn add_edge(&mut self, a: &str, b: &str) -> Result<(), TopologyError> {
        for n in [a, b] {
            if !self.nodes.contains(n) {
                return Err(TopologyError::UnknownNode(n.to_string()));
            }
        }
        if a == b {
            return Err(TopologyError::SelfLoop(a.to_string()));
        }
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        self.edges.insert((lo.to_string(), hi.to_string()));
        self.adjacency.get_mut(a).expect("declared").insert(b.to_string());
        self.adjacency.get_mut(b).expect("declared").insert(a.to_string());
        Ok(())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.nodes.contains(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(String::as_str)
    }

    pub fn edges(&self) -> impl Iterator<Item = (&str, &str)> {
        self.edges.iter().map(|(a, b)| (a.as_str(), b.as_str()))
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Neighbors in id order.
    pub fn neighbors(&self, id: &str) -> impl Iterator<Item = &str> {
        self.adjacency.get(id).into_iter().flatten().map(String::as_str)
    }

    pub fn degree(&self, id: &str) -> usize {
        self.adjacency.get(id).map_or(0, BTreeSet::len)
    }

    /// Copy of the graph with `id` and its incident edges removed.
    pub fn without_node(&self, id: &str) -> MeshTopology {
        let mut t = MeshTopology { ttl_default: self.ttl_default, ..MeshTopology::default() };
        for n in self.nodes.iter().filter(|n| n.as_str() != id) {
            t.add_node(n).expect("valid id");
        }
        for (a, b) in self.edges.iter().filter(|(a, b)| a != id && b != id) {
            t.add_edge(a, b).expect("both endpoints kept");
        }
        t
    }

    pub fn is_connected(&self) -> bool {
        let Some(start) = self.nodes.iter().next() else {
            return true;
        };
        let mut seen = BTreeSet::from([start.as_str()]);
        let mut queue = VecDeque::from([start.as_str()]);
        while let Some(n) = queue.pop_front() {
            for nb in self.neighbors(n) {
                if seen.insert(nb) {
                    queue.push_back(nb);
                }
            }
        }
        seen.len() == self.nodes.len()
    }

    /// Parses the plain-text topology format: `node <id>` and `edge <a> <b>`
    /// lines in any order, `#` starting a comment.
    pub fn parse(text: &str) -> Result<MeshTopology, TopologyError> {
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let perr = |reason: &str| TopologyError::Parse { line: line_no, reason: reason.to_string() };
            match fields.as_slice() {
                ["node", id] => {
                    if !is_valid_id(id) {
                        return Err(perr("invalid node id"));
                    }
                    nodes.push(id.to_string());
                }
                ["edge", a, b] => edges.push((line_no, a.to_string(), b.to_string())),
                ["node", ..] => return Err(perr("expected `node <id>`")),
                ["edge", ..] => return Err(perr("expected `edge <id> <id>`")),
                _ => return Err(perr(&format!("unknown directive '{}'", fields[0]))),
            }
        }
        let mut topo = MeshTopology::default();
        for n in &nodes {
            topo.add_node(n)?;
        }
        for (line, a, b) in edges {
            topo.add_edge(&a, &b).map_err(|e| TopologyError::Parse { line, reason: e.to_string() })?;
        }
        Ok(topo)
    }
}
