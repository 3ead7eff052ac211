use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::crypto::NodeId;
use crate::error::{Error, Result};

/// Sorted adjacency sets, BS included.
pub type Adjacency = BTreeMap<NodeId, BTreeSet<NodeId>>;

/// Undirected connectivity graph over the BS and `n` sensor nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkGraph {
    adj: Adjacency,
    d_max: usize,
}

impl NetworkGraph {
    /// Builds and validates a graph. Sensors are `1..=n`; edges may mention the BS (`0`).
    pub fn new(n: u16, edges: &[(NodeId, NodeId)], d_max: usize) -> Result<Self> {
        let mut adj: BTreeMap<NodeId, BTreeSet<NodeId>> =
            (0..=n).map(|i| (NodeId(i), BTreeSet::new())).collect();
        for &(a, b) in edges {
            if a == b {
                return Err(Error::Config(format!("self loop at {a}")));
            }
            for x in [a, b] {
                if !adj.contains_key(&x) {
                    return Err(Error::Config(format!("edge endpoint {x} out of range 0..={n}")));
                }
            }
            adj.get_mut(&a).unwrap().insert(b);
            adj.get_mut(&b).unwrap().insert(a);
        }
        let g = Self { adj, d_max };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        if self.n() == 0 {
            return Err(Error::Config("network has no sensor nodes".into()));
        }
        if self.degree(NodeId::BS) == 0 {
            return Err(Error::Config("BS has no neighbor".into()));
        }
        if let Some((s, nb)) = self.adj.iter().find(|(_, nb)| nb.len() > self.d_max) {
            return Err(Error::Config(format!(
                "{s} has degree {} > d_max {}",
                nb.len(),
                self.d_max
            )));
        }
        let reach = self.reachable_from(NodeId::BS, &BTreeSet::new());
        if reach.len() != self.adj.len() {
            return Err(Error::Config("graph is not connected".into()));
        }
        Ok(())
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adj
    }

    /// Number of sensor nodes (excludes the BS).
    pub fn n(&self) -> usize {
        self.adj.len() - 1
    }

    pub fn d_max(&self) -> usize {
        self.d_max
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.adj.keys().copied()
    }

    pub fn sensors(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes().filter(|s| !s.is_bs())
    }

    pub fn contains(&self, s: NodeId) -> bool {
        self.adj.contains_key(&s)
    }

    /// Neighbors in ascending id order.
    pub fn neighbors(&self, s: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.adj.get(&s).into_iter().flatten().copied()
    }

    pub fn degree(&self, s: NodeId) -> usize {
        self.adj.get(&s).map_or(0, BTreeSet::len)
    }

    pub fn has_edge(&self, a: NodeId, b: NodeId) -> bool {
        self.adj.get(&a).is_some_and(|nb| nb.contains(&b))
    }

    /// Each undirected edge once, as `(lo, hi)`.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.adj
            .iter()
            .flat_map(|(&a, nb)| nb.iter().filter(move |&&b| a < b).map(move |&b| (a, b)))
    }

    pub fn reachable_from(&self, start: NodeId, excluded: &BTreeSet<NodeId>) -> BTreeSet<NodeId> {
        let mut seen = BTreeSet::new();
        if excluded.contains(&start) || !self.contains(start) {
            return seen;
        }
        let mut queue = VecDeque::from([start]);
        seen.insert(start);
        while let Some(u) = queue.pop_front() {
            for v in self.neighbors(u) {
                if !excluded.contains(&v) && seen.insert(v) {
                    queue.push_back(v);
                }
            }
        }
        seen
    }
}
