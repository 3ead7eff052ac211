//! Simulated network: topology, aggregation tree, authenticated link channel,
//! BS broadcast oracle and per-edge congestion accounting.

mod graph;
mod ledger;
mod tree;

pub use graph::{Adjacency, NetworkGraph};
pub use ledger::{edge, CongestionLedger, Edge, Phase};
pub use tree::{
    bfs_tree, bfs_tree_over, choose_bs_child, schedule_epochs, tree_metrics, AggregationTree, TreeMetrics,
};

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::crypto::{mac, AuthEnvelope, KeyStore, NodeId, TAG_LEN};
use crate::error::{Error, Result};

/// A network-wide authenticated broadcast from the BS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Broadcast {
    pub payload: Vec<u8>,
    pub auth: [u8; TAG_LEN],
}

/// Graph + keys + ledger. Every protocol message goes through here so congestion is exact.
#[derive(Debug, Clone)]
pub struct Network {
    graph: NetworkGraph,
    keys: KeyStore,
    ledger: CongestionLedger,
    phase: Phase,
    flood_edges: Vec<Edge>,
}

impl Network {
    pub fn new(graph: NetworkGraph, keys: KeyStore) -> Self {
        let flood_edges = flood_tree(&graph);
        Self {
            graph,
            keys,
            ledger: CongestionLedger::default(),
            phase: Phase::Query,
            flood_edges,
        }
    }

    pub fn graph(&self) -> &NetworkGraph {
        &self.graph
    }

    pub fn keys(&self) -> &KeyStore {
        &self.keys
    }

    pub fn ledger(&self) -> &CongestionLedger {
        &self.ledger
    }

    pub fn take_ledger(&mut self) -> CongestionLedger {
        std::mem::take(&mut self.ledger)
    }

    pub fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Wraps `payload` under `K_{from,to}` and delivers it.
    pub fn send_link(&mut self, from: NodeId, to: NodeId, payload: &[u8]) -> Result<Option<Vec<u8>>> {
        if !self.graph.has_edge(from, to) {
            return Err(Error::NotAnEdge { from, to });
        }
        let env = AuthEnvelope::wrap(self.keys.link_key(from, to)?, payload.to_vec());
        self.transmit(from, to, env)
    }

    /// Charges the edge and lets the receiver verify; a failed check drops the message silently.
    pub fn transmit(&mut self, from: NodeId, to: NodeId, env: AuthEnvelope) -> Result<Option<Vec<u8>>> {
        if !self.graph.has_edge(from, to) {
            return Err(Error::NotAnEdge { from, to });
        }
        self.ledger
            .charge(self.phase, from, to, env.payload.len() + TAG_LEN);
        if env.verify(self.keys.link_key(from, to)?) {
            Ok(Some(env.payload))
        } else {
            Ok(None)
        }
    }

    /// Ideal network-wide broadcast: flooded once over a fixed BFS spanning tree of the graph.
    pub fn bs_broadcast(&mut self, caller: NodeId, payload: Vec<u8>) -> Result<Broadcast> {
        if !caller.is_bs() {
            return Err(Error::NotBaseStation(caller));
        }
        let auth = mac(self.keys.broadcast_key(), &payload).0;
        let size = payload.len() + TAG_LEN;
        for &(a, b) in &self.flood_edges {
            self.ledger.charge(self.phase, a, b, size);
        }
        Ok(Broadcast { payload, auth })
    }

    /// Authenticator for a BS message that is relayed hop by hop instead of through the oracle.
    pub fn broadcast_auth(&self, payload: Vec<u8>) -> Broadcast {
        let auth = mac(self.keys.broadcast_key(), &payload).0;
        Broadcast { payload, auth }
    }

    pub fn accept_broadcast(&self, msg: &Broadcast) -> bool {
        mac(self.keys.broadcast_key(), &msg.payload).0 == msg.auth
    }

    /// Edges charged by every broadcast.
    pub fn broadcast_edges(&self) -> &[Edge] {
        &self.flood_edges
    }
}

fn flood_tree(graph: &NetworkGraph) -> Vec<Edge> {
    let mut seen = BTreeSet::from([NodeId::BS]);
    let mut queue = VecDeque::from([NodeId::BS]);
    let mut out = Vec::new();
    while let Some(u) = queue.pop_front() {
        for v in graph.neighbors(u) {
            if seen.insert(v) {
                out.push(edge(u, v));
                queue.push_back(v);
            }
        }
    }
    out
}

/// Per-node local view of the tree: each node knows its parent and children.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LocalView {
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
}

pub type TreeViews = BTreeMap<NodeId, LocalView>;

/// Nodes of `tree` (restricted to `correct`) whose local view disagrees with the BS tree.
pub fn view_mismatches(
    tree: &AggregationTree,
    views: &TreeViews,
    correct: impl Fn(NodeId) -> bool,
) -> Vec<NodeId> {
    tree.members()
        .filter(|&s| correct(s))
        .filter(|&s| {
            let expect = LocalView {
                parent: tree.parent(s),
                children: tree.children(s).to_vec(),
            };
            views.get(&s) != Some(&expect)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path(n: u16) -> Network {
        let edges: Vec<_> = (0..n).map(|i| (NodeId(i), NodeId(i + 1))).collect();
        let g = NetworkGraph::new(n, &edges, 2).unwrap();
        let keys = KeyStore::derive(1, g.nodes(), g.edges());
        Network::new(g, keys)
    }

    #[test]
    fn link_send_charges_payload_plus_tag() {
        let mut net = path(3);
        let got = net.send_link(NodeId(1), NodeId(2), b"hello").unwrap();
        assert_eq!(got.as_deref(), Some(&b"hello"[..]));
        assert_eq!(net.ledger().edge_bytes(NodeId(1), NodeId(2)), 5 + 16);
    }

    #[test]
    fn tampered_envelope_is_dropped_but_charged() {
        let mut net = path(3);
        let key = *net.keys().link_key(NodeId(1), NodeId(2)).unwrap();
        let mut env = AuthEnvelope::wrap(&key, b"hello".to_vec());
        env.payload[0] ^= 1;
        assert_eq!(net.transmit(NodeId(1), NodeId(2), env).unwrap(), None);
        assert_eq!(net.ledger().edge_bytes(NodeId(1), NodeId(2)), 21);
    }

    #[test]
    fn non_edge_send_is_an_error() {
        let mut net = path(3);
        assert!(matches!(
            net.send_link(NodeId(1), NodeId(3), b"x"),
            Err(Error::NotAnEdge { .. })
        ));
    }

    #[test]
    fn broadcast_on_path_charges_each_edge_once() {
        // 5 sensors on a path: each of the 5 edges relays the message exactly once
        let mut net = path(5);
        let msg = net.bs_broadcast(NodeId::BS, vec![7; 10]).unwrap();
        assert!(net.accept_broadcast(&msg));
        for i in 0..5 {
            assert_eq!(net.ledger().edge_bytes(NodeId(i), NodeId(i + 1)), 26);
        }
    }

    #[test]
    fn forged_broadcasts_are_rejected() {
        let mut net = path(3);
        assert!(matches!(
            net.bs_broadcast(NodeId(2), vec![1]),
            Err(Error::NotBaseStation(_))
        ));
        // a faulty node only holds its own keys; the best it can do is MAC with one of them
        let key = *net.keys().node_key(NodeId(2)).unwrap();
        let fake = Broadcast {
            payload: vec![1, 2, 3],
            auth: mac(&key, &[1, 2, 3]).0,
        };
        assert!(!net.accept_broadcast(&fake));
        let mut real = net.bs_broadcast(NodeId::BS, vec![1, 2, 3]).unwrap();
        real.payload[1] = 9;
        assert!(!net.accept_broadcast(&real));
    }
}
