use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::crypto::NodeId;

/// Protocol phases; congestion and adversary scripts are keyed by these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Query,
    Commit,
    ResultCheck,
    AckCollect,
    Als1,
    Als2,
    AtrInit,
    Atr,
}

impl Phase {
    pub fn is_shia(self) -> bool {
        matches!(
            self,
            Phase::Query | Phase::Commit | Phase::ResultCheck | Phase::AckCollect
        )
    }
}

pub type Edge = (NodeId, NodeId);

pub fn edge(a: NodeId, b: NodeId) -> Edge {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Per-edge byte counters for one session, split by phase.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CongestionLedger {
    by_phase: BTreeMap<Phase, BTreeMap<Edge, u64>>,
}

impl CongestionLedger {
    pub fn charge(&mut self, phase: Phase, a: NodeId, b: NodeId, bytes: usize) {
        *self
            .by_phase
            .entry(phase)
            .or_default()
            .entry(edge(a, b))
            .or_default() += bytes as u64;
    }

    pub fn reset(&mut self) {
        self.by_phase.clear();
    }

    pub fn edge_bytes(&self, a: NodeId, b: NodeId) -> u64 {
        let e = edge(a, b);
        self.by_phase
            .values()
            .filter_map(|m| m.get(&e))
            .sum()
    }

    pub fn phase_edge_bytes(&self, phase: Phase, a: NodeId, b: NodeId) -> u64 {
        self.by_phase
            .get(&phase)
            .and_then(|m| m.get(&edge(a, b)))
            .copied()
            .unwrap_or(0)
    }

    pub fn totals(&self) -> BTreeMap<Edge, u64> {
        let mut out: BTreeMap<Edge, u64> = BTreeMap::new();
        for m in self.by_phase.values() {
            for (&e, &b) in m {
                *out.entry(e).or_default() += b;
            }
        }
        out
    }

    /// Session cost: the maximum edge congestion.
    pub fn max_edge(&self) -> u64 {
        self.totals().into_values().max().unwrap_or(0)
    }

    pub fn phase_max(&self) -> BTreeMap<Phase, u64> {
        self.by_phase
            .iter()
            .map(|(&p, m)| (p, m.values().copied().max().unwrap_or(0)))
            .collect()
    }

    pub fn merge(&mut self, other: &CongestionLedger) {
        for (&p, m) in &other.by_phase {
            let dst = self.by_phase.entry(p).or_default();
            for (&e, &b) in m {
                *dst.entry(e).or_default() += b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulates_per_undirected_edge() {
        let mut l = CongestionLedger::default();
        l.charge(Phase::Commit, NodeId(1), NodeId(2), 10);
        l.charge(Phase::AckCollect, NodeId(2), NodeId(1), 5);
        l.charge(Phase::Commit, NodeId(0), NodeId(1), 3);
        assert_eq!(l.edge_bytes(NodeId(1), NodeId(2)), 15);
        assert_eq!(l.max_edge(), 15);
        assert_eq!(l.phase_max()[&Phase::Commit], 10);
        assert_eq!(l.edge_bytes(NodeId(3), NodeId(4)), 0);
        l.reset();
        assert_eq!(l.max_edge(), 0);
    }
}
