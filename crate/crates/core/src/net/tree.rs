use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::graph::{Adjacency, NetworkGraph};
use crate::crypto::NodeId;
use crate::error::{Error, Result};

/// Rooted aggregation tree `T_A`. The root is always the BS, which has exactly one child.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregationTree {
    parent: BTreeMap<NodeId, NodeId>,
    children: BTreeMap<NodeId, Vec<NodeId>>,
}

/// `h_A` and `Δ_A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeMetrics {
    pub height: usize,
    pub max_degree: usize,
}

impl AggregationTree {
    pub fn from_parents(parent: BTreeMap<NodeId, NodeId>) -> Result<Self> {
        if parent.contains_key(&NodeId::BS) {
            return Err(Error::Config("BS cannot have a parent".into()));
        }
        let mut children: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        children.insert(NodeId::BS, Vec::new());
        for &s in parent.keys() {
            children.insert(s, Vec::new());
        }
        for (&s, &p) in &parent {
            children
                .get_mut(&p)
                .ok_or_else(|| Error::Config(format!("parent {p} of {s} is not in the tree")))?
                .push(s);
        }
        // BTreeMap iteration already yields ascending children
        if children[&NodeId::BS].len() != 1 {
            return Err(Error::Config(format!(
                "BS must have exactly one child, has {}",
                children[&NodeId::BS].len()
            )));
        }
        let tree = Self { parent, children };
        let mut seen = 0;
        let mut queue = VecDeque::from([NodeId::BS]);
        while let Some(u) = queue.pop_front() {
            seen += 1;
            queue.extend(tree.children(u).iter().copied());
        }
        if seen != tree.children.len() {
            return Err(Error::Config("parent map contains a cycle".into()));
        }
        Ok(tree)
    }

    /// Single-child-of-BS check against the connectivity graph.
    pub fn check_against(&self, graph: &NetworkGraph) -> Result<()> {
        for (&s, &p) in &self.parent {
            if !graph.has_edge(s, p) {
                return Err(Error::Config(format!("tree edge ({p}, {s}) is not a graph edge")));
            }
        }
        Ok(())
    }

    /// The single child `b` of the BS.
    pub fn bs_child(&self) -> NodeId {
        self.children[&NodeId::BS][0]
    }

    pub fn parent(&self, s: NodeId) -> Option<NodeId> {
        self.parent.get(&s).copied()
    }

    pub fn parents(&self) -> &BTreeMap<NodeId, NodeId> {
        &self.parent
    }

    pub fn children(&self, s: NodeId) -> &[NodeId] {
        self.children.get(&s).map_or(&[], Vec::as_slice)
    }

    pub fn contains(&self, s: NodeId) -> bool {
        s.is_bs() || self.parent.contains_key(&s)
    }

    pub fn is_leaf(&self, s: NodeId) -> bool {
        self.children(s).is_empty()
    }

    /// Sensor members in ascending id order.
    pub fn members(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.parent.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    /// All nodes in the subtree rooted at `s`, including `s`.
    pub fn subtree(&self, s: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![s];
        while let Some(u) = stack.pop() {
            out.push(u);
            stack.extend(self.children(u).iter().rev().copied());
        }
        out
    }

    /// Ancestors of `s` from its parent up to (and excluding) the BS.
    pub fn path_to_root(&self, s: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut cur = self.parent(s);
        while let Some(p) = cur {
            if p.is_bs() {
                break;
            }
            out.push(p);
            cur = self.parent(p);
        }
        out
    }

    pub fn metrics(&self) -> TreeMetrics {
        tree_metrics(self)
    }

    /// Leaves-first level sets; see [`schedule_epochs`].
    pub fn epochs(&self) -> Vec<Vec<NodeId>> {
        schedule_epochs(self)
    }
}

/// Height counts edges from the BS to the deepest leaf; degree counts the parent edge for sensors.
pub fn tree_metrics(tree: &AggregationTree) -> TreeMetrics {
    let mut height = 0;
    let mut stack = vec![(NodeId::BS, 0usize)];
    while let Some((u, d)) = stack.pop() {
        height = height.max(d);
        stack.extend(tree.children(u).iter().map(|&c| (c, d + 1)));
    }
    let max_degree = tree
        .members()
        .map(|s| tree.children(s).len() + 1)
        .max()
        .unwrap_or(0);
    TreeMetrics { height, max_degree }
}

/// Groups sensors by subtree height: leaves first, every node strictly after all its children.
pub fn schedule_epochs(tree: &AggregationTree) -> Vec<Vec<NodeId>> {
    fn level(tree: &AggregationTree, s: NodeId, memo: &mut BTreeMap<NodeId, usize>) -> usize {
        // iterative post-order to stay safe on long chains
        let mut stack = vec![(s, false)];
        while let Some((u, expanded)) = stack.pop() {
            if memo.contains_key(&u) {
                continue;
            }
            if expanded {
                let l = tree
                    .children(u)
                    .iter()
                    .map(|c| memo[c] + 1)
                    .max()
                    .unwrap_or(0);
                memo.insert(u, l);
            } else {
                stack.push((u, true));
                stack.extend(tree.children(u).iter().map(|&c| (c, false)));
            }
        }
        memo[&s]
    }
    let mut memo = BTreeMap::new();
    let mut epochs: Vec<Vec<NodeId>> = Vec::new();
    if tree.is_empty() {
        return epochs;
    }
    level(tree, tree.bs_child(), &mut memo);
    for (s, l) in memo {
        if epochs.len() <= l {
            epochs.resize(l + 1, Vec::new());
        }
        epochs[l].push(s);
    }
    epochs
}

/// Deterministic BFS tree rooted at `b` over `graph` minus `excluded` and the BS.
/// Each node's parent is its lowest-id neighbor one hop closer to `b`.
/// Returns the tree and the non-excluded sensors it could not reach.
pub fn bfs_tree(
    graph: &NetworkGraph,
    b: NodeId,
    excluded: &BTreeSet<NodeId>,
) -> Result<(AggregationTree, BTreeSet<NodeId>)> {
    bfs_tree_over(graph.adjacency(), b, excluded)
}

/// [`bfs_tree`] over an arbitrary adjacency map (e.g. the BS's view of the topology).
pub fn bfs_tree_over(
    adj: &Adjacency,
    b: NodeId,
    excluded: &BTreeSet<NodeId>,
) -> Result<(AggregationTree, BTreeSet<NodeId>)> {
    let mut blocked = excluded.clone();
    blocked.insert(NodeId::BS);
    let neighbors = |u: NodeId| adj.get(&u).into_iter().flatten().copied();
    let mut dist: BTreeMap<NodeId, usize> = BTreeMap::new();
    dist.insert(b, 0);
    let mut queue = VecDeque::from([b]);
    while let Some(u) = queue.pop_front() {
        for v in neighbors(u) {
            if !blocked.contains(&v) && !dist.contains_key(&v) {
                dist.insert(v, dist[&u] + 1);
                queue.push_back(v);
            }
        }
    }
    let mut parent = BTreeMap::new();
    parent.insert(b, NodeId::BS);
    for (&v, &d) in &dist {
        if v == b {
            continue;
        }
        let p = neighbors(v)
            .find(|u| dist.get(u) == Some(&(d - 1)))
            .expect("bfs node has a closer neighbor");
        parent.insert(v, p);
    }
    let unreached = adj
        .keys()
        .filter(|s| !s.is_bs() && !excluded.contains(s) && !dist.contains_key(s))
        .copied()
        .collect();
    Ok((AggregationTree::from_parents(parent)?, unreached))
}

/// The BS's child under a given blacklist: its lowest-id non-excluded neighbor.
pub fn choose_bs_child(graph: &NetworkGraph, excluded: &BTreeSet<NodeId>) -> Option<NodeId> {
    graph.neighbors(NodeId::BS).find(|s| !excluded.contains(s))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tree(pairs: &[(u16, u16)]) -> AggregationTree {
        AggregationTree::from_parents(
            pairs
                .iter()
                .map(|&(c, p)| (NodeId(c), NodeId(p)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn chain_metrics_and_schedule() {
        // BS -> 1 -> 2 -> 3 -> 4
        let t = tree(&[(1, 0), (2, 1), (3, 2), (4, 3)]);
        assert_eq!(t.metrics(), TreeMetrics { height: 4, max_degree: 2 });
        let short = tree(&[(1, 0), (2, 1)]);
        assert_eq!(short.epochs(), vec![vec![NodeId(2)], vec![NodeId(1)]]);
    }

    #[test]
    fn star_metrics_and_schedule() {
        let t = tree(&[(1, 0), (2, 1), (3, 1), (4, 1), (5, 1), (6, 1)]);
        assert_eq!(t.metrics(), TreeMetrics { height: 2, max_degree: 6 });
        let e = t.epochs();
        assert_eq!(e.len(), 2);
        assert_eq!(e[0], (2..=6).map(NodeId).collect::<Vec<_>>());
        assert_eq!(e[1], vec![NodeId(1)]);
    }

    #[test]
    fn rejects_malformed_parent_maps() {
        let two_roots = [(NodeId(1), NodeId(0)), (NodeId(2), NodeId(0))];
        assert!(AggregationTree::from_parents(two_roots.into_iter().collect()).is_err());
        let cycle = [(NodeId(1), NodeId(0)), (NodeId(2), NodeId(3)), (NodeId(3), NodeId(2))];
        assert!(AggregationTree::from_parents(cycle.into_iter().collect()).is_err());
        let dangling = [(NodeId(1), NodeId(0)), (NodeId(2), NodeId(9))];
        assert!(AggregationTree::from_parents(dangling.into_iter().collect()).is_err());
    }

    #[test]
    fn children_sorted_and_subtree() {
        let t = tree(&[(5, 0), (9, 5), (2, 5), (7, 2)]);
        assert_eq!(t.children(NodeId(5)), &[NodeId(2), NodeId(9)]);
        assert_eq!(t.subtree(NodeId(5)), vec![NodeId(5), NodeId(2), NodeId(7), NodeId(9)]);
        assert_eq!(t.path_to_root(NodeId(7)), vec![NodeId(2), NodeId(5)]);
        assert_eq!(t.bs_child(), NodeId(5));
    }

    #[test]
    fn bfs_tree_prefers_low_id_parents_and_reports_unreached() {
        // 0-1, 1-2, 1-3, 2-4, 3-4, 0-5 (5 only reachable through BS)
        let edges: Vec<_> = [(0, 1), (1, 2), (1, 3), (2, 4), (3, 4), (0, 5)]
            .iter()
            .map(|&(a, b)| (NodeId(a), NodeId(b)))
            .collect();
        let g = NetworkGraph::new(5, &edges, 4).unwrap();
        let (t, unreached) = bfs_tree(&g, NodeId(1), &BTreeSet::new()).unwrap();
        assert_eq!(t.parent(NodeId(4)), Some(NodeId(2)));
        assert_eq!(unreached, BTreeSet::from([NodeId(5)]));
        let (t, _) = bfs_tree(&g, NodeId(1), &BTreeSet::from([NodeId(2)])).unwrap();
        assert_eq!(t.parent(NodeId(4)), Some(NodeId(3)));
        assert!(!t.contains(NodeId(2)));
    }
}
