//! Aggregation tree reconstruction excluding blacklisted nodes: the basic TE/response
//! protocol and the resilient variant built from signed neighbor lists.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::adversary::{Action, Adversary};
use crate::crypto::{AuthEnvelope, NodeId, Nonce, SignatureOracle, SignedBlob};
use crate::error::{Error, Result};
use crate::net::{
    bfs_tree_over, Adjacency, AggregationTree, Broadcast, LocalView, Network, Phase, TreeViews,
};
use crate::wire::{Reader, Writer};

/// Nodes excluded from every future tree. Only ever grows.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlackList(BTreeSet<NodeId>);

impl BlackList {
    pub fn contains(&self, s: NodeId) -> bool {
        self.0.contains(&s)
    }

    /// Adds marked nodes; the BS is never blacklisted. Returns the newly added ones.
    pub fn extend(&mut self, marked: impl IntoIterator<Item = NodeId>) -> Vec<NodeId> {
        marked
            .into_iter()
            .filter(|s| !s.is_bs() && self.0.insert(*s))
            .collect()
    }

    pub fn set(&self) -> &BTreeSet<NodeId> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Result of one reconstruction: the BS's tree and what each node believes about it.
#[derive(Debug, Clone)]
pub struct AtrOutcome {
    pub tree: AggregationTree,
    pub views: TreeViews,
    /// Non-blacklisted sensors that ended up outside the tree.
    pub unreached: BTreeSet<NodeId>,
}

fn encode_ids(ids: impl IntoIterator<Item = NodeId>) -> Vec<u8> {
    let mut w = Writer::new();
    for s in ids {
        w.raw(&s.to_bytes());
    }
    w.finish()
}

fn decode_ids(bytes: &[u8]) -> Result<Vec<NodeId>> {
    if !bytes.len().is_multiple_of(2) {
        return Err(Error::Malformed("odd id list"));
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|c| NodeId(u16::from_be_bytes([c[0], c[1]])))
        .collect())
}

fn encode_bundle<'a>(items: impl IntoIterator<Item = &'a [u8]>) -> Vec<u8> {
    let mut w = Writer::new();
    for it in items {
        w.field(it);
    }
    w.finish()
}

fn decode_bundle(bytes: &[u8]) -> Result<Vec<Vec<u8>>> {
    Ok(Reader::new(bytes)
        .rest()?
        .into_iter()
        .map(<[u8]>::to_vec)
        .collect())
}

fn encode_broadcast(msg: &Broadcast) -> Vec<u8> {
    let mut w = Writer::new();
    w.field(&msg.payload).field(&msg.auth);
    w.finish()
}

fn decode_broadcast(bytes: &[u8]) -> Result<Broadcast> {
    let mut r = Reader::new(bytes);
    let payload = r.field()?.to_vec();
    let auth = r.array()?;
    r.finish()?;
    Ok(Broadcast { payload, auth })
}

/// Distribution message: the whole parent map under the network-wide authenticator.
fn tree_payload(nonce: Nonce, tree: &AggregationTree) -> Vec<u8> {
    let mut w = Writer::new();
    w.u64(nonce.0);
    let mut pairs = Vec::new();
    for (c, p) in tree.parents() {
        pairs.extend_from_slice(&c.to_bytes());
        pairs.extend_from_slice(&p.to_bytes());
    }
    w.field(&pairs);
    w.finish()
}

fn parse_tree_payload(payload: &[u8], nonce: Nonce) -> Result<BTreeMap<NodeId, NodeId>> {
    let mut r = Reader::new(payload);
    if r.u64()? != nonce.0 {
        return Err(Error::Protocol("stale tree distribution".into()));
    }
    let ids = decode_ids(r.field()?)?;
    r.finish()?;
    if ids.len() % 2 != 0 {
        return Err(Error::Malformed("odd parent map"));
    }
    Ok(ids.chunks_exact(2).map(|c| (c[0], c[1])).collect())
}

/// A node's view under a distributed parent map.
fn view_from_map(s: NodeId, map: &BTreeMap<NodeId, NodeId>) -> LocalView {
    match map.get(&s) {
        Some(&p) => LocalView {
            parent: Some(p),
            children: map.iter().filter(|(_, &q)| q == s).map(|(&c, _)| c).collect(),
        },
        None => LocalView::default(),
    }
}

fn bs_child(adj: &Adjacency, bl: &BlackList) -> Result<NodeId> {
    adj.get(&NodeId::BS)
        .into_iter()
        .flatten()
        .copied()
        .find(|&s| !bl.contains(s))
        .ok_or_else(|| Error::Protocol("every BS neighbor is blacklisted".into()))
}

/// Basic reconstruction: the TE message is flooded hop by hop from the BS's child,
/// every node adopts the lowest-id sender of the first fresh TE it hears as parent,
/// confirms childhood, and responses `Auth_{K_s}(N, s, parent, children)` are relayed
/// to the BS. The BS keeps mutually claimed parent/child edges reachable from its child
/// and broadcasts the resulting parent map so nodes prune their local views.
pub fn atr_basic(
    net: &mut Network,
    bl: &BlackList,
    nonce: Nonce,
    adversary: &mut Adversary,
) -> Result<AtrOutcome> {
    net.set_phase(Phase::Atr);
    let graph = net.graph().clone();
    let b = bs_child(graph.adjacency(), bl)?;

    let mut te = Writer::new();
    te.u64(nonce.0)
        .u16(graph.n() as u16)
        .field(&encode_ids(bl.set().iter().copied()));
    let te = encode_broadcast(&net.broadcast_auth(te.finish()));
    let fresh = |net: &Network, bytes: &[u8]| {
        decode_broadcast(bytes).is_ok_and(|m| {
            net.accept_broadcast(&m) && Reader::new(&m.payload).u64().ok() == Some(nonce.0)
        })
    };

    // TE flood in synchronous rounds; `order` is the adoption order (by depth).
    let mut parent: BTreeMap<NodeId, NodeId> = BTreeMap::new();
    let mut order = Vec::new();
    if let Some(bytes) = net.send_link(NodeId::BS, b, &te)? {
        if fresh(net, &bytes) {
            parent.insert(b, NodeId::BS);
            order.push(b);
        }
    }
    let mut frontier: Vec<NodeId> = order.clone();
    while !frontier.is_empty() {
        let mut adopted: BTreeMap<NodeId, NodeId> = BTreeMap::new();
        for &u in &frontier {
            if adversary.has(u, Phase::Atr, |a| *a == Action::TeSuppress) {
                adversary.record(u, &Action::TeSuppress);
                continue;
            }
            for v in graph.neighbors(u).filter(|&v| !v.is_bs() && !bl.contains(v)) {
                let Some(bytes) = net.send_link(u, v, &te)? else { continue };
                if fresh(net, &bytes) && !parent.contains_key(&v) {
                    // frontier is ascending, so the first sender is the lowest id
                    adopted.entry(v).or_insert(u);
                }
            }
        }
        frontier = adopted.keys().copied().collect();
        for (v, u) in adopted {
            parent.insert(v, u);
            order.push(v);
        }
    }

    // childhood confirmations
    let mut local_children: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for &v in &order {
        let p = parent[&v];
        if p.is_bs() {
            continue;
        }
        let mut w = Writer::new();
        w.u64(nonce.0).u16(v.0);
        if net.send_link(v, p, &w.finish())?.is_some() {
            local_children.entry(p).or_default().push(v);
        }
    }
    for c in local_children.values_mut() {
        c.sort();
    }

    // responses, deepest nodes first
    let cap = graph.n();
    let mut inbox: BTreeMap<NodeId, Vec<Vec<u8>>> = BTreeMap::new();
    let mut at_bs: Vec<Vec<u8>> = Vec::new();
    for &v in order.iter().rev() {
        let kids = local_children.get(&v).cloned().unwrap_or_default();
        let mut w = Writer::new();
        w.u64(nonce.0)
            .u16(v.0)
            .u16(parent[&v].0)
            .field(&encode_ids(kids.iter().copied()));
        let own = AuthEnvelope::wrap(net.keys().node_key(v)?, w.finish()).encode();
        let mut relayed = inbox.remove(&v).unwrap_or_default();
        if !relayed.is_empty() && adversary.has(v, Phase::Atr, |a| *a == Action::ResponseDrop) {
            adversary.record(v, &Action::ResponseDrop);
            relayed.clear();
        }
        let mut out = vec![own];
        out.extend(relayed);
        out.truncate(cap);
        let bundle = encode_bundle(out.iter().map(Vec::as_slice));
        let Some(bytes) = net.send_link(v, parent[&v], &bundle)? else { continue };
        let Ok(items) = decode_bundle(&bytes) else { continue };
        if parent[&v].is_bs() {
            at_bs.extend(items);
        } else {
            inbox.entry(parent[&v]).or_default().extend(items);
        }
    }

    // BS assembly: first verified response per node wins
    let mut claims: BTreeMap<NodeId, (NodeId, Vec<NodeId>)> = BTreeMap::new();
    for item in &at_bs {
        let Some((s, p, kids)) = open_response(net, item, nonce) else { continue };
        claims.entry(s).or_insert((p, kids));
    }
    let mut tree_parent = BTreeMap::from([(b, NodeId::BS)]);
    if claims.get(&b).is_some_and(|(p, _)| p.is_bs()) {
        let mut stack = vec![b];
        while let Some(u) = stack.pop() {
            for &c in &claims[&u].1 {
                let mutual = claims.get(&c).is_some_and(|(p, _)| *p == u);
                if mutual && !bl.contains(c) && !tree_parent.contains_key(&c) {
                    tree_parent.insert(c, u);
                    stack.push(c);
                }
            }
        }
    }
    let tree = AggregationTree::from_parents(tree_parent)?;

    // commit: nodes keep only the parts of their local view the BS accepted
    let commit = net.bs_broadcast(NodeId::BS, tree_payload(nonce, &tree))?;
    let map = if net.accept_broadcast(&commit) {
        parse_tree_payload(&commit.payload, nonce)?
    } else {
        BTreeMap::new()
    };
    let mut views = TreeViews::new();
    for s in graph.sensors().filter(|&s| !bl.contains(s)) {
        let view = match parent.get(&s) {
            Some(&p) if map.get(&s) == Some(&p) => LocalView {
                parent: Some(p),
                children: local_children
                    .get(&s)
                    .into_iter()
                    .flatten()
                    .copied()
                    .filter(|c| map.get(c) == Some(&s))
                    .collect(),
            },
            _ => LocalView::default(),
        };
        views.insert(s, view);
    }
    let unreached = graph
        .sensors()
        .filter(|&s| !bl.contains(s) && !tree.contains(s))
        .collect();
    Ok(AtrOutcome { tree, views, unreached })
}

fn open_response(net: &Network, bytes: &[u8], nonce: Nonce) -> Option<(NodeId, NodeId, Vec<NodeId>)> {
    let env = AuthEnvelope::decode(bytes).ok()?;
    let mut r = Reader::new(&env.payload);
    let n = r.u64().ok()?;
    let s = NodeId(r.u16().ok()?);
    let p = NodeId(r.u16().ok()?);
    let kids = decode_ids(r.field().ok()?).ok()?;
    r.finish().ok()?;
    let key = net.keys().node_key(s).ok()?;
    (n == nonce.0 && env.verify(key)).then_some((s, p, kids))
}

/// The BS's connectivity graph from the neighbor-list flood.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectivityGraph {
    pub adj: Adjacency,
    /// Sensors whose neighbor list never reached the BS.
    pub missing: BTreeSet<NodeId>,
}

impl ConnectivityGraph {
    pub fn edges(&self) -> BTreeSet<(NodeId, NodeId)> {
        self.adj
            .iter()
            .flat_map(|(&a, nb)| nb.iter().filter(move |&&b| a < b).map(move |&b| (a, b)))
            .collect()
    }
}

fn nl_blob(oracle: &SignatureOracle, s: NodeId, neighbors: &BTreeSet<NodeId>) -> Result<SignedBlob> {
    oracle.sign(s, encode_ids(neighbors.iter().copied()))
}

/// One-time init: every sensor floods its signed neighbor list, correct nodes relay each
/// fresh list once and ignore neighbors that forwarded an invalid one, and the BS keeps
/// only links announced by both endpoints.
pub fn atr_resilient_init(
    net: &mut Network,
    oracle: &SignatureOracle,
    adversary: &mut Adversary,
) -> Result<ConnectivityGraph> {
    net.set_phase(Phase::AtrInit);
    let graph = net.graph().clone();
    let mut store: BTreeMap<NodeId, BTreeMap<NodeId, Vec<u8>>> =
        graph.nodes().map(|s| (s, BTreeMap::new())).collect();
    let mut ignored: BTreeMap<NodeId, BTreeSet<NodeId>> = BTreeMap::new();
    let mut outbox: BTreeMap<NodeId, Vec<Vec<u8>>> = BTreeMap::new();

    for s in graph.sensors() {
        let mut nl: BTreeSet<NodeId> = graph.neighbors(s).collect();
        let mut extra = Vec::new();
        for a in adversary.active(s, Phase::AtrInit) {
            match a {
                Action::NlFake { claim } if nl.insert(claim) => adversary.record(s, &a),
                Action::NlForge { victim } => {
                    let fake: BTreeSet<NodeId> = [s, victim].into();
                    let mut blob = nl_blob(oracle, s, &fake)?;
                    blob.signer = victim;
                    extra.push(blob.encode());
                    adversary.record(s, &a);
                }
                _ => {}
            }
        }
        let own = nl_blob(oracle, s, &nl)?.encode();
        store.get_mut(&s).unwrap().insert(s, own.clone());
        let mut out = vec![own];
        out.extend(extra);
        outbox.insert(s, out);
    }

    while !outbox.is_empty() {
        let mut next: BTreeMap<NodeId, Vec<Vec<u8>>> = BTreeMap::new();
        for (u, items) in std::mem::take(&mut outbox) {
            let bundle = encode_bundle(items.iter().map(Vec::as_slice));
            for v in graph.neighbors(u) {
                let Some(bytes) = net.send_link(u, v, &bundle)? else { continue };
                if ignored.get(&v).is_some_and(|i| i.contains(&u)) {
                    continue;
                }
                let Ok(items) = decode_bundle(&bytes) else { continue };
                for item in items {
                    let known = &store[&v];
                    let blob = SignedBlob::decode(&item).ok();
                    let Some(blob) = blob else {
                        ignored.entry(v).or_default().insert(u);
                        break;
                    };
                    if known.get(&blob.signer) == Some(&item) {
                        continue;
                    }
                    if !oracle.verify(blob.signer, &blob) {
                        ignored.entry(v).or_default().insert(u);
                        break;
                    }
                    if known.contains_key(&blob.signer) {
                        continue;
                    }
                    store.get_mut(&v).unwrap().insert(blob.signer, item.clone());
                    if !v.is_bs() {
                        next.entry(v).or_default().push(item);
                    }
                }
            }
        }
        outbox = next;
    }

    let lists: BTreeMap<NodeId, BTreeSet<NodeId>> = store[&NodeId::BS]
        .iter()
        .filter_map(|(&s, bytes)| {
            let blob = SignedBlob::decode(bytes).ok()?;
            Some((s, decode_ids(&blob.payload).ok()?.into_iter().collect()))
        })
        .collect();
    let announces = |a: NodeId, b: NodeId| {
        if a.is_bs() {
            graph.has_edge(a, b)
        } else {
            lists.get(&a).is_some_and(|l| l.contains(&b))
        }
    };
    let mut adj: Adjacency = graph.nodes().map(|s| (s, BTreeSet::new())).collect();
    for (&a, nl) in lists.iter().chain([(&NodeId::BS, &graph.neighbors(NodeId::BS).collect())]) {
        for &b in nl {
            if a != b && adj.contains_key(&b) && announces(a, b) && announces(b, a) {
                adj.get_mut(&a).unwrap().insert(b);
                adj.get_mut(&b).unwrap().insert(a);
            }
        }
    }
    let missing = graph.sensors().filter(|s| !lists.contains_key(s)).collect();
    Ok(ConnectivityGraph { adj, missing })
}

/// Centralized reconstruction over the BS's connectivity graph: BFS from the lowest-id
/// non-blacklisted BS neighbor, then one authenticated broadcast of the parent map.
pub fn atr_resilient_build(
    net: &mut Network,
    cg: &ConnectivityGraph,
    bl: &BlackList,
    nonce: Nonce,
) -> Result<AtrOutcome> {
    net.set_phase(Phase::Atr);
    let b = bs_child(&cg.adj, bl)?;
    let (tree, unreached) = bfs_tree_over(&cg.adj, b, bl.set())?;
    let msg = net.bs_broadcast(NodeId::BS, tree_payload(nonce, &tree))?;
    let mut views = TreeViews::new();
    if net.accept_broadcast(&msg) {
        let map = parse_tree_payload(&msg.payload, nonce)?;
        for s in net.graph().sensors().filter(|&s| !bl.contains(s)) {
            views.insert(s, view_from_map(s, &map));
        }
    }
    Ok(AtrOutcome { tree, views, unreached })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversary::{AdversaryConfig, ScriptedAction, SessionSelector};
    use crate::crypto::KeyStore;
    use crate::net::{view_mismatches, NetworkGraph};

    const N: Nonce = Nonce(77);

    // BS - 1 - {2, 3}, 2 - 4, 3 - 4, 4 - 5, 3 - 6
    fn net() -> Network {
        let e = [(0, 1), (1, 2), (1, 3), (2, 4), (3, 4), (4, 5), (3, 6)];
        let edges: Vec<_> = e.iter().map(|&(a, b)| (NodeId(a), NodeId(b))).collect();
        let g = NetworkGraph::new(6, &edges, 8).unwrap();
        let keys = KeyStore::derive(5, g.nodes(), g.edges());
        Network::new(g, keys)
    }

    fn adversary(script: &[(u16, Action)]) -> Adversary {
        let mut adv = Adversary::new(&AdversaryConfig {
            faulty: script.iter().map(|(s, _)| NodeId(*s)).collect(),
            script: script
                .iter()
                .map(|(s, a)| ScriptedAction { node: NodeId(*s), action: a.clone(), sessions: SessionSelector::All })
                .collect(),
        });
        adv.set_session(1);
        adv
    }

    fn bl(ids: &[u16]) -> BlackList {
        let mut bl = BlackList::default();
        bl.extend(ids.iter().map(|&i| NodeId(i)));
        bl
    }

    fn parents(t: &AggregationTree) -> Vec<(u16, u16)> {
        t.parents().iter().map(|(c, p)| (c.0, p.0)).collect()
    }

    #[test]
    fn basic_spans_everything_and_views_agree() {
        let mut net = net();
        let out = atr_basic(&mut net, &BlackList::default(), N, &mut Adversary::honest()).unwrap();
        // 4 hears 2 and 3 in the same round and picks 2
        assert_eq!(parents(&out.tree), vec![(1, 0), (2, 1), (3, 1), (4, 2), (5, 4), (6, 3)]);
        assert!(out.unreached.is_empty());
        assert!(view_mismatches(&out.tree, &out.views, |_| true).is_empty());
        assert!(net.ledger().max_edge() > 0);
    }

    #[test]
    fn basic_excludes_blacklist() {
        let mut net = net();
        let out = atr_basic(&mut net, &bl(&[2]), N, &mut Adversary::honest()).unwrap();
        assert_eq!(parents(&out.tree), vec![(1, 0), (3, 1), (4, 3), (5, 4), (6, 3)]);
        assert!(!out.views.contains_key(&NodeId(2)));
    }

    #[test]
    fn dropped_responses_lose_the_subtree_but_keep_views_consistent() {
        let mut net = net();
        let mut adv = adversary(&[(4, Action::ResponseDrop)]);
        let out = atr_basic(&mut net, &BlackList::default(), N, &mut adv).unwrap();
        assert!(!out.tree.contains(NodeId(5)));
        assert!(out.tree.contains(NodeId(4)));
        assert_eq!(out.unreached, BTreeSet::from([NodeId(5)]));
        let correct = |s: NodeId| s != NodeId(4);
        assert!(view_mismatches(&out.tree, &out.views, correct).is_empty());
        assert_eq!(out.views[&NodeId(5)], LocalView::default());
        assert_eq!(adv.trace().misbehaved(1), BTreeSet::from([NodeId(4)]));
    }

    #[test]
    fn suppressed_te_reroutes_around_the_suppressor() {
        let mut net = net();
        let mut adv = adversary(&[(2, Action::TeSuppress)]);
        let out = atr_basic(&mut net, &BlackList::default(), N, &mut adv).unwrap();
        assert_eq!(out.tree.parent(NodeId(4)), Some(NodeId(3)));
        assert!(out.tree.is_leaf(NodeId(2)));
        assert!(view_mismatches(&out.tree, &out.views, |s| s != NodeId(2)).is_empty());
    }

    #[test]
    fn resilient_graph_matches_topology_when_honest() {
        let mut net = net();
        let oracle = SignatureOracle::new(net.keys());
        let cg = atr_resilient_init(&mut net, &oracle, &mut Adversary::honest()).unwrap();
        let truth: BTreeSet<_> = net.graph().edges().collect();
        assert_eq!(cg.edges(), truth);
        assert!(cg.missing.is_empty());
    }

    #[test]
    fn fake_links_are_not_mutual() {
        let mut net = net();
        let oracle = SignatureOracle::new(net.keys());
        let mut adv = adversary(&[(5, Action::NlFake { claim: NodeId(1) })]);
        let cg = atr_resilient_init(&mut net, &oracle, &mut adv).unwrap();
        assert!(!cg.edges().contains(&(NodeId(1), NodeId(5))));
        assert_eq!(cg.edges(), net.graph().edges().collect());
    }

    #[test]
    fn forged_lists_are_dropped_and_forwarder_ignored() {
        let mut net = net();
        let oracle = SignatureOracle::new(net.keys());
        let mut adv = adversary(&[(5, Action::NlForge { victim: NodeId(6) })]);
        let cg = atr_resilient_init(&mut net, &oracle, &mut adv).unwrap();
        // 5's forged list claimed the link 5-6; 6's real list does not back it
        assert_eq!(cg.edges(), net.graph().edges().collect());
        assert!(cg.missing.is_empty());
    }

    #[test]
    fn nl_flood_cost_is_linear_in_n() {
        // each node relays each list at most once per neighbor, so an edge carries at most
        // 2n lists; bound per list by its encoded size with a degree-8 neighbor list
        let mut net = net();
        let oracle = SignatureOracle::new(net.keys());
        atr_resilient_init(&mut net, &oracle, &mut Adversary::honest()).unwrap();
        let n = net.graph().n();
        let list_len = SignedBlob { signer: NodeId(1), payload: vec![0; 2 * 8], sig: [0; 32] }.encode().len() + 4;
        let rounds_overhead = 16 * 2 * (n + 1);
        assert!(net.ledger().max_edge() as usize <= 2 * n * list_len + rounds_overhead);
    }

    #[test]
    fn resilient_build_distributes_the_tree() {
        let mut net = net();
        let oracle = SignatureOracle::new(net.keys());
        let cg = atr_resilient_init(&mut net, &oracle, &mut Adversary::honest()).unwrap();
        let out = atr_resilient_build(&mut net, &cg, &bl(&[1]), N);
        assert!(out.is_err(), "1 is the only BS neighbor");
        let out = atr_resilient_build(&mut net, &cg, &bl(&[2]), N).unwrap();
        assert_eq!(parents(&out.tree), vec![(1, 0), (3, 1), (4, 3), (5, 4), (6, 3)]);
        assert!(view_mismatches(&out.tree, &out.views, |_| true).is_empty());
        let out = atr_resilient_build(&mut net, &cg, &bl(&[3, 4]), N).unwrap();
        assert_eq!(out.unreached, BTreeSet::from([NodeId(5), NodeId(6)]));
    }

    #[test]
    fn blacklist_ignores_the_bs() {
        let mut b = BlackList::default();
        assert_eq!(b.extend([NodeId::BS, NodeId(3), NodeId(3)]), vec![NodeId(3)]);
        assert_eq!(b.len(), 1);
    }
}
