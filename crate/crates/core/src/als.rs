//! Adversary localization: onion-authenticated collection of confirmations (ALS.I)
//! and of stored acks (ALS.II), and the BS-side recursive processing that marks
//! (child, parent) pairs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::adversary::{Action, GARBLE_REPORT};
use crate::crypto::{Ack, AuthEnvelope, KeyStore, NodeId, Nonce, ACK_LEN};
use crate::error::{Error, Result};
use crate::net::{AggregationTree, Phase};
use crate::session::SessionCtx;
use crate::shia::ShiaState;
use crate::wire::{Reader, Writer};

const NR_TAG: u8 = 0x00;
const ENV_TAG: u8 = 0x01;

/// A slot in an onion message: either the reserved "no message received" marker or
/// an envelope under the sender's `K_s`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OnionMsg {
    NoneReceived,
    Envelope(AuthEnvelope),
}

impl OnionMsg {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            OnionMsg::NoneReceived => vec![NR_TAG],
            OnionMsg::Envelope(env) => {
                let mut out = vec![ENV_TAG];
                out.extend_from_slice(&env.encode());
                out
            }
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        match bytes.split_first() {
            Some((&NR_TAG, [])) => Ok(OnionMsg::NoneReceived),
            Some((&ENV_TAG, rest)) => Ok(OnionMsg::Envelope(AuthEnvelope::decode(rest)?)),
            _ => Err(Error::Malformed("unknown onion tag")),
        }
    }

    pub fn nr_bytes() -> Vec<u8> {
        vec![NR_TAG]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkRule {
    /// Nothing reached the BS from its child.
    Missing,
    /// The slot held the "no message received" marker.
    NoMessage,
    BadAuth,
    BadNonce,
    BadStructure,
    /// Reported ack of a leaf child differs from its MAC.
    AckLeaf,
    /// Reported ack of an internal child differs from its own MAC XOR its reported child acks.
    AckInternal,
}

/// One marking event: `node` and `parent` are both marked unless `parent` is the BS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mark {
    pub rule: MarkRule,
    pub node: NodeId,
    pub parent: NodeId,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkSet {
    pub marks: Vec<Mark>,
}

impl MarkSet {
    fn mark(&mut self, rule: MarkRule, node: NodeId, parent: NodeId) {
        self.marks.push(Mark { rule, node, parent });
    }

    pub fn nodes(&self) -> BTreeSet<NodeId> {
        self.marks
            .iter()
            .flat_map(|m| [m.node, m.parent])
            .filter(|s| !s.is_bs())
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.marks.is_empty()
    }
}

/// Checks envelope key and nonce, returning the fields after the nonce.
fn open(keys: &KeyStore, s: NodeId, bytes: Option<&[u8]>, nonce: Nonce) -> Result<Vec<Vec<u8>>, MarkRule> {
    let bytes = bytes.ok_or(MarkRule::Missing)?;
    let env = match OnionMsg::decode(bytes) {
        Ok(OnionMsg::NoneReceived) => return Err(MarkRule::NoMessage),
        Ok(OnionMsg::Envelope(env)) => env,
        Err(_) => return Err(MarkRule::BadStructure),
    };
    let key = keys.node_key(s).map_err(|_| MarkRule::BadAuth)?;
    if !env.verify(key) {
        return Err(MarkRule::BadAuth);
    }
    let mut r = Reader::new(&env.payload);
    match r.u64() {
        Ok(n) if n == nonce.0 => {}
        _ => return Err(MarkRule::BadNonce),
    }
    r.rest()
        .map(|v| v.into_iter().map(<[u8]>::to_vec).collect())
        .map_err(|_| MarkRule::BadStructure)
}

fn announce(ctx: &mut SessionCtx<'_>, what: &[u8]) -> Result<()> {
    let mut w = Writer::new();
    w.u64(ctx.nonce.0).field(what);
    ctx.net.bs_broadcast(NodeId::BS, w.finish())?;
    Ok(())
}

/// Delivers `msg` from `s` to its tree parent; returns what the parent received.
fn send_up(ctx: &mut SessionCtx<'_>, s: NodeId, msg: &[u8]) -> Result<Option<Vec<u8>>> {
    let parent = ctx.tree.parent(s).expect("member has parent");
    ctx.net.send_link(s, parent, msg)
}

/// Hierarchical collection of confirmations. Returns `M_b` as received by the BS.
pub fn als1_collect(ctx: &mut SessionCtx<'_>, shia: &ShiaState) -> Result<Option<Vec<u8>>> {
    ctx.net.set_phase(Phase::Als1);
    announce(ctx, b"als1")?;
    let tree = ctx.tree;
    let mut received: BTreeMap<NodeId, Vec<u8>> = BTreeMap::new();
    let mut at_bs = None;
    for epoch in tree.epochs() {
        for s in epoch {
            if !shia.verified(s) {
                continue;
            }
            let mut slots: Vec<Vec<u8>> = tree
                .children(s)
                .iter()
                .map(|c| received.remove(c).unwrap_or_else(OnionMsg::nr_bytes))
                .collect();
            for a in ctx.adversary.active(s, Phase::Als1) {
                if let Action::ConfirmTamper { slot } = a {
                    if let Some(bytes) = slots.get_mut(slot) {
                        let last = bytes.len() - 1;
                        bytes[last] ^= 0xFF;
                        ctx.adversary.record(s, &a);
                    }
                }
            }
            if ctx.adversary.has(s, Phase::Als1, |a| *a == Action::ConfirmDrop) {
                ctx.adversary.record(s, &Action::ConfirmDrop);
                continue;
            }
            let mut w = Writer::new();
            w.u64(ctx.nonce.0);
            for slot in &slots {
                w.field(slot);
            }
            let key = ctx.net.keys().node_key(s)?;
            let msg = OnionMsg::Envelope(AuthEnvelope::wrap(key, w.finish())).encode();
            if let Some(bytes) = send_up(ctx, s, &msg)? {
                if tree.parent(s) == Some(NodeId::BS) {
                    at_bs = Some(bytes);
                } else {
                    received.insert(s, bytes);
                }
            }
        }
    }
    Ok(at_bs)
}

/// Recursive processing of confirmations against the tree the BS knows.
pub fn als1_process(tree: &AggregationTree, keys: &KeyStore, m_b: Option<&[u8]>, nonce: Nonce) -> MarkSet {
    let mut marks = MarkSet::default();
    let mut stack: Vec<(NodeId, NodeId, Option<Vec<u8>>)> =
        vec![(tree.bs_child(), NodeId::BS, m_b.map(<[u8]>::to_vec))];
    while let Some((u, parent, bytes)) = stack.pop() {
        match open(keys, u, bytes.as_deref(), nonce) {
            Err(rule) => marks.mark(rule, u, parent),
            Ok(slots) if slots.len() != tree.children(u).len() => {
                marks.mark(MarkRule::BadStructure, u, parent)
            }
            Ok(slots) => {
                // reversed so children are processed in ascending order
                for (&c, slot) in tree.children(u).iter().zip(slots).rev() {
                    stack.push((c, u, Some(slot)));
                }
            }
        }
    }
    marks
}

/// `Ā_s`: XOR of the acks of every node in the subtree of `node`.
pub fn expected_ack(keys: &KeyStore, tree: &AggregationTree, node: NodeId, nonce: Nonce) -> Result<Ack> {
    tree.subtree(node)
        .into_iter()
        .try_fold(Ack::ZERO, |acc, s| Ok(acc.xor(keys.ack_of(s, nonce)?)))
}

/// `Ā_s` for every member, computed bottom-up in one pass.
pub fn expected_acks(keys: &KeyStore, tree: &AggregationTree, nonce: Nonce) -> Result<BTreeMap<NodeId, Ack>> {
    let mut out = BTreeMap::new();
    for epoch in tree.epochs() {
        for s in epoch {
            let own = keys.ack_of(s, nonce)?;
            let acc = tree.children(s).iter().fold(own, |a, c| a.xor(out[c]));
            out.insert(s, acc);
        }
    }
    Ok(out)
}

/// Hierarchical collection of acks. Leaves stay silent; internal nodes report nested
/// reports of their internal children and the acks they stored for all children.
pub fn als2_collect(ctx: &mut SessionCtx<'_>, shia: &ShiaState) -> Result<Option<Vec<u8>>> {
    ctx.net.set_phase(Phase::Als2);
    announce(ctx, b"als2")?;
    let tree = ctx.tree;
    let mut received: BTreeMap<NodeId, Vec<u8>> = BTreeMap::new();
    let mut at_bs = None;
    for epoch in tree.epochs() {
        for s in epoch {
            if tree.is_leaf(s) {
                continue;
            }
            let kids = tree.children(s);
            let reports: Vec<Vec<u8>> = kids
                .iter()
                .filter(|&&c| !tree.is_leaf(c))
                .map(|c| received.remove(c).unwrap_or_else(OnionMsg::nr_bytes))
                .collect();
            let mut acks: Vec<Ack> = kids
                .iter()
                .map(|&c| shia.stored_ack(s, c).unwrap_or(Ack::ZERO))
                .collect();
            for a in ctx.adversary.active(s, Phase::Als2) {
                if let Action::AckReportForge { child } = a {
                    let target = child.unwrap_or(kids[0]);
                    if let Some(i) = kids.iter().position(|&c| c == target) {
                        acks[i] = acks[i].xor(Ack(GARBLE_REPORT));
                        ctx.adversary.record(s, &a);
                    }
                }
            }
            if ctx.adversary.has(s, Phase::Als2, |a| *a == Action::ReportDrop) {
                ctx.adversary.record(s, &Action::ReportDrop);
                continue;
            }
            let mut w = Writer::new();
            w.u64(ctx.nonce.0);
            for r in &reports {
                w.field(r);
            }
            for a in &acks {
                w.field(&a.0);
            }
            let key = ctx.net.keys().node_key(s)?;
            let msg = OnionMsg::Envelope(AuthEnvelope::wrap(key, w.finish())).encode();
            if let Some(bytes) = send_up(ctx, s, &msg)? {
                if tree.parent(s) == Some(NodeId::BS) {
                    at_bs = Some(bytes);
                } else {
                    received.insert(s, bytes);
                }
            }
        }
    }
    Ok(at_bs)
}

struct Report {
    /// nested reports keyed by internal child
    nested: BTreeMap<NodeId, Vec<u8>>,
    /// reported acks keyed by child
    acks: BTreeMap<NodeId, Ack>,
}

fn open_report(
    tree: &AggregationTree,
    keys: &KeyStore,
    s: NodeId,
    bytes: Option<&[u8]>,
    nonce: Nonce,
) -> Result<Report, MarkRule> {
    let fields = open(keys, s, bytes, nonce)?;
    let kids = tree.children(s);
    let internal: Vec<NodeId> = kids.iter().copied().filter(|&c| !tree.is_leaf(c)).collect();
    if fields.len() != internal.len() + kids.len() {
        return Err(MarkRule::BadStructure);
    }
    let (nested, acks) = fields.split_at(internal.len());
    if acks.iter().any(|a| a.len() != ACK_LEN) {
        return Err(MarkRule::BadStructure);
    }
    Ok(Report {
        nested: internal.into_iter().zip(nested.iter().cloned()).collect(),
        acks: kids
            .iter()
            .zip(acks)
            .map(|(&c, a)| (c, Ack::from_slice(a).unwrap()))
            .collect(),
    })
}

/// Recursive processing and ack analysis.
///
/// `a_b` is the aggregated ack the BS received in SHIA. A child whose reported ack
/// equals its expected value is not processed further; otherwise its report is checked
/// for legitimacy and for ack inconsistencies, and recursion continues where possible.
pub fn als2_process(
    tree: &AggregationTree,
    keys: &KeyStore,
    m_b: Option<&[u8]>,
    a_b: Option<Ack>,
    nonce: Nonce,
) -> Result<MarkSet> {
    let expected = expected_acks(keys, tree, nonce)?;
    let mut marks = MarkSet::default();
    // (reporting parent, child, ack the parent reported for the child, child's report)
    let mut stack: Vec<(NodeId, NodeId, Ack, Option<Vec<u8>>)> = vec![(
        NodeId::BS,
        tree.bs_child(),
        a_b.unwrap_or(Ack::ZERO),
        m_b.map(<[u8]>::to_vec),
    )];
    while let Some((t, s, reported, report)) = stack.pop() {
        if tree.is_leaf(s) {
            if reported != keys.ack_of(s, nonce)? {
                marks.mark(MarkRule::AckLeaf, s, t);
            }
            continue;
        }
        if reported == expected[&s] {
            continue;
        }
        let rep = match open_report(tree, keys, s, report.as_deref(), nonce) {
            Ok(r) => r,
            Err(rule) => {
                marks.mark(rule, s, t);
                continue;
            }
        };
        let recomputed = rep
            .acks
            .values()
            .fold(keys.ack_of(s, nonce)?, |a, &b| a.xor(b));
        if reported != recomputed {
            marks.mark(MarkRule::AckInternal, s, t);
        }
        let mut nested = rep.nested;
        for &u in tree.children(s).iter().rev() {
            stack.push((s, u, rep.acks[&u], nested.remove(&u)));
        }
    }
    Ok(marks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversary::{Adversary, AdversaryConfig, ScriptedAction, SessionSelector};
    use crate::net::{Network, NetworkGraph};
    use crate::shia::{run_shia, ValueRange};

    const RANGE: ValueRange = ValueRange { lo: 0, hi: 100 };
    const N: Nonce = Nonce(4242);

    struct Run {
        net: Network,
        tree: AggregationTree,
        adv: Adversary,
    }

    fn setup(pairs: &[(u16, u16)], faulty: &[(u16, Action)]) -> Run {
        let parent: BTreeMap<_, _> = pairs.iter().map(|&(c, p)| (NodeId(c), NodeId(p))).collect();
        let edges: Vec<_> = parent.iter().map(|(&c, &p)| (c, p)).collect();
        let g = NetworkGraph::new(pairs.len() as u16, &edges, 16).unwrap();
        let keys = KeyStore::derive(11, g.nodes(), g.edges());
        let mut adv = Adversary::new(&AdversaryConfig {
            faulty: faulty.iter().map(|(s, _)| NodeId(*s)).collect(),
            script: faulty
                .iter()
                .map(|(s, a)| ScriptedAction { node: NodeId(*s), action: a.clone(), sessions: SessionSelector::All })
                .collect(),
        });
        adv.set_session(1);
        Run { net: Network::new(g, keys), tree: AggregationTree::from_parents(parent).unwrap(), adv }
    }

    impl Run {
        fn go(&mut self) -> (ShiaState, MarkSet, Option<MarkSet>) {
            let values = self.tree.members().map(|s| (s, 1)).collect();
            let mut ctx = SessionCtx::new(&mut self.net, &self.tree, &mut self.adv, N);
            let (st, out) = run_shia(&mut ctx, &values, RANGE).unwrap();
            assert!(!out.accepted);
            let m_b = als1_collect(&mut ctx, &st).unwrap();
            let m1 = als1_process(&self.tree, self.net.keys(), m_b.as_deref(), N);
            if !m1.is_empty() {
                return (st, m1, None);
            }
            let mut ctx = SessionCtx::new(&mut self.net, &self.tree, &mut self.adv, N);
            let r_b = als2_collect(&mut ctx, &st).unwrap();
            let m2 = als2_process(&self.tree, self.net.keys(), r_b.as_deref(), st.bs_ack, N).unwrap();
            (st, m1, Some(m2))
        }
    }

    fn ids(v: &[u16]) -> BTreeSet<NodeId> {
        v.iter().map(|&i| NodeId(i)).collect()
    }

    // b=1 -> t=2 -> {s1=3, s2=4, s3=5}
    const FAN: [(u16, u16); 5] = [(1, 0), (2, 1), (3, 2), (4, 2), (5, 2)];

    #[test]
    fn confirmation_tampering_marks_the_pairs() {
        // s2 (4) is cut off by t's corrupted off-path, t tampers with s3's (5) confirmation
        let mut r = setup(
            &FAN,
            &[
                (2, Action::OffPathCorrupt { child: Some(NodeId(4)) }),
                (2, Action::ConfirmTamper { slot: 2 }),
            ],
        );
        let (st, m1, m2) = r.go();
        assert!(st.verified(NodeId(3)) && !st.verified(NodeId(4)) && st.verified(NodeId(5)));
        assert!(m2.is_none());
        let pairs: BTreeSet<_> = m1.marks.iter().map(|m| (m.rule, m.node, m.parent)).collect();
        assert_eq!(
            pairs,
            BTreeSet::from([
                (MarkRule::NoMessage, NodeId(4), NodeId(2)),
                (MarkRule::BadAuth, NodeId(5), NodeId(2)),
            ])
        );
        assert_eq!(m1.nodes(), ids(&[2, 4, 5]));
    }

    #[test]
    fn silent_bs_child_is_marked_alone() {
        let mut r = setup(&FAN, &[(1, Action::LabelDrop)]);
        let (_, m1, _) = r.go();
        assert_eq!(m1.marks, vec![Mark { rule: MarkRule::Missing, node: NodeId(1), parent: NodeId::BS }]);
        assert_eq!(m1.nodes(), ids(&[1]));
    }

    #[test]
    fn all_legitimate_confirmations_mark_nobody() {
        let mut r = setup(&FAN, &[]);
        let values: BTreeMap<_, _> = r.tree.members().map(|s| (s, 1)).collect();
        let mut ctx = SessionCtx::new(&mut r.net, &r.tree, &mut r.adv, N);
        let (st, out) = run_shia(&mut ctx, &values, RANGE).unwrap();
        assert!(out.accepted);
        let m_b = als1_collect(&mut ctx, &st).unwrap();
        assert!(als1_process(&r.tree, r.net.keys(), m_b.as_deref(), N).is_empty());
        assert!(als1_process(&r.tree, r.net.keys(), None, N).nodes() == ids(&[1]));
    }

    #[test]
    fn expected_ack_definitions() {
        let r = setup(&FAN, &[]);
        let keys = r.net.keys();
        let ack = |i| keys.ack_of(NodeId(i), N).unwrap();
        assert_eq!(expected_ack(keys, &r.tree, NodeId(3), N).unwrap(), ack(3));
        assert_eq!(
            expected_ack(keys, &r.tree, NodeId(2), N).unwrap(),
            ack(2).xor(ack(3)).xor(ack(4)).xor(ack(5))
        );
        let all = expected_acks(keys, &r.tree, N).unwrap();
        let bs_side = r.tree.members().fold(Ack::ZERO, |a, s| a.xor(keys.ack_of(s, N).unwrap()));
        assert_eq!(all[&NodeId(1)], bs_side);
        for s in r.tree.members() {
            assert_eq!(all[&s], expected_ack(keys, &r.tree, s, N).unwrap());
        }
    }

    #[test]
    fn garbled_aggregate_at_leaf_is_type_one() {
        let mut r = setup(&FAN, &[(4, Action::AggAckGarble)]);
        let (_, m1, m2) = r.go();
        assert!(m1.is_empty());
        let m2 = m2.unwrap();
        assert_eq!(m2.marks, vec![Mark { rule: MarkRule::AckLeaf, node: NodeId(4), parent: NodeId(2) }]);
    }

    #[test]
    fn garbled_aggregate_at_internal_node_is_type_two() {
        let mut r = setup(&FAN, &[(2, Action::AggAckGarble)]);
        let (_, m1, m2) = r.go();
        assert!(m1.is_empty());
        assert_eq!(
            m2.unwrap().marks,
            vec![Mark { rule: MarkRule::AckInternal, node: NodeId(2), parent: NodeId(1) }]
        );
    }

    #[test]
    fn forged_report_surfaces_inconsistency() {
        // t garbles its aggregate and lies about s3's ack
        let mut r = setup(
            &FAN,
            &[(2, Action::AggAckGarble), (2, Action::AckReportForge { child: Some(NodeId(5)) })],
        );
        let (_, _, m2) = r.go();
        let m2 = m2.unwrap();
        assert!(m2.nodes().contains(&NodeId(2)));
        assert!(m2.marks.iter().any(|m| m.rule == MarkRule::AckLeaf && m.node == NodeId(5)));
    }

    #[test]
    fn dropped_report_is_structural() {
        let mut r = setup(
            &[(1, 0), (2, 1), (3, 2), (4, 3)],
            &[(2, Action::AggAckGarble), (2, Action::ReportDrop)],
        );
        let (_, _, m2) = r.go();
        assert_eq!(
            m2.unwrap().marks,
            vec![Mark { rule: MarkRule::NoMessage, node: NodeId(2), parent: NodeId(1) }]
        );
    }

    #[test]
    fn report_of_node_with_only_leaf_children_has_no_nested_reports() {
        let mut r = setup(&FAN, &[]);
        let values: BTreeMap<_, _> = r.tree.members().map(|s| (s, 1)).collect();
        let mut ctx = SessionCtx::new(&mut r.net, &r.tree, &mut r.adv, N);
        let (st, _) = run_shia(&mut ctx, &values, RANGE).unwrap();
        let m_b = als2_collect(&mut ctx, &st).unwrap().unwrap();
        let keys = r.net.keys();
        let outer = open(keys, NodeId(1), Some(&m_b), N).unwrap();
        assert_eq!(outer.len(), 2); // nested report of t=2, ack of t
        let inner = open(keys, NodeId(2), Some(&outer[0]), N).unwrap();
        assert_eq!(inner.len(), 3); // three leaf acks, no nested reports
        assert!(inner.iter().all(|a| a.len() == ACK_LEN));
        // consistent reports with A_b = Ā_b mark nobody
        let m = als2_process(&r.tree, keys, Some(&m_b), st.bs_ack, N).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn early_stop_beats_structural_check() {
        let r = setup(&FAN, &[]);
        let keys = r.net.keys();
        let exp = expected_ack(keys, &r.tree, NodeId(1), N).unwrap();
        // garbage M_b, but the reported A_b matches Ā_b so it is never opened
        let m = als2_process(&r.tree, keys, Some(&[9, 9, 9]), Some(exp), N).unwrap();
        assert!(m.is_empty());
        let m = als2_process(&r.tree, keys, Some(&[9, 9, 9]), Some(Ack::ZERO), N).unwrap();
        assert_eq!(m.marks[0].rule, MarkRule::BadStructure);
    }

    #[test]
    fn onion_codec() {
        assert_eq!(OnionMsg::decode(&OnionMsg::nr_bytes()).unwrap(), OnionMsg::NoneReceived);
        assert!(OnionMsg::decode(&[0x00, 0x01]).is_err());
        assert!(OnionMsg::decode(&[]).is_err());
        assert!(OnionMsg::decode(&[0x07]).is_err());
    }
}
