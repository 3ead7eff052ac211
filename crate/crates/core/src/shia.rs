//! Naive SHIA: query dissemination, aggregate-commit, result checking with
//! off-path labels, and XOR ack aggregation verified by the BS.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adversary::{Action, GARBLE_AGG, GARBLE_OWN};
use crate::crypto::{hash, Ack, Digest, NodeId, Nonce, DIGEST_LEN};
use crate::error::{Error, Result};
use crate::net::{AggregationTree, Phase};
use crate::session::SessionCtx;
use crate::wire::{Reader, Writer};

/// Inclusive measurement range `M = [lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueRange {
    pub lo: i64,
    pub hi: i64,
}

impl ValueRange {
    pub fn contains(&self, v: i64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Commitment {
    /// Leaf-format labels carry the node id in the commitment slot.
    Leaf(NodeId),
    Digest(Digest),
}

const LEAF_TAG: u8 = 0;
const INTERNAL_TAG: u8 = 1;

/// `<count, value, commitment>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Label {
    pub count: u16,
    pub value: i64,
    pub commitment: Commitment,
}

impl Label {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self.commitment {
            Commitment::Leaf(id) => {
                w.u8(LEAF_TAG).u16(self.count).i64(self.value).u16(id.0);
            }
            Commitment::Digest(d) => {
                w.u8(INTERNAL_TAG)
                    .u16(self.count)
                    .i64(self.value)
                    .field(&d.0);
            }
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let tag = r.u8()?;
        let count = r.u16()?;
        let value = r.i64()?;
        let commitment = match tag {
            LEAF_TAG => Commitment::Leaf(NodeId(r.u16()?)),
            INTERNAL_TAG => Commitment::Digest(Digest(r.array::<DIGEST_LEN>()?)),
            _ => return Err(Error::Malformed("unknown label tag")),
        };
        r.finish()?;
        Ok(Self {
            count,
            value,
            commitment,
        })
    }
}

/// `<1, val(s), s>`; a correct node's value must lie in `M`.
pub fn leaf_label(node: NodeId, val: i64, range: ValueRange) -> Result<Label> {
    if !range.contains(val) {
        return Err(Error::Config(format!(
            "value {val} of {node} outside [{}, {}]",
            range.lo, range.hi
        )));
    }
    Ok(Label {
        count: 1,
        value: val,
        commitment: Commitment::Leaf(node),
    })
}

/// Hashes `N || c || v || l_1 || ... || l_q` over the given input labels.
pub fn combine(nonce: Nonce, inputs: &[Label]) -> Label {
    let count = inputs.iter().fold(0u16, |c, l| c.wrapping_add(l.count));
    let value = inputs.iter().fold(0i64, |v, l| v.wrapping_add(l.value));
    let mut w = Writer::new();
    w.u64(nonce.0).u16(count).i64(value);
    for l in inputs {
        w.field(&l.encode());
    }
    Label {
        count,
        value,
        commitment: Commitment::Digest(hash(&w.finish())),
    }
}

/// Internal-node label: children in ascending id order, own leaf-format label last.
pub fn combine_labels(node: NodeId, child_labels: &[Label], own_val: i64, nonce: Nonce) -> Label {
    let mut inputs = child_labels.to_vec();
    inputs.push(Label {
        count: 1,
        value: own_val,
        commitment: Commitment::Leaf(node),
    });
    combine(nonce, &inputs)
}

/// One ancestor's inputs minus the path child, which belongs at `slot`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OffPathLevel {
    pub ancestor: NodeId,
    pub slot: u16,
    pub others: Vec<Label>,
}

/// Off-path labels for every ancestor, nearest first.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OffPathSet {
    pub levels: Vec<OffPathLevel>,
}

impl OffPathSet {
    pub fn encode(&self, nonce: Nonce) -> Vec<u8> {
        let mut w = Writer::new();
        w.u64(nonce.0);
        for level in &self.levels {
            let mut lw = Writer::new();
            lw.u16(level.ancestor.0).u16(level.slot);
            for l in &level.others {
                lw.field(&l.encode());
            }
            w.field(&lw.finish());
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8], nonce: Nonce) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.u64()? != nonce.0 {
            return Err(Error::Malformed("off-path nonce mismatch"));
        }
        let levels = r
            .rest()?
            .into_iter()
            .map(|lb| {
                let mut lr = Reader::new(lb);
                let ancestor = NodeId(lr.u16()?);
                let slot = lr.u16()?;
                let others = lr
                    .rest()?
                    .into_iter()
                    .map(Label::decode)
                    .collect::<Result<_>>()?;
                Ok(OffPathLevel {
                    ancestor,
                    slot,
                    others,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { levels })
    }

    /// Recomputes the root label from a node's own label; `None` if a slot is out of range.
    pub fn recompute_root(&self, nonce: Nonce, own: Label) -> Option<Label> {
        let mut cur = own;
        for level in &self.levels {
            let slot = usize::from(level.slot);
            if slot > level.others.len() {
                return None;
            }
            let mut inputs = level.others.clone();
            inputs.insert(slot, cur);
            cur = combine(nonce, &inputs);
        }
        Some(cur)
    }
}

/// Per-node state SHIA leaves behind; ALS reads it.
#[derive(Debug, Clone, Default)]
pub struct ShiaState {
    /// Value each node used as its own (forged values included).
    pub own_values: BTreeMap<NodeId, i64>,
    /// The label each node computed honestly from what it received.
    pub own_labels: BTreeMap<NodeId, Label>,
    /// parent -> child -> label received during aggregate-commit.
    pub stored_labels: BTreeMap<NodeId, BTreeMap<NodeId, Label>>,
    pub root_label: Option<Label>,
    /// Whether the node's recomputed root matched the broadcast label.
    pub verified: BTreeMap<NodeId, bool>,
    /// parent -> child -> ack received during result checking.
    pub stored_acks: BTreeMap<NodeId, BTreeMap<NodeId, Ack>>,
    /// `A_b` as received by the BS.
    pub bs_ack: Option<Ack>,
}

impl ShiaState {
    pub fn verified(&self, s: NodeId) -> bool {
        self.verified.get(&s).copied().unwrap_or(false)
    }

    pub fn stored_ack(&self, parent: NodeId, child: NodeId) -> Option<Ack> {
        self.stored_acks.get(&parent)?.get(&child).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShiaOutcome {
    pub root_label: Option<Label>,
    pub aggregated_ack: Option<Ack>,
    pub expected_ack: Ack,
    pub accepted: bool,
}

fn encode_with_nonce(nonce: Nonce, body: &[u8]) -> Vec<u8> {
    let mut w = Writer::new();
    w.u64(nonce.0).field(body);
    w.finish()
}

fn decode_with_nonce(bytes: &[u8], nonce: Nonce) -> Option<Vec<u8>> {
    let mut r = Reader::new(bytes);
    if r.u64().ok()? != nonce.0 {
        return None;
    }
    let body = r.field().ok()?.to_vec();
    r.finish().ok()?;
    Some(body)
}

fn forge_label(label: Label, count_delta: i32, value_delta: i64, corrupt: bool) -> Label {
    let mut out = label;
    out.count = (i32::from(out.count)).wrapping_add(count_delta) as u16;
    out.value = out.value.wrapping_add(value_delta);
    if corrupt {
        out.commitment = match out.commitment {
            Commitment::Leaf(id) => Commitment::Leaf(NodeId(id.0 ^ 0x8000)),
            Commitment::Digest(mut d) => {
                d.0[0] ^= 0xFF;
                Commitment::Digest(d)
            }
        };
    }
    out
}

/// Query dissemination.
pub fn query_phase(ctx: &mut SessionCtx<'_>) -> Result<()> {
    ctx.net.set_phase(Phase::Query);
    let msg = ctx
        .net
        .bs_broadcast(NodeId::BS, encode_with_nonce(ctx.nonce, b"query"))?;
    debug_assert!(ctx.net.accept_broadcast(&msg));
    Ok(())
}

/// Aggregate-commit, leaves first. Returns the state with the BS's root label filled in.
///
/// A correct parent that never receives a child's label leaves that child's subtree
/// out of its own label.
pub fn aggregate_commit_phase(
    ctx: &mut SessionCtx<'_>,
    values: &BTreeMap<NodeId, i64>,
    range: ValueRange,
) -> Result<ShiaState> {
    let mut st = ShiaState::default();
    ctx.net.set_phase(Phase::Commit);
    let tree = ctx.tree;
    for epoch in tree.epochs() {
        for s in epoch {
            let true_val = *values
                .get(&s)
                .ok_or_else(|| Error::Config(format!("no value for {s}")))?;
            let own_val = match ctx.adversary.find(s, Phase::Commit, |a| match a {
                Action::OwnValueForge { value } => Some(*value),
                _ => None,
            }) {
                Some(v) => {
                    ctx.adversary.record(s, &Action::OwnValueForge { value: v });
                    v
                }
                None => true_val,
            };
            st.own_values.insert(s, own_val);
            let label = if tree.is_leaf(s) {
                leaf_label(s, own_val, range)?
            } else {
                let received: Vec<Label> = st
                    .stored_labels
                    .get(&s)
                    .map(|m| m.values().copied().collect())
                    .unwrap_or_default();
                combine_labels(s, &received, own_val, ctx.nonce)
            };
            st.own_labels.insert(s, label);

            let mut sent = label;
            for a in ctx.adversary.active(s, Phase::Commit) {
                if let Action::LabelForge {
                    count_delta,
                    value_delta,
                    corrupt_commitment,
                } = a
                {
                    let forged = forge_label(sent, count_delta, value_delta, corrupt_commitment);
                    if forged != sent {
                        sent = forged;
                        ctx.adversary.record(s, &a);
                    }
                }
            }
            if ctx.adversary.has(s, Phase::Commit, |a| *a == Action::LabelDrop) {
                ctx.adversary.record(s, &Action::LabelDrop);
                continue;
            }
            let parent = tree.parent(s).expect("member has a parent");
            let dest = match ctx.adversary.find(s, Phase::Commit, |a| match a {
                Action::ParentSwitch { to } => Some(*to),
                _ => None,
            }) {
                Some(to) => {
                    ctx.adversary.record(s, &Action::ParentSwitch { to });
                    to
                }
                None => parent,
            };
            let payload = encode_with_nonce(ctx.nonce, &sent.encode());
            let Some(delivered) = ctx.net.send_link(s, dest, &payload)? else {
                continue;
            };
            // the receiver only accepts labels from its own tree children
            if dest != parent {
                continue;
            }
            let Some(label) = decode_with_nonce(&delivered, ctx.nonce)
                .and_then(|b| Label::decode(&b).ok())
            else {
                continue;
            };
            if parent.is_bs() {
                st.root_label = Some(label);
            } else {
                st.stored_labels.entry(parent).or_default().insert(s, label);
            }
        }
    }
    Ok(st)
}

/// The input list node `t` hashed: received child labels ascending, own leaf label last.
fn inputs_of(st: &ShiaState, t: NodeId) -> Vec<(Option<NodeId>, Label)> {
    let mut out: Vec<(Option<NodeId>, Label)> = st
        .stored_labels
        .get(&t)
        .map(|m| m.iter().map(|(&c, &l)| (Some(c), l)).collect())
        .unwrap_or_default();
    out.push((
        None,
        Label {
            count: 1,
            value: st.own_values[&t],
            commitment: Commitment::Leaf(t),
        },
    ));
    out
}

/// Result checking: broadcast of the root label, off-path dissemination, ack aggregation
/// and the BS's final comparison.
pub fn result_check_phase(ctx: &mut SessionCtx<'_>, st: &mut ShiaState) -> Result<ShiaOutcome> {
    let tree = ctx.tree;
    let nonce = ctx.nonce;
    let expected_ack = tree
        .members()
        .try_fold(Ack::ZERO, |acc, s| Ok::<_, Error>(acc.xor(ctx.net.keys().ack_of(s, nonce)?)))?;
    let Some(root) = st.root_label else {
        return Ok(ShiaOutcome {
            root_label: None,
            aggregated_ack: None,
            expected_ack,
            accepted: false,
        });
    };

    ctx.net.set_phase(Phase::ResultCheck);
    let msg = ctx
        .net
        .bs_broadcast(NodeId::BS, encode_with_nonce(nonce, &root.encode()))?;
    debug_assert!(ctx.net.accept_broadcast(&msg));

    let mut off_path: BTreeMap<NodeId, OffPathSet> = BTreeMap::new();
    off_path.insert(tree.bs_child(), OffPathSet::default());
    let mut order = vec![tree.bs_child()];
    let mut i = 0;
    while i < order.len() {
        let t = order[i];
        i += 1;
        order.extend_from_slice(tree.children(t));
        let Some(off) = off_path.get(&t).cloned() else {
            st.verified.insert(t, false);
            continue;
        };
        let ok = off.recompute_root(nonce, st.own_labels[&t]) == Some(root);
        st.verified.insert(t, ok);

        let inputs = inputs_of(st, t);
        for &c in tree.children(t) {
            let slot = inputs
                .iter()
                .position(|(id, _)| id.is_none_or(|id| id >= c))
                .unwrap();
            let mut others: Vec<Label> = inputs
                .iter()
                .filter(|(id, _)| *id != Some(c))
                .map(|(_, l)| *l)
                .collect();
            if let Some(a) = ctx.adversary.find(t, Phase::ResultCheck, |a| match a {
                Action::OffPathCorrupt { child } if child.is_none_or(|x| x == c) => Some(a.clone()),
                _ => None,
            }) {
                others[0].value = others[0].value.wrapping_add(1);
                ctx.adversary.record(t, &a);
            }
            let mut levels = vec![OffPathLevel {
                ancestor: t,
                slot: slot as u16,
                others,
            }];
            levels.extend(off.levels.iter().cloned());
            let set = OffPathSet { levels };
            if let Some(bytes) = ctx.net.send_link(t, c, &set.encode(nonce))? {
                if let Ok(set) = OffPathSet::decode(&bytes, nonce) {
                    off_path.insert(c, set);
                }
            }
        }
    }

    ctx.net.set_phase(Phase::AckCollect);
    for epoch in tree.epochs() {
        for s in epoch {
            let received = st.stored_acks.get(&s).cloned().unwrap_or_default();
            let children_xor = received.values().fold(Ack::ZERO, |a, &b| a.xor(b));
            let own = ctx.net.keys().ack_of(s, nonce)?;
            let verified = st.verified(s);
            let mut out = match (verified, received.is_empty()) {
                (true, _) => Some(children_xor.xor(own)),
                (false, false) => Some(children_xor),
                (false, true) => None,
            };
            if ctx.adversary.has(s, Phase::AckCollect, |a| *a == Action::AckGarble) {
                let own_part = if verified { own } else { Ack::ZERO };
                out = Some(children_xor.xor(own_part).xor(Ack(GARBLE_OWN)));
                ctx.adversary.record(s, &Action::AckGarble);
            }
            if let Some(ack) = out {
                if ctx.adversary.has(s, Phase::AckCollect, |a| *a == Action::AggAckGarble) {
                    out = Some(ack.xor(Ack(GARBLE_AGG)));
                    ctx.adversary.record(s, &Action::AggAckGarble);
                }
            }
            let Some(ack) = out else { continue };
            if ctx.adversary.has(s, Phase::AckCollect, |a| *a == Action::AckDrop) {
                ctx.adversary.record(s, &Action::AckDrop);
                continue;
            }
            let parent = tree.parent(s).unwrap();
            let dest = ctx
                .adversary
                .find(s, Phase::Commit, |a| match a {
                    Action::ParentSwitch { to } => Some(*to),
                    _ => None,
                })
                .unwrap_or(parent);
            let payload = encode_with_nonce(nonce, &ack.0);
            let Some(bytes) = ctx.net.send_link(s, dest, &payload)? else {
                continue;
            };
            if dest != parent {
                continue;
            }
            let Some(ack) = decode_with_nonce(&bytes, nonce).and_then(|b| Ack::from_slice(&b).ok())
            else {
                continue;
            };
            if parent.is_bs() {
                st.bs_ack = Some(ack);
            } else {
                st.stored_acks.entry(parent).or_default().insert(s, ack);
            }
        }
    }

    Ok(ShiaOutcome {
        root_label: Some(root),
        aggregated_ack: st.bs_ack,
        expected_ack,
        accepted: st.bs_ack == Some(expected_ack),
    })
}

/// Runs the three SHIA phases.
pub fn run_shia(
    ctx: &mut SessionCtx<'_>,
    values: &BTreeMap<NodeId, i64>,
    range: ValueRange,
) -> Result<(ShiaState, ShiaOutcome)> {
    query_phase(ctx)?;
    let mut st = aggregate_commit_phase(ctx, values, range)?;
    let outcome = result_check_phase(ctx, &mut st)?;
    Ok((st, outcome))
}

/// Tree edges whose endpoints both behaved correctly but disagree on acking, as `(parent, child)` pairs.
pub fn ack_disagreements(
    tree: &AggregationTree,
    st: &ShiaState,
    behaved: impl Fn(NodeId) -> bool,
) -> Vec<(NodeId, NodeId)> {
    tree.members()
        .filter_map(|c| {
            let p = tree.parent(c)?;
            (!p.is_bs() && behaved(p) && behaved(c) && st.verified(p) != st.verified(c))
                .then_some((p, c))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversary::{Adversary, AdversaryConfig, ScriptedAction, SessionSelector};
    use crate::crypto::KeyStore;
    use crate::net::{Network, NetworkGraph};
    use sha2::{Digest as _, Sha256};
    use std::collections::BTreeSet;

    const RANGE: ValueRange = ValueRange { lo: 0, hi: 1000 };

    /// Reference framing: 4-byte big-endian length per field.
    fn framed(fields: &[&[u8]]) -> Vec<u8> {
        let mut out = Vec::new();
        for f in fields {
            out.extend_from_slice(&(f.len() as u32).to_be_bytes());
            out.extend_from_slice(f);
        }
        out
    }

    fn ref_leaf(id: u16, v: i64) -> Vec<u8> {
        framed(&[&[0], &1u16.to_be_bytes(), &v.to_be_bytes(), &id.to_be_bytes()])
    }

    #[test]
    fn leaf_label_format() {
        let l = leaf_label(NodeId(7), 5, RANGE).unwrap();
        assert_eq!(l, Label { count: 1, value: 5, commitment: Commitment::Leaf(NodeId(7)) });
        let z = leaf_label(NodeId(1), 0, RANGE).unwrap();
        assert_eq!((z.count, z.value, z.commitment), (1, 0, Commitment::Leaf(NodeId(1))));
        assert_eq!(l.encode(), ref_leaf(7, 5));
        assert_eq!(l.encode().len(), z.encode().len());
        assert_eq!(l.encode().len(), 4 * 4 + 1 + 2 + 8 + 2);
        assert!(matches!(leaf_label(NodeId(1), 1001, RANGE), Err(Error::Config(_))));
    }

    #[test]
    fn combine_matches_reference_hash() {
        let n = Nonce(0x1122_3344_5566_7788);
        let (a, b, t) = (NodeId(2), NodeId(4), NodeId(9));
        let la = leaf_label(a, 3, RANGE).unwrap();
        let lb = leaf_label(b, 4, RANGE).unwrap();
        let got = combine_labels(t, &[la, lb], 5, n);
        let expect: [u8; 32] = Sha256::digest(framed(&[
            &n.0.to_be_bytes(),
            &3u16.to_be_bytes(),
            &12i64.to_be_bytes(),
            &ref_leaf(2, 3),
            &ref_leaf(4, 4),
            &ref_leaf(9, 5),
        ]))
        .into();
        assert_eq!(got.count, 3);
        assert_eq!(got.value, 12);
        assert_eq!(got.commitment, Commitment::Digest(Digest(expect)));
        assert_eq!(Label::decode(&got.encode()).unwrap(), got);
    }

    #[test]
    fn combine_degenerate_and_order_sensitive() {
        let n = Nonce(1);
        let solo = combine_labels(NodeId(3), &[], 8, n);
        assert_eq!((solo.count, solo.value), (1, 8));
        assert!(matches!(solo.commitment, Commitment::Digest(_)));
        let la = leaf_label(NodeId(1), 1, RANGE).unwrap();
        let lb = leaf_label(NodeId(2), 2, RANGE).unwrap();
        assert_ne!(
            combine_labels(NodeId(3), &[la, lb], 0, n),
            combine_labels(NodeId(3), &[lb, la], 0, n)
        );
    }

    // --- small scenario harness -------------------------------------------------

    pub(crate) struct Fixture {
        pub net: Network,
        pub tree: AggregationTree,
        pub values: BTreeMap<NodeId, i64>,
    }

    pub(crate) fn fixture(pairs: &[(u16, u16)], value: impl Fn(NodeId) -> i64) -> Fixture {
        let parent: BTreeMap<_, _> = pairs.iter().map(|&(c, p)| (NodeId(c), NodeId(p))).collect();
        let n = pairs.len() as u16;
        let edges: Vec<_> = parent.iter().map(|(&c, &p)| (c, p)).collect();
        let g = NetworkGraph::new(n, &edges, 16).unwrap();
        let keys = KeyStore::derive(3, g.nodes(), g.edges());
        let tree = AggregationTree::from_parents(parent).unwrap();
        let values = tree.members().map(|s| (s, value(s))).collect();
        Fixture { net: Network::new(g, keys), tree, values }
    }

    fn adversary(node: u16, actions: Vec<Action>) -> Adversary {
        let mut a = Adversary::new(&AdversaryConfig {
            faulty: BTreeSet::from([NodeId(node)]),
            script: actions
                .into_iter()
                .map(|action| ScriptedAction { node: NodeId(node), action, sessions: SessionSelector::All })
                .collect(),
        });
        a.set_session(1);
        a
    }

    fn run(f: &mut Fixture, adv: &mut Adversary) -> (ShiaState, ShiaOutcome) {
        let mut ctx = SessionCtx::new(&mut f.net, &f.tree, adv, Nonce(77));
        run_shia(&mut ctx, &f.values, RANGE).unwrap()
    }

    const BINARY7: [(u16, u16); 7] = [(1, 0), (2, 1), (3, 1), (4, 2), (5, 2), (6, 3), (7, 3)];

    /// Independent bottom-up recomputation over the true tree.
    fn oracle_label(f: &Fixture, s: NodeId, n: Nonce) -> Label {
        if f.tree.is_leaf(s) {
            return leaf_label(s, f.values[&s], RANGE).unwrap();
        }
        let kids: Vec<Label> = f.tree.children(s).iter().map(|&c| oracle_label(f, c, n)).collect();
        combine_labels(s, &kids, f.values[&s], n)
    }

    #[test]
    fn all_correct_binary_tree_is_accepted() {
        let mut f = fixture(&BINARY7, |_| 1);
        let mut adv = Adversary::honest();
        let (st, out) = run(&mut f, &mut adv);
        let root = out.root_label.unwrap();
        assert_eq!((root.count, root.value), (7, 7));
        assert_eq!(root, oracle_label(&f, NodeId(1), Nonce(77)));
        assert!(out.accepted);
        let keys = f.net.keys();
        let all = (1..=7).fold(Ack::ZERO, |a, i| a.xor(keys.ack_of(NodeId(i), Nonce(77)).unwrap()));
        assert_eq!(out.aggregated_ack, Some(all));
        // storage contract: every internal node holds exactly its children's acks
        for t in f.tree.members().filter(|&t| !f.tree.is_leaf(t)) {
            let held: Vec<NodeId> = st.stored_acks[&t].keys().copied().collect();
            assert_eq!(held, f.tree.children(t));
        }
    }

    #[test]
    fn single_sensor_tree() {
        let mut f = fixture(&[(1, 0)], |_| 42);
        let (_, out) = run(&mut f, &mut Adversary::honest());
        assert_eq!(out.root_label, Some(leaf_label(NodeId(1), 42, RANGE).unwrap()));
        assert!(out.accepted);
    }

    #[test]
    fn forged_label_at_bs_child_reaches_bs_verbatim_and_is_rejected() {
        let mut f = fixture(&BINARY7, |_| 1);
        let forge = Action::LabelForge { count_delta: 0, value_delta: 100, corrupt_commitment: false };
        let mut adv = adversary(1, vec![forge]);
        let (st, out) = run(&mut f, &mut adv);
        let honest = st.own_labels[&NodeId(1)];
        assert_eq!(out.root_label, Some(Label { value: honest.value + 100, ..honest }));
        assert!(!out.accepted);
        // nobody below the forger can reproduce the forged root
        assert!((2..=7).all(|i| !st.verified(NodeId(i))));
    }

    #[test]
    fn inflated_value_makes_subtree_withhold_acks() {
        let mut f = fixture(&BINARY7, |s| i64::from(s.0));
        let forge = Action::LabelForge { count_delta: 0, value_delta: 5, corrupt_commitment: false };
        let mut adv = adversary(2, vec![forge]);
        let (st, out) = run(&mut f, &mut adv);
        assert!(!out.accepted);
        assert!(!st.verified(NodeId(4)) && !st.verified(NodeId(5)));
        // the other side of the tree and the root path still verify
        assert!(st.verified(NodeId(1)) && st.verified(NodeId(3)) && st.verified(NodeId(6)));
        let trace = adv.trace().misbehaved(1);
        assert!(ack_disagreements(&f.tree, &st, |s| !trace.contains(&s)).is_empty());
    }

    #[test]
    fn garbled_aggregate_ack_rejects_a_correct_aggregation() {
        let mut f = fixture(&BINARY7, |_| 2);
        let mut adv = adversary(3, vec![Action::AggAckGarble]);
        let (st, out) = run(&mut f, &mut adv);
        assert_eq!(out.root_label.unwrap().value, 14);
        assert!((1..=7).all(|i| st.verified(NodeId(i))));
        assert!(!out.accepted);
    }

    #[test]
    fn silent_child_is_left_out_and_parent_still_acks() {
        let mut f = fixture(&BINARY7, |_| 1);
        let mut adv = adversary(2, vec![Action::LabelDrop]);
        let (st, out) = run(&mut f, &mut adv);
        let root = out.root_label.unwrap();
        assert_eq!((root.count, root.value), (4, 4));
        assert!(st.verified(NodeId(1)) && st.verified(NodeId(3)));
        assert!(!st.verified(NodeId(4)));
        assert!(!out.accepted);
    }

    #[test]
    fn off_path_corruption_hits_only_target_subtree() {
        let mut f = fixture(&BINARY7, |_| 1);
        let mut adv = adversary(1, vec![Action::OffPathCorrupt { child: Some(NodeId(3)) }]);
        let (st, out) = run(&mut f, &mut adv);
        assert!(!out.accepted);
        assert!(st.verified(NodeId(2)) && st.verified(NodeId(4)));
        assert!(!st.verified(NodeId(3)) && !st.verified(NodeId(6)) && !st.verified(NodeId(7)));
    }

    #[test]
    fn legal_own_value_forgery_is_accepted() {
        let mut f = fixture(&BINARY7, |_| 1);
        let mut adv = adversary(5, vec![Action::OwnValueForge { value: 1000 }]);
        let (_, out) = run(&mut f, &mut adv);
        assert!(out.accepted);
        assert_eq!(out.root_label.unwrap().value, 6 + 1000);
        assert!(adv.trace().events.is_empty());
    }

    #[test]
    fn off_path_set_round_trips() {
        let set = OffPathSet {
            levels: vec![OffPathLevel {
                ancestor: NodeId(3),
                slot: 1,
                others: vec![leaf_label(NodeId(1), 1, RANGE).unwrap(), combine(Nonce(1), &[])],
            }],
        };
        assert_eq!(OffPathSet::decode(&set.encode(Nonce(5)), Nonce(5)).unwrap(), set);
        assert!(OffPathSet::decode(&set.encode(Nonce(5)), Nonce(6)).is_err());
    }
}
