//! Multi-session driver: SHIA, then on failure ALS.I, ALS.II and tree reconstruction,
//! plus the audits every run is checked against.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::adversary::{Adversary, AdversaryConfig};
use crate::als::{als1_collect, als1_process, als2_collect, als2_process, MarkSet};
use crate::atr::{atr_basic, atr_resilient_build, atr_resilient_init, AtrOutcome, BlackList, ConnectivityGraph};
use crate::crypto::{KeyStore, NodeId, Nonce, SignatureOracle, COUNT_LEN, DIGEST_LEN, TAG_LEN, VALUE_LEN};
use crate::error::{Error, Result};
use crate::net::{
    bfs_tree, choose_bs_child, view_mismatches, AggregationTree, LocalView, Network, NetworkGraph,
    Phase, TreeViews,
};
use crate::session::SessionCtx;
use crate::shia::{ack_disagreements, run_shia, ValueRange};
use crate::wire::LEN_PREFIX;

/// Unit message size `U`: an encoded internal label plus a link tag.
pub const UNIT_BYTES: u64 = (4 * LEN_PREFIX + 1 + COUNT_LEN + VALUE_LEN + DIGEST_LEN + TAG_LEN) as u64;

/// Successful sessions: max edge congestion ≤ `C1·h·Δ·U`.
pub const C1: f64 = 3.0;
/// Failed sessions (ALS and reconstruction included): max edge congestion ≤ `C2·n·U`.
pub const C2: f64 = 5.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AtrVariant {
    #[default]
    Basic,
    Resilient,
}

/// A fully materialized scenario: topology, values and adversary are fixed.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub seed: u64,
    pub graph: NetworkGraph,
    pub range: ValueRange,
    pub values: BTreeMap<NodeId, i64>,
    pub adversary: AdversaryConfig,
    pub sessions: u64,
    pub atr: AtrVariant,
    pub accept_on_als2: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeSnapshot {
    pub id: usize,
    /// Session whose failure triggered the build; 0 for the initial tree.
    pub built_after: u64,
    pub parents: BTreeMap<NodeId, NodeId>,
    pub height: usize,
    pub max_degree: usize,
    pub unreached: Vec<NodeId>,
    /// Correct in-tree nodes whose local view disagrees with this tree.
    pub view_mismatches: Vec<NodeId>,
    pub max_edge_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecurityCheck {
    pub correct_sum: i64,
    pub faulty_in_tree: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session: u64,
    pub nonce: u64,
    pub tree: usize,
    pub height: usize,
    pub max_degree: usize,
    pub accepted: bool,
    pub value: Option<i64>,
    /// Accepted only because ALS.I marked nobody and `accept_on_als2` is set.
    pub accepted_after_als2: bool,
    pub security: Option<SecurityCheck>,
    pub als1: Option<MarkSet>,
    pub als2: Option<MarkSet>,
    pub blacklist_after: Vec<NodeId>,
    /// Correct tree members that did not acknowledge.
    pub withholding: Vec<NodeId>,
    /// Nodes that misbehaved in any phase of this session.
    pub misbehaved: Vec<NodeId>,
    pub ack_disagreements: Vec<(NodeId, NodeId)>,
    /// Every marked pair contains a misbehaver and the completeness checks hold.
    pub localization_ok: bool,
    pub max_edge_bytes: u64,
    pub phase_max_bytes: BTreeMap<Phase, u64>,
    pub cost_bound: u64,
    pub rebuilt_tree: Option<usize>,
}

impl SessionRecord {
    /// ALS ran, whatever the final verdict.
    pub fn als_ran(&self) -> bool {
        self.als1.is_some()
    }

    pub fn marked(&self) -> BTreeSet<NodeId> {
        self.als1
            .iter()
            .chain(&self.als2)
            .flat_map(MarkSet::nodes)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Audits {
    pub failure_bound: bool,
    pub security: bool,
    pub cost: bool,
    pub exclusion_bound: bool,
    pub consistency: bool,
    pub localization: bool,
    pub ack_agreement: bool,
    pub stability: bool,
}

impl Audits {
    pub fn all_pass(&self) -> bool {
        self.failure_bound
            && self.security
            && self.cost
            && self.exclusion_bound
            && self.consistency
            && self.localization
            && self.ack_agreement
            && self.stability
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Disconnection {
    pub session: u64,
    pub unreachable: Vec<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    AuditFailure,
    Disconnected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub n: usize,
    pub n_a: usize,
    pub atr: AtrVariant,
    pub init_max_edge_bytes: u64,
    pub trees: Vec<TreeSnapshot>,
    pub sessions: Vec<SessionRecord>,
    pub failed: usize,
    pub excluded_correct: usize,
    pub excluded_faulty: usize,
    pub blacklist: Vec<NodeId>,
    pub trace: crate::adversary::MisbehaviorTrace,
    pub disconnection: Option<Disconnection>,
    /// Largest `Δ_A` over all trees of the run.
    pub max_tree_degree: usize,
    pub audits: Audits,
    pub verdict: Verdict,
}

/// `val_A − Σ_{correct s ∈ T_A} val(s) ∈ [n_f·lo, n_f·hi]`.
pub fn security_audit(
    value: i64,
    values: &BTreeMap<NodeId, i64>,
    tree: &AggregationTree,
    faulty: &BTreeSet<NodeId>,
    range: ValueRange,
) -> SecurityCheck {
    let correct_sum: i64 = tree
        .members()
        .filter(|s| !faulty.contains(s))
        .map(|s| values[&s])
        .fold(0i64, i64::wrapping_add);
    let n_f = tree.members().filter(|s| faulty.contains(s)).count();
    let slack = i128::from(value) - i128::from(correct_sum);
    let pass = slack >= n_f as i128 * i128::from(range.lo) && slack <= n_f as i128 * i128::from(range.hi);
    SecurityCheck {
        correct_sum,
        faulty_in_tree: n_f,
        pass,
    }
}

/// Per-session congestion bound from the frozen constants.
pub fn cost_bound(accepted_without_als: bool, height: usize, max_degree: usize, n: usize) -> u64 {
    if accepted_without_als {
        (C1 * (height * max_degree) as f64 * UNIT_BYTES as f64).ceil() as u64
    } else {
        (C2 * n as f64 * UNIT_BYTES as f64).ceil() as u64
    }
}

pub fn cost_audit(records: &[SessionRecord]) -> bool {
    records.iter().all(|r| r.max_edge_bytes <= r.cost_bound)
}

/// Least-squares fit `y ≈ a + b·x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
}

impl LinearFit {
    pub fn fit(points: &[(f64, f64)]) -> Option<Self> {
        if points.len() < 2 {
            return None;
        }
        let k = points.len() as f64;
        let mx = points.iter().map(|p| p.0).sum::<f64>() / k;
        let my = points.iter().map(|p| p.1).sum::<f64>() / k;
        let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
        if sxx == 0.0 {
            return None;
        }
        let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let slope = sxy / sxx;
        Some(Self {
            intercept: my - slope * mx,
            slope,
        })
    }

    pub fn predict(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

/// Linearity check for failed-session cost against `n`: every consecutive segment slope lies
/// within `±tol` of the fitted slope, and no point sits more than `tol` above the fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearityCheck {
    pub fit: LinearFit,
    pub segment_slopes: Vec<f64>,
    pub superlinear_outliers: Vec<f64>,
    pub pass: bool,
}

pub fn linearity_check(points: &[(f64, f64)], tol: f64) -> Option<LinearityCheck> {
    let fit = LinearFit::fit(points)?;
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let segment_slopes: Vec<f64> = sorted
        .windows(2)
        .map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0))
        .collect();
    let superlinear_outliers: Vec<f64> = sorted
        .iter()
        .filter(|(x, y)| *y > fit.predict(*x) * (1.0 + tol))
        .map(|p| p.0)
        .collect();
    let slopes_ok = fit.slope > 0.0
        && segment_slopes
            .iter()
            .all(|s| (s - fit.slope).abs() <= tol * fit.slope);
    Some(LinearityCheck {
        fit,
        pass: slopes_ok && superlinear_outliers.is_empty(),
        segment_slopes,
        superlinear_outliers,
    })
}

fn exact_views(tree: &AggregationTree) -> TreeViews {
    tree.members()
        .map(|s| {
            (
                s,
                LocalView {
                    parent: tree.parent(s),
                    children: tree.children(s).to_vec(),
                },
            )
        })
        .collect()
}

/// Unreachable non-blacklisted sensors once `bl` is excluded, if any.
fn disconnected(graph: &NetworkGraph, bl: &BlackList) -> Option<Vec<NodeId>> {
    let all: Vec<NodeId> = graph.sensors().filter(|&s| !bl.contains(s)).collect();
    let Some(b) = choose_bs_child(graph, bl.set()) else {
        return Some(all);
    };
    let mut blocked = bl.set().clone();
    blocked.insert(NodeId::BS);
    let reach = graph.reachable_from(b, &blocked);
    let lost: Vec<NodeId> = all.into_iter().filter(|s| !reach.contains(s)).collect();
    (!lost.is_empty()).then_some(lost)
}

struct Engine {
    net: Network,
    adversary: Adversary,
    /// BS connectivity graph when the resilient variant is in use.
    cg: Option<ConnectivityGraph>,
    bl: BlackList,
    next_nonce: u64,
    trees: Vec<TreeSnapshot>,
}

impl Engine {
    fn nonce(&mut self) -> Nonce {
        self.next_nonce += 1;
        Nonce(self.next_nonce)
    }

    fn snapshot(&mut self, out: &AtrOutcome, built_after: u64, max_edge: u64) -> usize {
        let faulty = self.adversary.faulty().clone();
        let m = out.tree.metrics();
        let id = self.trees.len();
        self.trees.push(TreeSnapshot {
            id,
            built_after,
            parents: out.tree.parents().clone(),
            height: m.height,
            max_degree: m.max_degree,
            unreached: out.unreached.iter().copied().collect(),
            view_mismatches: view_mismatches(&out.tree, &out.views, |s| !faulty.contains(&s)),
            max_edge_bytes: max_edge,
        });
        id
    }

    fn rebuild(&mut self, session: u64) -> Result<AtrOutcome> {
        let nonce = self.nonce();
        match &self.cg {
            Some(cg) => atr_resilient_build(&mut self.net, cg, &self.bl, nonce),
            None => atr_basic(&mut self.net, &self.bl, nonce, &mut self.adversary),
        }
        .map_err(|e| Error::Protocol(format!("reconstruction after session {session}: {e}")))
    }
}

/// Runs every session of `sc` and audits the run.
pub fn run_sessions(sc: &Scenario) -> Result<RunReport> {
    let graph = sc.graph.clone();
    let keys = KeyStore::derive(sc.seed, graph.nodes(), graph.edges());
    let mut eng = Engine {
        cg: None,
        net: Network::new(graph.clone(), keys),
        adversary: Adversary::new(&sc.adversary),
        bl: BlackList::default(),
        next_nonce: 0,
        trees: Vec::new(),
    };
    let faulty = sc.adversary.faulty.clone();

    let mut init_max_edge = 0;
    let (mut tree, first) = match sc.atr {
        AtrVariant::Basic => {
            let b = choose_bs_child(&graph, &BTreeSet::new())
                .ok_or_else(|| Error::Config("BS has no neighbor".into()))?;
            let (tree, unreached) = bfs_tree(&graph, b, &BTreeSet::new())?;
            let views = exact_views(&tree);
            (tree.clone(), AtrOutcome { tree, views, unreached })
        }
        AtrVariant::Resilient => {
            eng.adversary.set_session(0);
            let oracle = SignatureOracle::new(eng.net.keys());
            let cg = atr_resilient_init(&mut eng.net, &oracle, &mut eng.adversary)?;
            eng.cg = Some(cg);
            let out = eng.rebuild(0)?;
            init_max_edge = eng.net.take_ledger().max_edge();
            (out.tree.clone(), out)
        }
    };
    let mut tree_id = eng.snapshot(&first, 0, init_max_edge);
    let mut max_tree_degree = tree.metrics().max_degree;

    let mut records = Vec::new();
    let mut disconnection = None;
    for k in 1..=sc.sessions {
        eng.adversary.set_session(k);
        eng.net.take_ledger();
        let nonce = eng.nonce();
        let metrics = tree.metrics();

        let mut ctx = SessionCtx::new(&mut eng.net, &tree, &mut eng.adversary, nonce);
        let (st, outcome) = run_shia(&mut ctx, &sc.values, sc.range)?;
        let withholding: Vec<NodeId> = tree
            .members()
            .filter(|s| !faulty.contains(s) && !st.verified(*s))
            .collect();

        let mut rec = SessionRecord {
            session: k,
            nonce: nonce.0,
            tree: tree_id,
            height: metrics.height,
            max_degree: metrics.max_degree,
            accepted: outcome.accepted,
            value: None,
            accepted_after_als2: false,
            security: None,
            als1: None,
            als2: None,
            blacklist_after: Vec::new(),
            withholding,
            misbehaved: Vec::new(),
            ack_disagreements: Vec::new(),
            localization_ok: true,
            max_edge_bytes: 0,
            phase_max_bytes: BTreeMap::new(),
            cost_bound: 0,
            rebuilt_tree: None,
        };

        if !outcome.accepted {
            let m_b = als1_collect(&mut ctx, &st)?;
            let m1 = als1_process(&tree, ctx.net.keys(), m_b.as_deref(), nonce);
            if m1.is_empty() {
                let r_b = als2_collect(&mut ctx, &st)?;
                let m2 = als2_process(&tree, ctx.net.keys(), r_b.as_deref(), st.bs_ack, nonce)?;
                rec.als2 = Some(m2);
                if sc.accept_on_als2 {
                    rec.accepted = true;
                    rec.accepted_after_als2 = true;
                }
            }
            rec.als1 = Some(m1);
        }
        if rec.accepted {
            let value = st.root_label.expect("accepted sessions have a root").value;
            rec.value = Some(value);
            rec.security = Some(security_audit(value, &sc.values, &tree, &faulty, sc.range));
        }

        let trace = eng.adversary.trace();
        let shia_misbehaved = trace.misbehaved_in(k, Phase::is_shia);
        rec.ack_disagreements = ack_disagreements(&tree, &st, |s| !shia_misbehaved.contains(&s));

        if rec.als_ran() {
            let marked = rec.marked();
            eng.bl.extend(marked.iter().copied());
            if let Some(lost) = disconnected(&graph, &eng.bl) {
                disconnection = Some(Disconnection {
                    session: k,
                    unreachable: lost,
                });
            } else if !marked.is_empty() {
                let out = eng.rebuild(k)?;
                tree = out.tree.clone();
                max_tree_degree = max_tree_degree.max(tree.metrics().max_degree);
                let atr_max = eng.net.ledger().phase_max().get(&Phase::Atr).copied().unwrap_or(0);
                tree_id = eng.snapshot(&out, k, atr_max);
                rec.rebuilt_tree = Some(tree_id);
            }
        }

        // localization is judged on everything the session's misbehavers did, ATR included
        let misbehaved = eng.adversary.trace().misbehaved(k);
        if rec.als_ran() {
            rec.localization_ok = localization_ok(&rec, &misbehaved);
        }
        rec.misbehaved = misbehaved.into_iter().collect();
        rec.blacklist_after = eng.bl.set().iter().copied().collect();
        let ledger = eng.net.ledger();
        rec.max_edge_bytes = ledger.max_edge();
        rec.phase_max_bytes = ledger.phase_max();
        rec.cost_bound = cost_bound(!rec.als_ran(), rec.height, rec.max_degree, graph.n());
        records.push(rec);
        if disconnection.is_some() {
            break;
        }
    }

    let failed = records.iter().filter(|r| !r.accepted).count();
    let excluded_correct = eng.bl.set().iter().filter(|s| !faulty.contains(s)).count();
    let n_a = faulty.len();
    let audits = Audits {
        failure_bound: failed <= n_a,
        security: records
            .iter()
            .filter_map(|r| r.security.as_ref())
            .all(|c| c.pass),
        cost: cost_audit(&records),
        exclusion_bound: excluded_correct <= max_tree_degree.saturating_sub(1) * n_a,
        consistency: eng.trees.iter().all(|t| t.view_mismatches.is_empty()),
        localization: records.iter().all(|r| r.localization_ok),
        ack_agreement: records.iter().all(|r| r.ack_disagreements.is_empty()),
        stability: records.iter().all(|r| {
            let t = &eng.trees[r.tree];
            r.accepted || t.parents.keys().any(|s| faulty.contains(s))
        }),
    };
    let verdict = if !audits.all_pass() {
        Verdict::AuditFailure
    } else if disconnection.is_some() {
        Verdict::Disconnected
    } else {
        Verdict::Pass
    };
    Ok(RunReport {
        n: graph.n(),
        n_a,
        atr: sc.atr,
        init_max_edge_bytes: init_max_edge,
        trees: eng.trees,
        sessions: records,
        failed,
        excluded_correct,
        excluded_faulty: eng.bl.set().iter().filter(|s| faulty.contains(s)).count(),
        blacklist: eng.bl.set().iter().copied().collect(),
        trace: eng.adversary.trace().clone(),
        disconnection,
        max_tree_degree,
        audits,
        verdict,
    })
}

/// Marks are sound (each pair holds a misbehaver) and complete:
/// a correct node withholding its ack makes ALS.I mark a misbehaver, and an ALS.I that marks
/// nobody makes ALS.II mark one. An empty mark set after both phases is always a failure.
fn localization_ok(rec: &SessionRecord, misbehaved: &BTreeSet<NodeId>) -> bool {
    let sound = |m: &MarkSet| {
        m.marks
            .iter()
            .all(|k| misbehaved.contains(&k.node) || misbehaved.contains(&k.parent))
    };
    let hits = |m: &MarkSet| m.nodes().iter().any(|s| misbehaved.contains(s));
    let m1 = rec.als1.as_ref().expect("als ran");
    let als1_complete = rec.withholding.is_empty() || hits(m1);
    let als2_complete = match &rec.als2 {
        Some(m2) => hits(m2) && sound(m2),
        None => true,
    };
    sound(m1) && als1_complete && als2_complete && !rec.marked().is_empty()
}
