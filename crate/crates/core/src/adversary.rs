//! Faulty-node behavior catalog, scripted injection hooks, and the ground-truth
//! misbehavior trace the test oracles compare marks against.
//!
//! Actions only tamper with messages the faulty node itself emits, under keys it
//! legitimately holds (its own `K_s` and incident link keys), so no action can
//! forge an envelope, MAC or signature of a correct node.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::crypto::NodeId;
use crate::error::{Error, Result};
use crate::net::{NetworkGraph, Phase};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    /// Contribute an arbitrary in-range own value. Legal, never traced.
    OwnValueForge { value: i64 },
    LabelForge {
        #[serde(default)]
        count_delta: i32,
        #[serde(default)]
        value_delta: i64,
        #[serde(default)]
        corrupt_commitment: bool,
    },
    LabelDrop,
    /// Corrupt the off-path labels forwarded to `child` (all children when unset).
    OffPathCorrupt {
        #[serde(default)]
        child: Option<NodeId>,
    },
    AckDrop,
    /// Replace the node's own ack contribution with garbage.
    AckGarble,
    /// XOR-tamper the aggregated ack sent upward.
    AggAckGarble,
    ConfirmTamper { slot: usize },
    ConfirmDrop,
    /// Substitute the reported `A_u` for `child` (first child when unset).
    AckReportForge {
        #[serde(default)]
        child: Option<NodeId>,
    },
    ReportDrop,
    /// Send SHIA label and ack to another faulty neighbor instead of the tree parent.
    ParentSwitch { to: NodeId },
    TeSuppress,
    ResponseDrop,
    /// Announce a link to `claim` that does not exist.
    NlFake { claim: NodeId },
    /// Inject a neighbor list attributed to `victim` with an invalid signature.
    NlForge { victim: NodeId },
}

pub const GARBLE_OWN: [u8; 16] = [0xA5; 16];
pub const GARBLE_AGG: [u8; 16] = [0x5A; 16];
pub const GARBLE_REPORT: [u8; 16] = [0x3C; 16];

impl Action {
    pub fn phase(&self) -> Phase {
        use Action::*;
        match self {
            OwnValueForge { .. } | LabelForge { .. } | LabelDrop | ParentSwitch { .. } => {
                Phase::Commit
            }
            OffPathCorrupt { .. } => Phase::ResultCheck,
            AckDrop | AckGarble | AggAckGarble => Phase::AckCollect,
            ConfirmTamper { .. } | ConfirmDrop => Phase::Als1,
            AckReportForge { .. } | ReportDrop => Phase::Als2,
            TeSuppress | ResponseDrop => Phase::Atr,
            NlFake { .. } | NlForge { .. } => Phase::AtrInit,
        }
    }

    /// Own-value forgery is not a protocol deviation.
    pub fn is_legal(&self) -> bool {
        matches!(self, Action::OwnValueForge { .. })
    }

    pub fn name(&self) -> &'static str {
        use Action::*;
        match self {
            OwnValueForge { .. } => "own_value_forge",
            LabelForge { .. } => "label_forge",
            LabelDrop => "label_drop",
            OffPathCorrupt { .. } => "off_path_corrupt",
            AckDrop => "ack_drop",
            AckGarble => "ack_garble",
            AggAckGarble => "agg_ack_garble",
            ConfirmTamper { .. } => "confirm_tamper",
            ConfirmDrop => "confirm_drop",
            AckReportForge { .. } => "ack_report_forge",
            ReportDrop => "report_drop",
            ParentSwitch { .. } => "parent_switch",
            TeSuppress => "te_suppress",
            ResponseDrop => "response_drop",
            NlFake { .. } => "nl_fake",
            NlForge { .. } => "nl_forge",
        }
    }
}

pub fn catalog() -> &'static [&'static str] {
    &[
        "own_value_forge",
        "label_forge",
        "label_drop",
        "off_path_corrupt",
        "ack_drop",
        "ack_garble",
        "agg_ack_garble",
        "confirm_tamper",
        "confirm_drop",
        "ack_report_forge",
        "report_drop",
        "parent_switch",
        "te_suppress",
        "response_drop",
        "nl_fake",
        "nl_forge",
    ]
}

/// Which sessions a scripted action fires in. Session 0 is the resilient-ATR init phase.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionSelector {
    #[default]
    All,
    Only(Vec<u64>),
    From(u64),
}

impl SessionSelector {
    pub fn matches(&self, session: u64) -> bool {
        match self {
            SessionSelector::All => true,
            SessionSelector::Only(v) => v.contains(&session),
            SessionSelector::From(k) => session >= *k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedAction {
    pub node: NodeId,
    #[serde(flatten)]
    pub action: Action,
    #[serde(default)]
    pub sessions: SessionSelector,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversaryConfig {
    #[serde(default)]
    pub faulty: BTreeSet<NodeId>,
    #[serde(default)]
    pub script: Vec<ScriptedAction>,
}

impl AdversaryConfig {
    pub fn n_a(&self) -> usize {
        self.faulty.len()
    }

    pub fn validate(&self, graph: &NetworkGraph, range: (i64, i64)) -> Result<()> {
        if self.faulty.contains(&NodeId::BS) {
            return Err(Error::Config("the BS cannot be faulty".into()));
        }
        if let Some(s) = self.faulty.iter().find(|s| !graph.contains(**s)) {
            return Err(Error::Config(format!("faulty node {s} is not in the network")));
        }
        if self.faulty.len() >= graph.n() {
            return Err(Error::Config(format!(
                "n_a = {} must be smaller than n = {}",
                self.faulty.len(),
                graph.n()
            )));
        }
        for entry in &self.script {
            if !self.faulty.contains(&entry.node) {
                return Err(Error::Config(format!(
                    "script for correct node {} ({})",
                    entry.node,
                    entry.action.name()
                )));
            }
            match &entry.action {
                Action::OwnValueForge { value } if *value < range.0 || *value > range.1 => {
                    return Err(Error::Config(format!(
                        "own_value_forge value {value} outside [{}, {}]",
                        range.0, range.1
                    )));
                }
                Action::ParentSwitch { to } => {
                    if !self.faulty.contains(to) {
                        return Err(Error::Config(format!(
                            "parent_switch target {to} of {} is not faulty",
                            entry.node
                        )));
                    }
                    if !graph.has_edge(entry.node, *to) {
                        return Err(Error::Config(format!(
                            "parent_switch target {to} is not a neighbor of {}",
                            entry.node
                        )));
                    }
                }
                Action::NlFake { claim } | Action::NlForge { victim: claim }
                    if !graph.contains(*claim) || claim.is_bs() =>
                {
                    return Err(Error::Config(format!("{} refers to unknown node {claim}", entry.action.name())));
                }
                // two colluding announcers would make a fake link mutual, i.e. a wormhole
                Action::NlFake { claim } if self.faulty.contains(claim) => {
                    return Err(Error::Config(format!("nl_fake claim {claim} is itself faulty")));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub session: u64,
    pub node: NodeId,
    pub phase: Phase,
    pub action: String,
}

/// Every deviation actually executed, in execution order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MisbehaviorTrace {
    pub events: Vec<TraceEvent>,
}

impl MisbehaviorTrace {
    pub fn misbehaved(&self, session: u64) -> BTreeSet<NodeId> {
        self.events
            .iter()
            .filter(|e| e.session == session)
            .map(|e| e.node)
            .collect()
    }

    pub fn misbehaved_in(&self, session: u64, phase: impl Fn(Phase) -> bool) -> BTreeSet<NodeId> {
        self.events
            .iter()
            .filter(|e| e.session == session && phase(e.phase))
            .map(|e| e.node)
            .collect()
    }
}

/// Runtime adversary: resolves scripted actions for the current session and records the trace.
#[derive(Debug, Clone)]
pub struct Adversary {
    faulty: BTreeSet<NodeId>,
    scripts: BTreeMap<NodeId, Vec<(Action, SessionSelector)>>,
    session: u64,
    trace: MisbehaviorTrace,
}

impl Adversary {
    pub fn new(config: &AdversaryConfig) -> Self {
        let mut scripts: BTreeMap<NodeId, Vec<(Action, SessionSelector)>> = BTreeMap::new();
        for e in &config.script {
            scripts
                .entry(e.node)
                .or_default()
                .push((e.action.clone(), e.sessions.clone()));
        }
        Self {
            faulty: config.faulty.clone(),
            scripts,
            session: 0,
            trace: MisbehaviorTrace::default(),
        }
    }

    pub fn honest() -> Self {
        Self::new(&AdversaryConfig::default())
    }

    pub fn set_session(&mut self, session: u64) {
        self.session = session;
    }

    pub fn session(&self) -> u64 {
        self.session
    }

    pub fn is_faulty(&self, s: NodeId) -> bool {
        self.faulty.contains(&s)
    }

    pub fn faulty(&self) -> &BTreeSet<NodeId> {
        &self.faulty
    }

    /// Actions of `s` scheduled for `phase` in the current session.
    pub fn active(&self, s: NodeId, phase: Phase) -> Vec<Action> {
        self.scripts
            .get(&s)
            .into_iter()
            .flatten()
            .filter(|(a, sel)| a.phase() == phase && sel.matches(self.session))
            .map(|(a, _)| a.clone())
            .collect()
    }

    pub fn find<T>(&self, s: NodeId, phase: Phase, f: impl Fn(&Action) -> Option<T>) -> Option<T> {
        self.active(s, phase).iter().find_map(f)
    }

    pub fn has(&self, s: NodeId, phase: Phase, f: impl Fn(&Action) -> bool) -> bool {
        self.active(s, phase).iter().any(f)
    }

    /// Records that `s` executed `action` this session (legal actions are not recorded).
    pub fn record(&mut self, s: NodeId, action: &Action) {
        if action.is_legal() {
            return;
        }
        self.trace.events.push(TraceEvent {
            session: self.session,
            node: s,
            phase: action.phase(),
            action: action.name().to_string(),
        });
    }

    pub fn trace(&self) -> &MisbehaviorTrace {
        &self.trace
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph() -> NetworkGraph {
        let e: Vec<_> = [(0, 1), (1, 2), (2, 3), (1, 3)]
            .iter()
            .map(|&(a, b)| (NodeId(a), NodeId(b)))
            .collect();
        NetworkGraph::new(3, &e, 3).unwrap()
    }

    fn config(node: u16, action: Action) -> AdversaryConfig {
        AdversaryConfig {
            faulty: BTreeSet::from([NodeId(2)]),
            script: vec![ScriptedAction {
                node: NodeId(node),
                action,
                sessions: SessionSelector::All,
            }],
        }
    }

    #[test]
    fn scripting_a_correct_node_is_rejected() {
        let c = config(3, Action::LabelDrop);
        assert!(matches!(c.validate(&graph(), (0, 10)), Err(Error::Config(_))));
        assert!(config(2, Action::LabelDrop).validate(&graph(), (0, 10)).is_ok());
    }

    #[test]
    fn validation_rules() {
        let g = graph();
        assert!(config(2, Action::OwnValueForge { value: 11 }).validate(&g, (0, 10)).is_err());
        assert!(config(2, Action::ParentSwitch { to: NodeId(3) }).validate(&g, (0, 10)).is_err());
        let mut both = config(2, Action::ParentSwitch { to: NodeId(3) });
        both.faulty.insert(NodeId(3));
        assert!(both.validate(&g, (0, 10)).is_ok());
        let mut too_many = AdversaryConfig::default();
        too_many.faulty = (1..=3).map(NodeId).collect();
        assert!(too_many.validate(&g, (0, 10)).is_err());
        let mut bs = AdversaryConfig::default();
        bs.faulty.insert(NodeId::BS);
        assert!(bs.validate(&g, (0, 10)).is_err());
    }

    #[test]
    fn actions_respect_session_selectors() {
        let mut c = config(2, Action::LabelDrop);
        c.script[0].sessions = SessionSelector::Only(vec![2]);
        let mut adv = Adversary::new(&c);
        adv.set_session(1);
        assert!(adv.active(NodeId(2), Phase::Commit).is_empty());
        adv.set_session(2);
        assert_eq!(adv.active(NodeId(2), Phase::Commit), vec![Action::LabelDrop]);
        assert!(adv.active(NodeId(2), Phase::Als1).is_empty());
        assert!(SessionSelector::From(3).matches(4));
        assert!(!SessionSelector::From(3).matches(2));
    }

    #[test]
    fn trace_skips_legal_forgery() {
        let mut adv = Adversary::new(&config(2, Action::OwnValueForge { value: 3 }));
        adv.set_session(2);
        adv.record(NodeId(2), &Action::OwnValueForge { value: 3 });
        assert!(adv.trace().events.is_empty());
        adv.record(NodeId(2), &Action::LabelDrop);
        assert_eq!(
            adv.trace().events,
            vec![TraceEvent {
                session: 2,
                node: NodeId(2),
                phase: Phase::Commit,
                action: "label_drop".into()
            }]
        );
        assert_eq!(adv.trace().misbehaved(2), BTreeSet::from([NodeId(2)]));
        assert!(adv.trace().misbehaved(1).is_empty());
    }

    #[test]
    fn catalog_covers_every_action() {
        let all = [
            Action::OwnValueForge { value: 0 },
            Action::LabelForge { count_delta: 0, value_delta: 1, corrupt_commitment: false },
            Action::LabelDrop,
            Action::OffPathCorrupt { child: None },
            Action::AckDrop,
            Action::AckGarble,
            Action::AggAckGarble,
            Action::ConfirmTamper { slot: 0 },
            Action::ConfirmDrop,
            Action::AckReportForge { child: None },
            Action::ReportDrop,
            Action::ParentSwitch { to: NodeId(1) },
            Action::TeSuppress,
            Action::ResponseDrop,
            Action::NlFake { claim: NodeId(1) },
            Action::NlForge { victim: NodeId(1) },
        ];
        let names: Vec<_> = all.iter().map(Action::name).collect();
        assert_eq!(names, catalog());
    }

    #[test]
    fn script_entries_parse_from_toml() {
        let text = r#"
            faulty = [2]
            [[script]]
            node = 2
            action = "label_forge"
            value_delta = 100
            sessions = { only = [1, 3] }
        "#;
        let c: AdversaryConfig = toml::from_str(text).unwrap();
        assert_eq!(
            c.script[0].action,
            Action::LabelForge { count_delta: 0, value_delta: 100, corrupt_commitment: false }
        );
        assert_eq!(c.script[0].sessions, SessionSelector::Only(vec![1, 3]));
    }
}
