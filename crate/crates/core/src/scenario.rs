//! Scenario configuration (TOML) and its materialization into a [`Scenario`].

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::AdversaryConfig;
use crate::crypto::NodeId;
use crate::error::{Error, Result};
use crate::net::NetworkGraph;
use crate::orchestrator::{AtrVariant, Scenario};
use crate::shia::ValueRange;

const TOPOLOGY_STREAM: u64 = 1;
const VALUE_STREAM: u64 = 2;
const MAX_TOPOLOGY_TRIES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub sessions: u64,
    #[serde(default)]
    pub atr: AtrVariant,
    #[serde(default)]
    pub accept_on_als2: bool,
    pub topology: Topology,
    pub values: ValueSpec,
    #[serde(default)]
    pub adversary: AdversaryConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Topology {
    /// Row-major grid of sensors `1..=rows·cols`; the BS is attached to sensor 1.
    Grid {
        rows: u16,
        cols: u16,
        #[serde(default = "default_grid_degree")]
        d_max: usize,
    },
    /// Sensors uniform in the unit square, BS at the center, links within `radius`.
    /// Resampled until connected without the BS and within the degree bound.
    RandomGeometric {
        n: u16,
        d_max: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        radius: Option<f64>,
    },
    Explicit {
        n: u16,
        d_max: usize,
        edges: Vec<(u16, u16)>,
    },
}

fn default_grid_degree() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValueSpec {
    pub lo: i64,
    pub hi: i64,
    #[serde(default)]
    pub generator: ValueGen,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueGen {
    #[default]
    Uniform,
    Constant(i64),
    /// One value per sensor, in id order.
    Fixed(Vec<i64>),
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Number of sensors the topology describes.
    pub fn n(&self) -> usize {
        match &self.topology {
            Topology::Grid { rows, cols, .. } => usize::from(*rows) * usize::from(*cols),
            Topology::RandomGeometric { n, .. } | Topology::Explicit { n, .. } => usize::from(*n),
        }
    }

    /// Same scenario at a different network size (used by sweeps).
    pub fn resized(&self, n: u16) -> Result<Self> {
        let mut out = self.clone();
        out.topology = match &self.topology {
            Topology::Grid { cols, d_max, .. } => Topology::Grid {
                rows: (n / cols).max(1),
                cols: *cols,
                d_max: *d_max,
            },
            Topology::RandomGeometric { d_max, radius, .. } => Topology::RandomGeometric {
                n,
                d_max: *d_max,
                radius: *radius,
            },
            Topology::Explicit { .. } => {
                return Err(Error::Config("explicit topologies cannot be resized".into()))
            }
        };
        if let ValueGen::Fixed(_) = out.values.generator {
            return Err(Error::Config("fixed values cannot be resized".into()));
        }
        Ok(out)
    }

    pub fn build(&self) -> Result<Scenario> {
        let range = ValueRange {
            lo: self.values.lo,
            hi: self.values.hi,
        };
        if range.lo > range.hi {
            return Err(Error::Config(format!("values.lo {} > values.hi {}", range.lo, range.hi)));
        }
        let graph = self.graph()?;
        self.adversary.validate(&graph, (range.lo, range.hi))?;

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(VALUE_STREAM);
        let values: BTreeMap<NodeId, i64> = match &self.values.generator {
            ValueGen::Uniform => graph
                .sensors()
                .map(|s| (s, rng.gen_range(range.lo..=range.hi)))
                .collect(),
            ValueGen::Constant(v) => graph.sensors().map(|s| (s, *v)).collect(),
            ValueGen::Fixed(vs) => {
                if vs.len() != graph.n() {
                    return Err(Error::Config(format!(
                        "values.generator.fixed has {} entries for {} sensors",
                        vs.len(),
                        graph.n()
                    )));
                }
                graph.sensors().zip(vs.iter().copied()).collect()
            }
        };
        for (s, v) in &values {
            if !self.adversary.faulty.contains(s) && !range.contains(*v) {
                return Err(Error::Config(format!(
                    "value {v} of correct node {s} outside [{}, {}]",
                    range.lo, range.hi
                )));
            }
        }
        Ok(Scenario {
            seed: self.seed,
            graph,
            range,
            values,
            adversary: self.adversary.clone(),
            sessions: self.sessions,
            atr: self.atr,
            accept_on_als2: self.accept_on_als2,
        })
    }

    fn graph(&self) -> Result<NetworkGraph> {
        let graph = match &self.topology {
            Topology::Grid { rows, cols, d_max } => {
                let (rows, cols) = (*rows, *cols);
                if rows == 0 || cols == 0 {
                    return Err(Error::Config("grid needs at least one row and column".into()));
                }
                let n = rows
                    .checked_mul(cols)
                    .filter(|&n| n < u16::MAX)
                    .ok_or_else(|| Error::Config("grid too large".into()))?;
                let id = |r: u16, c: u16| NodeId(r * cols + c + 1);
                let mut edges = vec![(NodeId::BS, NodeId(1))];
                for r in 0..rows {
                    for c in 0..cols {
                        if c + 1 < cols {
                            edges.push((id(r, c), id(r, c + 1)));
                        }
                        if r + 1 < rows {
                            edges.push((id(r, c), id(r + 1, c)));
                        }
                    }
                }
                NetworkGraph::new(n, &edges, *d_max)?
            }
            Topology::Explicit { n, d_max, edges } => {
                let edges: Vec<_> = edges.iter().map(|&(a, b)| (NodeId(a), NodeId(b))).collect();
                NetworkGraph::new(*n, &edges, *d_max)?
            }
            Topology::RandomGeometric { n, d_max, radius } => {
                random_geometric(self.seed, *n, *d_max, *radius)?
            }
        };
        if !connected_without_bs(&graph) {
            return Err(Error::Config(
                "sensors must stay connected without the BS (the tree has a single BS child)".into(),
            ));
        }
        Ok(graph)
    }
}

fn connected_without_bs(graph: &NetworkGraph) -> bool {
    let Some(b) = graph.neighbors(NodeId::BS).next() else {
        return false;
    };
    graph.reachable_from(b, &BTreeSet::from([NodeId::BS])).len() == graph.n()
}

/// Default radius: expected degree about `2·ln n`, comfortably above the connectivity threshold.
pub fn default_radius(n: u16) -> f64 {
    let n = f64::from(n.max(2));
    (2.0 * n.ln() / (std::f64::consts::PI * n)).sqrt()
}

fn random_geometric(seed: u64, n: u16, d_max: usize, radius: Option<f64>) -> Result<NetworkGraph> {
    if n == 0 {
        return Err(Error::Config("random_geometric needs n ≥ 1".into()));
    }
    let r = radius.unwrap_or_else(|| default_radius(n));
    if !(r > 0.0) {
        return Err(Error::Config(format!("radius {r} must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TOPOLOGY_STREAM);
    for _ in 0..MAX_TOPOLOGY_TRIES {
        let mut pos = vec![(0.5, 0.5)];
        pos.extend((0..n).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())));
        let mut edges = Vec::new();
        for i in 0..pos.len() {
            for j in i + 1..pos.len() {
                let (dx, dy) = (pos[i].0 - pos[j].0, pos[i].1 - pos[j].1);
                if dx * dx + dy * dy <= r * r {
                    edges.push((NodeId(i as u16), NodeId(j as u16)));
                }
            }
        }
        if let Ok(g) = NetworkGraph::new(n, &edges, d_max) {
            if connected_without_bs(&g) {
                return Ok(g);
            }
        }
    }
    Err(Error::Config(format!(
        "no connected random geometric graph with n = {n}, d_max = {d_max}, radius = {r} after {MAX_TOPOLOGY_TRIES} tries"
    )))
}
