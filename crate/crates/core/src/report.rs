//! Report files: a run report plus everything needed to reproduce it byte for byte.

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::error::{Error, Result};
use crate::orchestrator::{run_sessions, RunReport, Verdict};
use crate::scenario::ScenarioConfig;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub version: String,
    pub config_hash: String,
    /// Replay seed; equal to `config.seed`.
    pub seed: u64,
    pub config: ScenarioConfig,
    pub run: RunReport,
}

/// SHA-256 over the code version and the canonical JSON form of the config, hex encoded.
pub fn config_hash(version: &str, cfg: &ScenarioConfig) -> Result<String> {
    let canonical = serde_json::to_vec(cfg).map_err(|e| Error::Parse(e.to_string()))?;
    let mut h = Sha256::new();
    h.update(version.as_bytes());
    h.update([0]);
    h.update(&canonical);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn execute(cfg: &ScenarioConfig) -> Result<ReportFile> {
    let run = run_sessions(&cfg.build()?)?;
    Ok(ReportFile {
        version: CODE_VERSION.to_string(),
        config_hash: config_hash(CODE_VERSION, cfg)?,
        seed: cfg.seed,
        config: cfg.clone(),
        run,
    })
}

pub fn render(report: &ReportFile) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report).map_err(|e| Error::Parse(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Process exit code for a finished run.
pub fn exit_code(verdict: Verdict) -> i32 {
    match verdict {
        Verdict::Pass => 0,
        Verdict::AuditFailure => 1,
        Verdict::Disconnected => 3,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReplayOutcome {
    Verified,
    /// First differing line (1-based) between stored and regenerated report.
    Divergent { line: usize },
    Refused(String),
}

impl ReplayOutcome {
    pub fn exit_code(&self) -> i32 {
        match self {
            ReplayOutcome::Verified => 0,
            ReplayOutcome::Divergent { .. } => 1,
            ReplayOutcome::Refused(_) => 2,
        }
    }
}

/// Re-executes the embedded config and compares the regenerated report byte for byte.
pub fn replay(text: &str) -> ReplayOutcome {
    let doc: serde_json::Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(e) => return ReplayOutcome::Refused(format!("not a report: {e}")),
    };
    let Some(version) = doc.get("version").and_then(|v| v.as_str()) else {
        return ReplayOutcome::Refused("report has no code version".into());
    };
    let Some(seed) = doc.get("seed").and_then(|v| v.as_u64()) else {
        return ReplayOutcome::Refused("report has no replay seed".into());
    };
    let Some(hash) = doc.get("config_hash").and_then(|v| v.as_str()) else {
        return ReplayOutcome::Refused("report has no config hash".into());
    };
    let cfg: ScenarioConfig = match doc.get("config").cloned().map(serde_json::from_value) {
        Some(Ok(c)) => c,
        Some(Err(e)) => return ReplayOutcome::Refused(format!("embedded config unreadable: {e}")),
        None => return ReplayOutcome::Refused("report has no embedded config".into()),
    };
    if version != CODE_VERSION {
        return ReplayOutcome::Refused(format!(
            "report was produced by version {version}, this is {CODE_VERSION}"
        ));
    }
    match config_hash(CODE_VERSION, &cfg) {
        Ok(h) if h == hash => {}
        _ => {
            return ReplayOutcome::Refused(
                "config hash does not match the embedded config for this code version".into(),
            )
        }
    }
    if seed != cfg.seed {
        return ReplayOutcome::Refused(format!("replay seed {seed} differs from config seed {}", cfg.seed));
    }
    let regenerated = match execute(&cfg).and_then(|r| render(&r)) {
        Ok(s) => s,
        Err(e) => return ReplayOutcome::Refused(format!("re-execution failed: {e}")),
    };
    if regenerated == text {
        return ReplayOutcome::Verified;
    }
    let line = regenerated
        .lines()
        .zip(text.lines())
        .position(|(a, b)| a != b)
        .unwrap_or_else(|| regenerated.lines().count().min(text.lines().count()))
        + 1;
    ReplayOutcome::Divergent { line }
}

/// One row of a size sweep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: usize,
    /// Height and degree of the initial tree.
    pub height: usize,
    pub max_degree: usize,
    /// Largest max-edge congestion over sessions that succeeded without ALS.
    pub success_cost: Option<u64>,
    /// Largest max-edge congestion over failed sessions.
    pub failure_cost: Option<u64>,
    pub verdict: Verdict,
}

impl SweepRow {
    pub fn from_report(r: &RunReport) -> Self {
        let max_of = |pred: fn(&crate::orchestrator::SessionRecord) -> bool| {
            r.sessions.iter().filter(|s| pred(s)).map(|s| s.max_edge_bytes).max()
        };
        Self {
            n: r.n,
            height: r.trees[0].height,
            max_degree: r.trees[0].max_degree,
            success_cost: max_of(|s| !s.als_ran()),
            failure_cost: max_of(|s| s.als_ran()),
            verdict: r.verdict,
        }
    }
}

/// Runs `template` at every size. Stops at the first run that does not pass and returns
/// its report alongside the rows so far.
pub fn sweep(template: &ScenarioConfig, sizes: &[u16]) -> Result<(Vec<SweepRow>, Option<ReportFile>)> {
    let mut rows = Vec::new();
    for &n in sizes {
        let report = execute(&template.resized(n)?)?;
        rows.push(SweepRow::from_report(&report.run));
        if report.run.verdict != Verdict::Pass {
            return Ok((rows, Some(report)));
        }
    }
    Ok((rows, None))
}
