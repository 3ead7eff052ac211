use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sensoragg::orchestrator::AtrVariant;
use sensoragg::report::{execute, exit_code, render, replay, sweep, ReplayOutcome, SweepRow};
use sensoragg::scenario::ScenarioConfig;
use sensoragg::{Error, Result};

const EXIT_PARSE: u8 = 2;

#[derive(Parser)]
#[command(version, about = "Secure aggregation simulator with adversary localization and tree reconstruction")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write its report.
    Run {
        #[command(flatten)]
        common: Common,
        /// Report path (JSON); stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario template at several network sizes and print the cost table.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated network sizes.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<u16>,
        /// Table path (JSON). A failing run's report goes to `<out>.failed.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-execute a report and compare it byte for byte.
    Replay {
        report: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed_override: Option<u64>,
    #[arg(long, value_enum)]
    atr: Option<AtrArg>,
    #[arg(long)]
    accept_on_als2: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum AtrArg {
    Basic,
    Resilient,
}

impl Common {
    fn load(&self) -> Result<ScenarioConfig> {
        let text = std::fs::read_to_string(&self.config)?;
        let mut cfg = ScenarioConfig::from_toml(&text)
            .map_err(|e| Error::Parse(format!("{}: {e}", self.config.display())))?;
        if let Some(seed) = self.seed_override {
            cfg.seed = seed;
        }
        if let Some(atr) = self.atr {
            cfg.atr = match atr {
                AtrArg::Basic => AtrVariant::Basic,
                AtrArg::Resilient => AtrVariant::Resilient,
            };
        }
        cfg.accept_on_als2 |= self.accept_on_als2;
        Ok(cfg)
    }
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => Ok(std::fs::write(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn print_table(rows: &[SweepRow]) {
    let cell = |v: Option<u64>| v.map_or("-".to_string(), |v| v.to_string());
    eprintln!("{:>6} {:>4} {:>4} {:>14} {:>14}", "n", "h", "Δ", "success_cost", "failure_cost");
    for r in rows {
        eprintln!(
            "{:>6} {:>4} {:>4} {:>14} {:>14}",
            r.n,
            r.height,
            r.max_degree,
            cell(r.success_cost),
            cell(r.failure_cost)
        );
    }
}

fn run(cmd: Cmd) -> Result<u8> {
    match cmd {
        Cmd::Run { common, out } => {
            let cfg = common.load()?;
            let report = execute(&cfg)?;
            write_out(out.as_deref(), &render(&report)?)?;
            let run = &report.run;
            eprintln!(
                "{} sessions, {} failed, blacklist {:?}, verdict {:?}",
                run.sessions.len(),
                run.failed,
                run.blacklist.iter().map(|s| s.0).collect::<Vec<_>>(),
                run.verdict
            );
            Ok(exit_code(run.verdict) as u8)
        }
        Cmd::Sweep { common, sizes, out } => {
            let cfg = common.load()?;
            let (rows, failing) = sweep(&cfg, &sizes)?;
            print_table(&rows);
            let table = serde_json::to_string_pretty(&rows).map_err(|e| Error::Parse(e.to_string()))? + "\n";
            write_out(out.as_deref(), &table)?;
            match failing {
                None => Ok(0),
                Some(report) => {
                    let text = render(&report)?;
                    match &out {
                        Some(p) => std::fs::write(p.with_extension("failed.json"), text)?,
                        None => eprint!("{text}"),
                    }
                    eprintln!("run at n = {} did not pass: {:?}", report.run.n, report.run.verdict);
                    Ok(exit_code(report.run.verdict) as u8)
                }
            }
        }
        Cmd::Replay { report } => {
            let text = std::fs::read_to_string(&report)?;
            let outcome = replay(&text);
            match &outcome {
                ReplayOutcome::Verified => eprintln!("verified"),
                ReplayOutcome::Divergent { line } => eprintln!("divergent at line {line}"),
                ReplayOutcome::Refused(why) => eprintln!("refused: {why}"),
            }
            Ok(outcome.exit_code() as u8)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_PARSE)
        }
    }
}
