//! Scenario-runner CLI. Exit codes: 0 ok, 1 lint or validation failure,
//! 2 simulation fault. Set `LOOPSTACK_LOG` for log verbosity.

use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::engine::{run_scenario_spec, EngineOptions, RunSummary};
use crate::error::{Error, Result};
use crate::mission::SHIPPED_SCENARIOS;
use crate::model::load_model;
use crate::report::{report_from_path, write_summary};
use crate::taxonomy::lint_autonomy_coverage;
use crate::trace::fmt_f64;

#[derive(Parser)]
#[command(name = "loopstack", version, about = "Deterministic nested-loop scenario runner")]
pub struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write its trace.
    Run {
        /// Built-in scenario name or path to a scenario file.
        #[arg(long)]
        scenario: String,
        /// RNG seed; defaults to the scenario's declared seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Tick-count override.
        #[arg(long)]
        ticks: Option<u64>,
        /// Trace output path.
        #[arg(long)]
        out: PathBuf,
        /// Also write a summary file computed from the trace.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Run even when the model fails lint.
        #[arg(long)]
        allow_lint_failures: bool,
        /// Disable the crosstalk bus (reflex-locality experiments).
        #[arg(long)]
        disable_bus: bool,
    },
    /// Lint a model's autonomy coverage.
    Lint {
        /// Built-in model name or path to a model file.
        #[arg(long)]
        model: String,
    },
    /// Analyze a trace file.
    Report {
        #[arg(long)]
        trace: PathBuf,
        /// Write the summary here instead of stdout.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Shipped-scenario utilities.
    Scenarios {
        #[command(subcommand)]
        cmd: ScenariosCmd,
    },
}

#[derive(Subcommand)]
enum ScenariosCmd {
    /// Print the shipped scenario names.
    List,
}

fn print_run_summary(s: &RunSummary) {
    println!(
        "run scenario={} seed={} ticks={} messages={} routing_violations={} transitions={}",
        s.scenario, s.seed, s.ticks, s.messages_delivered, s.routing_violations, s.transitions
    );
    for (k, v) in &s.world {
        println!("world {k}={}", fmt_f64(*v));
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Run {
            scenario,
            seed,
            ticks,
            out,
            summary,
            allow_lint_failures,
            disable_bus,
        } => {
            let opts = EngineOptions {
                disable_bus,
                allow_lint_failures,
                ticks_override: ticks,
                seed_override: seed,
            };
            let file = std::fs::File::create(&out)?;
            let mut sink = BufWriter::new(file);
            let run = run_scenario_spec(&scenario, &opts, &mut sink)?;
            sink.flush()?;
            print_run_summary(&run);
            if let Some(path) = summary {
                let report = report_from_path(&out)?;
                let mut f = BufWriter::new(std::fs::File::create(&path)?);
                write_summary(&report, &mut f)?;
                f.flush()?;
            }
            Ok(())
        }
        Cmd::Lint { model } => {
            let model = load_model(&model, None)?;
            let findings = lint_autonomy_coverage(&model);
            for f in &findings {
                println!("finding kind={} node={} detail={}", f.kind.as_str(), f.node, f.detail);
            }
            if findings.is_empty() {
                println!("lint ok nodes={}", model.nodes.len());
                Ok(())
            } else {
                Err(Error::Lint(findings.len()))
            }
        }
        Cmd::Report { trace, summary } => {
            let report = report_from_path(&trace)?;
            match summary {
                Some(path) => {
                    let mut f = BufWriter::new(std::fs::File::create(&path)?);
                    write_summary(&report, &mut f)?;
                    f.flush()?;
                }
                None => {
                    let stdout = std::io::stdout();
                    write_summary(&report, stdout.lock())?;
                }
            }
            Ok(())
        }
        Cmd::Scenarios { cmd: ScenariosCmd::List } => {
            for name in SHIPPED_SCENARIOS {
                println!("{name}");
            }
            Ok(())
        }
    }
}

/// Parse arguments, run, and map errors onto the documented exit codes.
pub fn run_cli() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::new().filter("LOOPSTACK_LOG")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e @ Error::Fault { .. }) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
