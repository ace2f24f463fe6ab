use std::fs::{self, File};
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Parser};

use tmrckpt::fuzz::FuzzOptions;
use tmrckpt::presets;
use tmrckpt::runner::{self, RunFlags};
use tmrckpt::scenario::parse_scenario;
use tmrckpt::trace;

/// Simulate coordinated checkpointing with dependency-based rollback and
/// TMR failover, and check every run against trace oracles.
#[derive(Debug, Parser)]
#[command(name = "tmrckpt", version)]
#[command(group(ArgGroup::new("input").args(["scenario", "preset", "fuzz"]).required(true)))]
struct Cli {
    /// Scenario file to run.
    #[arg(long, value_name = "PATH")]
    scenario: Option<PathBuf>,
    /// Built-in scenario (paper-5proc, paper-fig4).
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
    /// Overrides the network seed; in fuzz mode, the first scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the trace as JSON lines.
    #[arg(long, value_name = "PATH")]
    trace_out: Option<PathBuf>,
    /// Write the run report as JSON.
    #[arg(long, value_name = "PATH")]
    report_out: Option<PathBuf>,
    /// Run K random scenarios instead of a single one.
    #[arg(long, value_name = "K")]
    fuzz: Option<usize>,
    /// Maximum number of simulation events.
    #[arg(long, value_name = "N")]
    step_budget: Option<u64>,
}

fn write_json<T: serde::Serialize>(path: &PathBuf, value: &T) -> Result<(), String> {
    let f = File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value).map_err(|e| e.to_string())
}

fn run(cli: Cli) -> Result<i32, String> {
    if let Some(k) = cli.fuzz {
        let summary = runner::fuzz(k, cli.seed.unwrap_or(0), &FuzzOptions::default());
        println!(
            "fuzz: {} runs, {} recoveries, {} intervals checked, {} failures",
            summary.runs,
            summary.recoveries,
            summary.intervals_checked,
            summary.failures.len()
        );
        for f in &summary.failures {
            println!("  seed {} (exit {}): {}", f.seed, f.exit_code, f.reason);
        }
        if let Some(p) = &cli.report_out {
            write_json(p, &summary)?;
        }
        return Ok(summary
            .failures
            .iter()
            .map(|f| f.exit_code)
            .max()
            .unwrap_or(0));
    }

    let mut sc = match (&cli.scenario, &cli.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            parse_scenario(&text).map_err(|e| format!("{}:\n{e}", path.display()))?
        }
        (None, Some(name)) => presets::preset(name).ok_or_else(|| {
            format!(
                "unknown preset {name:?}; available: {}",
                presets::PRESETS.join(", ")
            )
        })?,
        (None, None) => unreachable!("clap enforces an input"),
    };
    RunFlags {
        seed: cli.seed,
        step_budget: cli.step_budget,
    }
    .apply(&mut sc);

    let (out, report) = runner::execute(&sc).map_err(|e| e.to_string())?;
    if let Some(p) = &cli.trace_out {
        let f = File::create(p).map_err(|e| format!("{}: {e}", p.display()))?;
        trace::write_jsonl(&out.trace, BufWriter::new(f)).map_err(|e| e.to_string())?;
    }
    if let Some(p) = &cli.report_out {
        write_json(p, &report)?;
    }

    println!("status: {:?}", report.status);
    println!("intervals checked: {}", report.intervals.len());
    for (k, c) in &report.sync_messages {
        println!("  interval {k}: {c} sync messages");
    }
    for r in &report.recoveries {
        let set: Vec<u32> = r.report.rollback_set.iter().map(|p| p.0).collect();
        println!(
            "recovery epoch {}: node {} failed, rollback set {:?} ({} of {} spared)",
            r.report.epoch, r.report.failed_node.0, set, r.savings.spared, r.savings.n
        );
        for v in &r.report.verdicts {
            println!("  P{}: {:?}", v.pid.0, v.reason);
        }
        for p in &r.report.promotions {
            println!(
                "  group {}: N{} {:?} -> {:?}",
                p.group_id, p.node.0, p.from, p.to
            );
        }
        if let Some(t) = &r.report.takeover {
            for (pid, src, idx) in &t.sources {
                println!(
                    "  P{} now on N{} from checkpoint {} held by N{}",
                    pid.0, t.host.0, idx.0, src.0
                );
            }
        }
    }
    for v in &report.violations {
        println!("violation: {v}");
    }
    if !report.counterexample.is_empty() {
        print!("{}", trace::to_jsonl(&report.counterexample));
    }
    if let tmrckpt::sim::RunStatus::Livelock { pending } = &report.status {
        for p in pending {
            println!("  pending {p}");
        }
    }
    Ok(report.exit_code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
