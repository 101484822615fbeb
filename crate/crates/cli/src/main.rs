//! Command-line experiment harness.
//!
//! Runs resilient-sort, resilient-merge and priority-queue workloads on
//! the faulty-RAM simulator under a chosen adversary, verifies every
//! trial against the hidden-tag oracle, and emits JSON or CSV reports.
//! Exit status is nonzero when any trial fails verification.

use std::fs;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use framkit::adversary::AdversarySpec;
use framkit::harness::{
    self, bench_sweep, emit_bench_csv, emit_csv, emit_json, parse_workload, Command, Format,
    RunConfig,
};

#[derive(Parser)]
#[command(name = "framkit", version, about = "Faulty-RAM resilient-algorithm harness")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Resiliently sort n random distinct keys.
    Sort(RunArgs),
    /// Resiliently merge two faithfully ordered halves of n keys.
    Merge(RunArgs),
    /// Run a mixed insert/deletemin workload of n operations.
    Pq(RunArgs),
    /// Sweep a grid of configurations and tabulate mean overhead.
    Bench(BenchArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Input size (sort/merge) or operation count (pq).
    #[arg(long, default_value_t = 1024)]
    n: usize,
    /// Safe-memory size S.
    #[arg(long, default_value_t = 16)]
    s: usize,
    /// Adversary corruption budget.
    #[arg(long, default_value_t = 0)]
    delta: u64,
    /// Adversary strategy: nofaults, random, inversion, bucket, pq,
    /// replay:file=PATH; parameters as name:k=v,...
    #[arg(long, default_value = "nofaults")]
    adversary: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    trials: usize,
    /// insert:deletemin ratio (pq only).
    #[arg(long, default_value = "2:1")]
    workload: String,
    /// Report format.
    #[arg(long, default_value = "json")]
    format: String,
    /// Report destination (standard output when absent).
    #[arg(long)]
    out: Option<String>,
    /// Export the corruption trace to this path (requires --trials 1).
    #[arg(long)]
    trace: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated input sizes.
    #[arg(long, default_value = "1024")]
    n: String,
    /// Comma-separated safe-memory sizes.
    #[arg(long, default_value = "4,64")]
    s: String,
    /// Comma-separated corruption budgets.
    #[arg(long, default_value = "0")]
    delta: String,
    #[arg(long, default_value = "nofaults")]
    adversary: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    trials: usize,
    #[arg(long, default_value = "2:1")]
    workload: String,
    /// Workload kind the sweep runs: sort, merge or pq.
    #[arg(long, default_value = "sort")]
    command: String,
    #[arg(long, default_value = "csv")]
    format: String,
    #[arg(long)]
    out: Option<String>,
}

fn parse_format(text: &str) -> Result<Format> {
    match text {
        "json" => Ok(Format::Json),
        "csv" => Ok(Format::Csv),
        other => bail!("unknown format `{other}` (want json or csv)"),
    }
}

fn parse_command(text: &str) -> Result<Command> {
    match text {
        "sort" => Ok(Command::Sort),
        "merge" => Ok(Command::Merge),
        "pq" => Ok(Command::Pq),
        other => bail!("unknown command `{other}`"),
    }
}

fn c_safe_from_env() -> Result<Option<usize>> {
    match std::env::var("FRAMKIT_CSAFE") {
        Ok(v) => Ok(Some(
            v.parse()
                .with_context(|| format!("FRAMKIT_CSAFE must be an integer, got `{v}`"))?,
        )),
        Err(_) => Ok(None),
    }
}

fn build_config(command: Command, args: &RunArgs) -> Result<RunConfig> {
    let mut adversary = AdversarySpec::parse(&args.adversary).map_err(anyhow::Error::msg)?;
    let mut config = RunConfig::new(command, args.n, args.s, args.delta);
    // The replay strategy reads its trace here so the core stays free of
    // file handling.
    if adversary.name == "replay" {
        let path = adversary
            .param("file")
            .context("replay adversary needs file=PATH")?
            .to_string();
        let text = fs::read_to_string(&path)
            .with_context(|| format!("cannot read replay trace {path}"))?;
        config.replay_trace = Some(framkit::fram::parse_trace(&text)?);
        adversary.params.retain(|(k, _)| k == "file");
    }
    config.adversary = adversary;
    config.seed = args.seed;
    config.trials = args.trials;
    config.workload = parse_workload(&args.workload).map_err(|e| anyhow::Error::msg(e.to_string()))?;
    config.format = parse_format(&args.format)?;
    config.out = args.out.clone();
    config.trace = args.trace.clone();
    config.c_safe = c_safe_from_env()?;
    Ok(config)
}

fn write_out(path: &Option<String>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("cannot write {p}"))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run_command(command: Command, args: &RunArgs) -> Result<bool> {
    let config = build_config(command, args)?;
    let output = harness::run(&config).map_err(|e| anyhow::Error::msg(e.to_string()))?;
    if let Some(trace_path) = &config.trace {
        let trace = output.traces.first().cloned().unwrap_or_default();
        fs::write(trace_path, trace)
            .with_context(|| format!("cannot write trace {trace_path}"))?;
    }
    let text = match config.format {
        Format::Json => emit_json(&output.report),
        Format::Csv => emit_csv(&output.report),
    };
    write_out(&config.out, &text)?;
    Ok(output.report.all_pass())
}

fn run_bench(args: &BenchArgs) -> Result<bool> {
    let command = parse_command(&args.command)?;
    let run_args = RunArgs {
        n: 0,
        s: 1,
        delta: 0,
        adversary: args.adversary.clone(),
        seed: args.seed,
        trials: args.trials,
        workload: args.workload.clone(),
        format: args.format.clone(),
        out: args.out.clone(),
        trace: None,
    };
    let base = build_config(command, &run_args)?;
    let ns = parse_list::<usize>(&args.n)?;
    let ss = parse_list::<usize>(&args.s)?;
    let deltas = parse_list::<u64>(&args.delta)?;
    let rows =
        bench_sweep(&base, &ns, &ss, &deltas).map_err(|e| anyhow::Error::msg(e.to_string()))?;
    let text = match parse_format(&args.format)? {
        Format::Csv => emit_bench_csv(&rows),
        Format::Json => serde_json_string(&rows)?,
    };
    write_out(&args.out, &text)?;
    Ok(rows.iter().all(|r| r.all_pass))
}

fn serde_json_string(rows: &[harness::BenchRow]) -> Result<String> {
    Ok(framkit::harness::bench_rows_json(rows))
}

fn parse_list<T: std::str::FromStr>(text: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse::<T>()
                .map_err(|e| anyhow::anyhow!("bad list entry `{t}`: {e}"))
        })
        .collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Cmd::Sort(args) => run_command(Command::Sort, args),
        Cmd::Merge(args) => run_command(Command::Merge, args),
        Cmd::Pq(args) => run_command(Command::Pq, args),
        Cmd::Bench(args) => run_bench(args),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("framkit: one or more trials failed verification");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("framkit: {e:#}");
            ExitCode::from(2)
        }
    }
}
