//! Experiment harness: deterministic trial execution, verification
//! verdicts, report emission and corruption-trace replay.
//!
//! A run executes `trials` independent simulations, each seeded as
//! `mix(seed, trial)`, verifies every output through the hidden-tag
//! oracle, and aggregates counters. Reports are deterministic: two runs
//! of the same config produce byte-identical JSON and CSV.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::AdversarySpec;
use crate::fram::{RunMetrics, Sim, SimConfig, TraceRecord};
use crate::pq::{Pq, PqError};
use crate::sort::{s_merge, s_sort, MergeObserver};
use crate::verify::{self, merge_contract_check, InputSnapshot, PqReferenceModel, PurifyCall, Verdict};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Sort,
    Merge,
    Pq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Command,
    /// Input size for sort/merge; operation count for pq.
    pub n: usize,
    pub s: usize,
    pub delta: u64,
    pub adversary: AdversarySpec,
    pub seed: u64,
    pub trials: usize,
    /// insert:deletemin ratio for pq workloads.
    pub workload: (u32, u32),
    pub format: Format,
    pub out: Option<String>,
    pub trace: Option<String>,
    /// Safe-capacity multiplier override (FRAMKIT_CSAFE).
    pub c_safe: Option<usize>,
    /// How often the pq workload re-checks the structure invariants
    /// (every k-th operation; 0 disables).
    #[serde(default = "default_stride")]
    pub check_stride: usize,
    /// Resolved replay records when the adversary is `replay`.
    #[serde(skip)]
    pub replay_trace: Option<Vec<TraceRecord>>,
}

fn default_stride() -> usize {
    1
}

impl RunConfig {
    pub fn new(command: Command, n: usize, s: usize, delta: u64) -> RunConfig {
        RunConfig {
            command,
            n,
            s,
            delta,
            adversary: AdversarySpec::nofaults(),
            seed: 0,
            trials: 1,
            workload: (2, 1),
            format: Format::Json,
            out: None,
            trace: None,
            c_safe: None,
            check_stride: 1,
            replay_trace: None,
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.s < 1 {
            return Err(ConfigError::Invalid("--s must be at least 1".into()));
        }
        if self.trials < 1 {
            return Err(ConfigError::Invalid("--trials must be at least 1".into()));
        }
        if self.workload.0 == 0 && self.workload.1 == 0 {
            return Err(ConfigError::Invalid("workload ratio cannot be 0:0".into()));
        }
        if self.trace.is_some() && self.trials != 1 {
            return Err(ConfigError::Invalid("--trace requires --trials 1".into()));
        }
        if self.adversary.name == "replay" && self.trials != 1 {
            return Err(ConfigError::Invalid("replay requires --trials 1".into()));
        }
        Ok(())
    }

    fn sim_config(&self) -> SimConfig {
        let mut cfg = SimConfig::new(self.s, self.delta);
        if let Some(c) = self.c_safe {
            cfg = cfg.with_c_safe(c);
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    pub seed: u64,
    pub metrics: RunMetrics,
    pub verdict: String,
    pub failures: Vec<String>,
    pub flagged: bool,
    /// comparisons minus the NoFaults baseline on identical inputs.
    pub overhead_comparisons: i64,
    pub corrupted_returns: u64,
    pub empty_deletemins: u64,
}

impl TrialReport {
    pub fn pass(&self) -> bool {
        self.verdict == "PASS"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub trials: usize,
    pub passes: usize,
    pub mean_comparisons: f64,
    pub max_comparisons: u64,
    pub mean_overhead: f64,
    pub total_alpha: u64,
    pub total_restarts: u64,
    pub max_safe_high_water: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub trials: Vec<TrialReport>,
    pub aggregate: Aggregate,
}

impl RunReport {
    pub fn all_pass(&self) -> bool {
        self.trials.iter().all(|t| t.pass())
    }
}

/// Run output: the report plus any captured corruption traces (one per
/// trial when tracing is on).
pub struct RunOutput {
    pub report: RunReport,
    pub traces: Vec<String>,
}

/// Per-trial seed derivation (splitmix over the run seed and index).
pub fn mix_seed(seed: u64, trial: usize) -> u64 {
    let mut z = seed ^ (trial as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic distinct keys in pseudorandom order.
pub fn gen_distinct_keys(n: usize, seed: u64) -> Vec<i64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v: i64 = rng.random_range(-(1i64 << 40)..(1i64 << 40));
        if seen.insert(v) {
            out.push(v);
        }
    }
    out
}

/// Execute a full run: `trials` deterministic trials, each verified.
pub fn run(config: &RunConfig) -> Result<RunOutput, ConfigError> {
    config.validate()?;
    let mut trials = Vec::with_capacity(config.trials);
    let mut traces = Vec::new();
    for i in 0..config.trials {
        let trial_seed = mix_seed(config.seed, i);
        let (report, trace) = run_trial(config, i, trial_seed)?;
        trials.push(report);
        if config.trace.is_some() {
            traces.push(trace);
        }
    }
    let aggregate = aggregate(&trials);
    Ok(RunOutput {
        report: RunReport {
            config: config.clone(),
            trials,
            aggregate,
        },
        traces,
    })
}

fn aggregate(trials: &[TrialReport]) -> Aggregate {
    let n = trials.len().max(1) as f64;
    Aggregate {
        trials: trials.len(),
        passes: trials.iter().filter(|t| t.pass()).count(),
        mean_comparisons: trials
            .iter()
            .map(|t| t.metrics.comparisons as f64)
            .sum::<f64>()
            / n,
        max_comparisons: trials
            .iter()
            .map(|t| t.metrics.comparisons)
            .max()
            .unwrap_or(0),
        mean_overhead: trials
            .iter()
            .map(|t| t.overhead_comparisons as f64)
            .sum::<f64>()
            / n,
        total_alpha: trials.iter().map(|t| t.metrics.alpha_used).sum(),
        total_restarts: trials.iter().map(|t| t.metrics.restarts).sum(),
        max_safe_high_water: trials
            .iter()
            .map(|t| t.metrics.safe_high_water)
            .max()
            .unwrap_or(0),
    }
}

fn install(config: &RunConfig, sim: &mut Sim, trial_seed: u64) -> Result<(), ConfigError> {
    if config.adversary.name == "replay" {
        let records = config
            .replay_trace
            .clone()
            .ok_or_else(|| ConfigError::Invalid("replay trace not loaded".into()))?;
        sim.install_adversary(Box::new(crate::adversary::Replay::new(records)));
        return Ok(());
    }
    if let Some(adv) = config
        .adversary
        .build(trial_seed)
        .map_err(ConfigError::Invalid)?
    {
        sim.install_adversary(adv);
    }
    Ok(())
}

fn run_trial(
    config: &RunConfig,
    trial: usize,
    trial_seed: u64,
) -> Result<(TrialReport, String), ConfigError> {
    let started = std::time::Instant::now();
    let (mut metrics, failures, corrupted_returns, empty_deletemins, flagged, trace) =
        execute(config, trial_seed, false)?;
    // Overhead baseline: identical inputs, no adversary.
    let overhead = if config.adversary.name == "nofaults" || config.adversary.name == "none" {
        0
    } else {
        let (base, _, _, _, _, _) = execute(config, trial_seed, true)?;
        metrics.comparisons as i64 - base.comparisons as i64
    };
    metrics.wall_time = started.elapsed();
    let verdict = if failures.is_empty() { "PASS" } else { "FAIL" };
    Ok((
        TrialReport {
            trial,
            seed: trial_seed,
            metrics,
            verdict: verdict.to_string(),
            failures,
            flagged,
            overhead_comparisons: overhead,
            corrupted_returns,
            empty_deletemins,
        },
        trace,
    ))
}

type ExecOut = (RunMetrics, Vec<String>, u64, u64, bool, String);

fn execute(config: &RunConfig, trial_seed: u64, baseline: bool) -> Result<ExecOut, ConfigError> {
    let mut sim = Sim::new(config.sim_config());
    if !baseline {
        install(config, &mut sim, trial_seed)?;
    }
    let mut failures: Vec<String> = Vec::new();
    let mut corrupted_returns = 0u64;
    let mut empty_deletemins = 0u64;
    match config.command {
        Command::Sort => {
            let values = gen_distinct_keys(config.n, trial_seed);
            let (input, snapshot) = verify::load_input(&mut sim, &values)
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            let mut obs = ContractObserver {
                snapshot: &snapshot,
                failures: &mut failures,
            };
            match s_sort(&mut sim, input, Some(&mut obs)) {
                Ok(out) => {
                    verify_sorted_output(&sim, input, out, &snapshot, &mut failures);
                }
                Err(e) => failures.push(e.to_string()),
            }
            check_sort_bounds(&sim, &mut failures);
        }
        Command::Merge => {
            let mut values = gen_distinct_keys(config.n, trial_seed);
            values.sort_unstable();
            let x_vals: Vec<i64> = values.iter().copied().step_by(2).collect();
            let y_vals: Vec<i64> = values.iter().copied().skip(1).step_by(2).collect();
            let all: Vec<i64> = x_vals.iter().chain(y_vals.iter()).copied().collect();
            let (input, snapshot) = verify::load_input(&mut sim, &all)
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            let x = input.slice(0, x_vals.len());
            let y = input.slice(x_vals.len(), y_vals.len());
            let dst = sim
                .alloc(crate::fram::Space::Faulty, config.n)
                .expect("faulty space");
            let mut obs = ContractObserver {
                snapshot: &snapshot,
                failures: &mut failures,
            };
            match s_merge(&mut sim, x, y, dst, Some(&mut obs)) {
                Ok(()) => {
                    if !verify::assert_faithfully_ordered(&sim, dst) {
                        failures.push("output not faithfully ordered".into());
                    }
                }
                Err(e) => failures.push(e.to_string()),
            }
            check_sort_bounds(&sim, &mut failures);
        }
        Command::Pq => {
            let (cr, ed) = run_pq_workload(config, &mut sim, trial_seed, &mut failures);
            corrupted_returns = cr;
            empty_deletemins = ed;
        }
    }
    if sim.safe_high_water() > 16 * sim.s_eff() + 64 {
        failures.push(format!(
            "safe high water {} exceeds 16*S_eff+64 = {}",
            sim.safe_high_water(),
            16 * sim.s_eff() + 64
        ));
    }
    let flagged = sim.violation().is_some();
    if flagged {
        failures.push(format!(
            "adversary contract violation: {}",
            sim.violation().unwrap()
        ));
    }
    let trace = sim.export_trace();
    Ok((
        sim.metrics(),
        failures,
        corrupted_returns,
        empty_deletemins,
        flagged,
        trace,
    ))
}

struct ContractObserver<'a> {
    snapshot: &'a InputSnapshot,
    failures: &'a mut Vec<String>,
}

impl MergeObserver for ContractObserver<'_> {
    fn on_purify(&mut self, sim: &Sim, call: &PurifyCall) {
        let report = merge_contract_check(sim, call, self.snapshot);
        self.failures.extend(report.failures);
    }
}

fn verify_sorted_output(
    sim: &Sim,
    input: crate::fram::Region,
    out: crate::fram::Region,
    snapshot: &InputSnapshot,
    failures: &mut Vec<String>,
) {
    if out.len() != input.len() {
        failures.push(format!(
            "output length {} differs from input {}",
            out.len(),
            input.len()
        ));
    }
    if !verify::assert_faithfully_ordered(sim, out) {
        failures.push("output not faithfully ordered".into());
    }
    let live = verify::origin_multiset(sim, out);
    let want: Vec<u32> = (0..snapshot.len() as u32).collect();
    if live != want {
        failures.push("origin multiset not preserved".into());
    }
}

fn check_sort_bounds(sim: &Sim, failures: &mut Vec<String>) {
    let m = sim.metrics();
    let bound = 2 * m.alpha_used / sim.s_eff() as u64;
    if m.restarts > bound {
        failures.push(format!(
            "restarts {} exceed floor(2*alpha/S_eff) = {bound} (alpha = {})",
            m.restarts, m.alpha_used
        ));
    }
}

fn run_pq_workload(
    config: &RunConfig,
    sim: &mut Sim,
    trial_seed: u64,
    failures: &mut Vec<String>,
) -> (u64, u64) {
    let ops = config.n;
    let (ins_w, del_w) = config.workload;
    let period = (ins_w + del_w).max(1);
    let values = gen_distinct_keys(ops, mix_seed(trial_seed, 0xFEED));
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(trial_seed, 0xD1CE));
    let mut pq = Pq::new(sim);
    let mut model = PqReferenceModel::new();
    let mut next_value = 0usize;
    let mut empty_deletemins = 0u64;
    for step in 0..ops {
        let pick = rng.random_range(0..period);
        let insert = pick < ins_w || pq.is_empty();
        if insert && next_value < values.len() {
            let v = values[next_value];
            next_value += 1;
            let origin = pq.insert(sim, v);
            model.oracle_insert(origin, v);
        } else {
            match pq.delete_min_traced(sim) {
                Ok(kw) => {
                    model.absorb_corruptions(sim);
                    match model.oracle_check_deletemin(
                        kw.value,
                        verify::is_faithful(&kw),
                        verify::origin_of(&kw),
                    ) {
                        Ok(Verdict::Pass) => {}
                        Ok(Verdict::Fail) => failures.push(format!(
                            "step {step}: deletemin returned {} above the faithful minimum",
                            kw.value
                        )),
                        Err(e) => failures.push(format!("step {step}: oracle desync: {e}")),
                    }
                }
                Err(PqError::EmptyQueue) => {
                    empty_deletemins += 1;
                    if !model.is_empty() {
                        failures.push(format!(
                            "step {step}: queue empty but model holds {} keys",
                            model.len()
                        ));
                    }
                }
                Err(e) => failures.push(format!("step {step}: {e}")),
            }
        }
        if config.check_stride > 0 && step % config.check_stride == 0 {
            let violations = pq.check_invariants(sim);
            if !violations.is_empty() {
                failures.push(format!("step {step}: {}", violations.join("; ")));
                break;
            }
        }
    }
    if pq.len() != model.len() {
        failures.push(format!(
            "conservation: queue holds {} keys, model {}",
            pq.len(),
            model.len()
        ));
    }
    (model.corrupted_returns, empty_deletemins)
}

/// One bench-sweep row: a full run for one grid cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    pub s: usize,
    pub delta: u64,
    pub adversary: String,
    pub trials: usize,
    pub mean_comparisons: f64,
    pub mean_overhead: f64,
    pub total_alpha: u64,
    pub total_restarts: u64,
    pub all_pass: bool,
}

/// Cross-product sweep: mean overhead versus S for fixed (n, delta,
/// adversary).
pub fn bench_sweep(
    base: &RunConfig,
    ns: &[usize],
    ss: &[usize],
    deltas: &[u64],
) -> Result<Vec<BenchRow>, ConfigError> {
    let mut rows = Vec::new();
    for &n in ns {
        for &s in ss {
            for &delta in deltas {
                let mut config = base.clone();
                config.n = n;
                config.s = s;
                config.delta = delta;
                config.trace = None;
                let out = run(&config)?;
                rows.push(BenchRow {
                    n,
                    s,
                    delta,
                    adversary: config.adversary.display(),
                    trials: config.trials,
                    mean_comparisons: out.report.aggregate.mean_comparisons,
                    mean_overhead: out.report.aggregate.mean_overhead,
                    total_alpha: out.report.aggregate.total_alpha,
                    total_restarts: out.report.aggregate.total_restarts,
                    all_pass: out.report.all_pass(),
                });
            }
        }
    }
    Ok(rows)
}

pub fn emit_json(report: &RunReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

pub fn parse_json(text: &str) -> Result<RunReport, serde_json::Error> {
    serde_json::from_str(text)
}

const CSV_HEADER: &str = "command,n,s,delta,adversary,seed,trial,trial_seed,comparisons,faulty_reads,faulty_writes,safe_reads,safe_writes,rounds,restarts,binary_searches,pq_pushes,pq_pulls,rebuilds,alpha_used,safe_high_water,flagged,overhead,corrupted_returns,empty_deletemins,verdict";

pub fn emit_csv(report: &RunReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    let c = &report.config;
    let cmd = match c.command {
        Command::Sort => "sort",
        Command::Merge => "merge",
        Command::Pq => "pq",
    };
    for t in &report.trials {
        let m = &t.metrics;
        out.push_str(&format!(
            "{cmd},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            c.n,
            c.s,
            c.delta,
            c.adversary.display(),
            c.seed,
            t.trial,
            t.seed,
            m.comparisons,
            m.faulty_reads,
            m.faulty_writes,
            m.safe_reads,
            m.safe_writes,
            m.rounds,
            m.restarts,
            m.binary_searches,
            m.pq_pushes,
            m.pq_pulls,
            m.rebuilds,
            m.alpha_used,
            m.safe_high_water,
            t.flagged,
            t.overhead_comparisons,
            t.corrupted_returns,
            t.empty_deletemins,
            t.verdict,
        ));
    }
    out
}

pub fn bench_rows_json(rows: &[BenchRow]) -> String {
    serde_json::to_string_pretty(rows).expect("rows serialize")
}

pub fn emit_bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(
        "n,s,delta,adversary,trials,mean_comparisons,mean_overhead,total_alpha,total_restarts,all_pass\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.n,
            r.s,
            r.delta,
            r.adversary,
            r.trials,
            r.mean_comparisons,
            r.mean_overhead,
            r.total_alpha,
            r.total_restarts,
            r.all_pass
        ));
    }
    out
}

/// Parse an `insert:delete` workload ratio.
pub fn parse_workload(text: &str) -> Result<(u32, u32), ConfigError> {
    let (a, b) = text
        .split_once(':')
        .ok_or_else(|| ConfigError::Invalid(format!("bad workload `{text}`, want INS:DEL")))?;
    let a = a
        .trim()
        .parse()
        .map_err(|e| ConfigError::Invalid(format!("bad workload: {e}")))?;
    let b = b
        .trim()
        .parse()
        .map_err(|e| ConfigError::Invalid(format!("bad workload: {e}")))?;
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sort_n_zero_passes() {
        let config = RunConfig::new(Command::Sort, 0, 4, 0);
        let out = run(&config).unwrap();
        assert!(out.report.all_pass());
    }

    #[test]
    fn reports_are_deterministic() {
        let mut config = RunConfig::new(Command::Sort, 1024, 4, 0);
        config.trials = 3;
        config.seed = 7;
        let a = emit_json(&run(&config).unwrap().report);
        let b = emit_json(&run(&config).unwrap().report);
        assert_eq!(a, b);
        let ca = emit_csv(&run(&config).unwrap().report);
        let cb = emit_csv(&run(&config).unwrap().report);
        assert_eq!(ca, cb);
    }

    #[test]
    fn json_round_trip() {
        let mut config = RunConfig::new(Command::Pq, 64, 4, 4);
        config.adversary = AdversarySpec::parse("random:p=0.01").unwrap();
        config.trials = 2;
        let report = run(&config).unwrap().report;
        let parsed = parse_json(&emit_json(&report)).unwrap();
        assert_eq!(parsed, report);
    }

    #[test]
    fn csv_has_one_line_per_trial_plus_header() {
        let mut config = RunConfig::new(Command::Sort, 16, 4, 0);
        config.trials = 2;
        let report = run(&config).unwrap().report;
        let csv = emit_csv(&report);
        assert_eq!(csv.trim_end().lines().count(), 3);
        let empty = RunReport {
            config: config.clone(),
            trials: Vec::new(),
            aggregate: aggregate(&[]),
        };
        assert_eq!(emit_csv(&empty).trim_end().lines().count(), 1);
    }

    #[test]
    fn sort_trials_pass_under_attack() {
        let mut config = RunConfig::new(Command::Sort, 256, 4, 16);
        config.adversary = AdversarySpec::parse("inversion:p=0.5").unwrap();
        config.trials = 5;
        config.seed = 11;
        let out = run(&config).unwrap();
        assert!(
            out.report.all_pass(),
            "{:?}",
            out.report
                .trials
                .iter()
                .map(|t| &t.failures)
                .collect::<Vec<_>>()
        );
        assert!(out.report.aggregate.total_alpha > 0);
    }

    #[test]
    fn pq_trials_pass_under_attack() {
        let mut config = RunConfig::new(Command::Pq, 1500, 4, 32);
        config.adversary = AdversarySpec::parse("pq:p=0.01").unwrap();
        config.trials = 3;
        config.seed = 5;
        let out = run(&config).unwrap();
        assert!(
            out.report.all_pass(),
            "{:?}",
            out.report
                .trials
                .iter()
                .map(|t| &t.failures)
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn overhead_zero_for_delta_zero() {
        let mut config = RunConfig::new(Command::Sort, 128, 4, 0);
        config.adversary = AdversarySpec::parse("inversion").unwrap();
        let out = run(&config).unwrap();
        for t in &out.report.trials {
            assert_eq!(t.overhead_comparisons, 0);
        }
    }

    #[test]
    fn replay_reproduces_metrics() {
        let mut config = RunConfig::new(Command::Sort, 200, 4, 8);
        config.adversary = AdversarySpec::parse("random:p=0.01").unwrap();
        config.trace = Some("capture".into());
        let out = run(&config).unwrap();
        let metrics = out.report.trials[0].metrics.clone();
        let trace = out.traces[0].clone();
        assert!(!trace.is_empty());

        let mut replay_config = config.clone();
        replay_config.adversary = AdversarySpec::parse("replay").unwrap();
        replay_config.replay_trace = Some(crate::fram::parse_trace(&trace).unwrap());
        replay_config.trace = Some("capture".into());
        let replayed = run(&replay_config).unwrap();
        assert_eq!(replayed.report.trials[0].metrics, metrics);
        assert_eq!(replayed.traces[0], trace);
    }

    #[test]
    fn workload_parse() {
        assert_eq!(parse_workload("2:1").unwrap(), (2, 1));
        assert!(parse_workload("nope").is_err());
    }
}
