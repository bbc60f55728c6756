//! `preft`: benchmark runs, invariant checks, paired statistics and workload
//! dumps. Exit codes: 0 success, 1 check failure, 2 usage or config error.

macro_rules! outln {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($t)*);
    }};
}

macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout().lock(), $($t)*);
    }};
}

mod config;
mod verify;

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use preft_core::engine::{build_catalogue, write_trace, RunOutput};
use preft_core::stats::{cmh_test, discordant_counts, mean, parse_diffs, parse_pairs, wilcoxon_signed_rank};
use preft_core::workload::{generate_workload, write_workload_csv};
use preft_core::{AdapterSetup, Engine, EngineMode, Error, PositionSchedule, RngSeed, ZeroPolicy};
use serde::Serialize;

use config::RunConfig;
use verify::Suite;

#[derive(Parser)]
#[command(name = "preft", version, about = "Prefill-only adapter serving simulator and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run warmup plus a timed FCFS run (or a sweep) and write reports.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the workload seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; overrides `out` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Run an invariant suite and print per-check values.
    Verify {
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Paired significance test on a text table.
    Stats {
        /// One difference per line (wilcoxon) or `stratum item treatment control` rows (cmh).
        input: PathBuf,
        #[arg(long, value_enum, default_value = "wilcoxon")]
        test: TestKind,
        #[arg(long, value_enum, default_value = "drop")]
        zero_policy: Policy,
    },
    /// Dump the request stream as CSV.
    Workload {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Functional,
    Cost,
}

#[derive(Clone, Copy, ValueEnum)]
enum TestKind {
    Wilcoxon,
    Cmh,
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Drop,
    Pratt,
}

enum Failure {
    Usage(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Empty(_) | Error::Degenerate(_) | Error::Domain(_) => Failure::Usage(e.to_string()),
            _ => Failure::Check(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Check(e.to_string())
    }
}

type CmdResult = Result<bool, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Bench { config, seed, out, mode } => bench(config.as_deref(), seed, out, mode),
        Command::Verify { suite, seed } => run_verify(suite, RngSeed(seed)),
        Command::Stats { input, test, zero_policy } => stats(&input, test, zero_policy),
        Command::Workload { config, seed, out } => workload(config.as_deref(), seed, out.as_deref()),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>, mode: Option<Mode>) -> Result<RunConfig, Failure> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.workload.seed = s;
    }
    match mode {
        Some(Mode::Functional) => cfg.engine.mode = EngineMode::Functional,
        Some(Mode::Cost) => cfg.engine.mode = EngineMode::Cost,
        None => {}
    }
    cfg.validate().map_err(|e| match path {
        Some(p) => Failure::Usage(format!("{}: {e}", p.display())),
        None => e.into(),
    })?;
    Ok(cfg)
}

fn build_engine(cfg: &RunConfig, setup: Option<AdapterSetup>) -> Result<Engine, Error> {
    let hw = cfg.hardware()?;
    match cfg.engine.mode {
        EngineMode::Cost => Engine::cost_simulated(cfg.engine.clone(), setup, cfg.shape()?, hw),
        EngineMode::Functional => {
            let model = cfg.toy_model()?;
            let catalogue = match &setup {
                Some(s) => build_catalogue(&model, s, RngSeed(cfg.workload.seed).derive("catalogue"))?,
                None => Vec::new(),
            };
            Engine::functional(cfg.engine.clone(), setup, model, catalogue, hw)
        }
    }
}

fn bench(path: Option<&Path>, seed: Option<u64>, out: Option<PathBuf>, mode: Option<Mode>) -> CmdResult {
    let cfg = load_config(path, seed, mode)?;
    let dir = out.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("preft-out"));
    fs::create_dir_all(&dir)?;
    if cfg.sweep.is_some() {
        return sweep(&cfg, &dir);
    }
    let mut engine = build_engine(&cfg, cfg.adapters)?;
    let run = engine.run(&cfg.workload_config())?;
    fs::write(dir.join("report.toml"), run.report.to_toml()?)?;
    fs::write(dir.join("report.txt"), summary_text(&cfg, &run))?;
    if cfg.engine.record_trace {
        let mut w = BufWriter::new(File::create(dir.join("trace.jsonl"))?);
        write_trace(&run.trace, &mut w)?;
        w.flush()?;
    }
    out!("{}", summary_text(&cfg, &run));
    outln!("reports written to {}", dir.display());
    Ok(true)
}

fn summary_text(cfg: &RunConfig, run: &RunOutput) -> String {
    let mut s = String::new();
    let adapters = match &cfg.adapters {
        Some(a) => format!("{} r={} {} x{}", a.kind, a.rank, a.schedule, a.count),
        None => "none".to_string(),
    };
    let _ = writeln!(s, "mode {}  adapters {adapters}  mix {}", cfg.engine.mode, cfg.workload.mix);
    s.push_str(&run.report.render_table());
    let _ = writeln!(s, "steps {}  emitted {}  loads {}  evictions {}", run.steps.len(), run.emitted_tokens, run.loads, run.evictions);
    s
}

#[derive(Serialize)]
struct SweepRow {
    schedule: String,
    adapters: usize,
    throughput: f64,
    decode_p50: f64,
    decode_p99: f64,
    loads: u64,
    evictions: u64,
}

#[derive(Serialize)]
struct SweepReport {
    kind: String,
    rank: usize,
    max_active_adapters: usize,
    runs: Vec<SweepRow>,
}

fn sweep(cfg: &RunConfig, dir: &Path) -> CmdResult {
    let (Some(sweep), Some(base)) = (&cfg.sweep, cfg.adapters) else {
        return Err(Failure::Usage("sweep needs [sweep] and [adapters]".into()));
    };
    let mut runs = Vec::new();
    let mut one = |label: String, setup: Option<AdapterSetup>, n: usize| -> Result<(), Failure> {
        let mut c = cfg.clone();
        c.engine.record_trace = false;
        c.workload.n_adapters = Some(n);
        let run = build_engine(&c, setup)?.run(&c.workload_config())?;
        outln!("{label:>14} {n:>5} adapters  {:>10.1} tok/s", run.report.throughput);
        runs.push(SweepRow {
            schedule: label,
            adapters: n,
            throughput: run.report.throughput,
            decode_p50: run.report.decode_per_token.p50,
            decode_p99: run.report.decode_per_token.p99,
            loads: run.loads,
            evictions: run.evictions,
        });
        Ok(())
    };
    if sweep.baseline {
        one("baseline".into(), None, 1)?;
    }
    for schedule in &sweep.schedules {
        for n in &sweep.counts {
            one(schedule.to_string(), Some(AdapterSetup { schedule: *schedule, count: *n, ..base }), *n)?;
        }
    }
    let report = SweepReport { kind: base.kind.to_string(), rank: base.rank, max_active_adapters: cfg.engine.max_active_adapters, runs };
    fs::write(dir.join("sweep.toml"), toml::to_string(&report).map_err(|e| Failure::Check(e.to_string()))?)?;
    let mut text = format!("{} r={} M={}\n", report.kind, report.rank, report.max_active_adapters);
    let _ = writeln!(text, "{:>14} {:>8} {:>12} {:>12} {:>12}", "schedule", "adapters", "tok/s", "decode p50", "decode p99");
    for r in &report.runs {
        let _ = writeln!(text, "{:>14} {:>8} {:>12.1} {:>12.3e} {:>12.3e}", r.schedule, r.adapters, r.throughput, r.decode_p50, r.decode_p99);
    }
    for n in &sweep.counts {
        let tp = |s: PositionSchedule| report.runs.iter().find(|r| r.adapters == *n && r.schedule == s.to_string()).map(|r| r.throughput);
        if let (Some(p), Some(a)) = (tp(PositionSchedule::PrefillOnly), tp(PositionSchedule::AllPositions)) {
            let _ = writeln!(text, "prefill_only / all_positions at {n:>4} adapters: {:.3}", p / a);
        }
    }
    fs::write(dir.join("sweep.txt"), &text)?;
    out!("{text}");
    outln!("reports written to {}", dir.display());
    Ok(true)
}

fn run_verify(suite: Suite, seed: RngSeed) -> CmdResult {
    let checks = verify::run(suite, seed)?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    for c in &checks {
        outln!("{} {:<32} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    outln!("{} checks, {failed} failed", checks.len());
    Ok(failed == 0)
}

fn stats(input: &Path, test: TestKind, policy: Policy) -> CmdResult {
    let text = fs::read_to_string(input).map_err(|e| Failure::Usage(format!("{}: {e}", input.display())))?;
    let at = |e: Error| -> Failure {
        match Failure::from(e) {
            Failure::Usage(m) => Failure::Usage(format!("{}: {m}", input.display())),
            other => other,
        }
    };
    match test {
        TestKind::Wilcoxon => {
            let diffs = parse_diffs(&text).map_err(at)?;
            let policy = match policy {
                Policy::Drop => ZeroPolicy::Drop,
                Policy::Pratt => ZeroPolicy::Pratt,
            };
            let r = wilcoxon_signed_rank(&diffs, policy).map_err(at)?;
            outln!("n {}  zeros {}  mean {:.4}", diffs.len(), r.zeros, mean(&diffs).map_err(at)?);
            outln!("W+ {}  W- {}  W {}", r.w_plus, r.w_minus, r.statistic);
            outln!("p {:.6} ({})", r.p_value, r.method);
        }
        TestKind::Cmh => {
            let strata = discordant_counts(&parse_pairs(&text).map_err(at)?);
            for (name, d) in &strata {
                outln!("stratum {name}: b {} c {}", d.b, d.c);
            }
            let counts: Vec<_> = strata.into_iter().map(|(_, d)| d).collect();
            let r = cmh_test(&counts).map_err(at)?;
            outln!("chi2 {:.6}  p {:.6}", r.statistic, r.p_value);
        }
    }
    Ok(true)
}

fn workload(path: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> CmdResult {
    let cfg = load_config(path, seed, None)?;
    let specs = generate_workload(&cfg.workload_config())?;
    match out {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            write_workload_csv(&specs, &mut w)?;
            w.flush()?;
        }
        None => write_workload_csv(&specs, &mut io::stdout().lock())?,
    }
    Ok(true)
}
