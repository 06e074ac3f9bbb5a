use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use csr_core::cost::{calibrate_kappa, CalibrationFixture};
use csr_core::sim::{
    feasibility_map, run_live, run_scenario, sweep_latency, trace_stats, FeasibilityGrid, Mode, Policy, ScenarioConfig,
    StatsOptions, TraceEvent, TraceEventKind, TraceStats, TtftTrace,
};
use csr_core::{HardwareProfile, WallClock};
use csr_live::{LiveBackend, LiveConfig, Upstream};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "csr", version, about = "Prefix-stable context scheduling: simulation, sweeps and live runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario on the simulated backend.
    Simulate(SimulateArgs),
    /// Latency grid over static lengths N and dynamic lengths M, as CSV.
    Sweep(SweepArgs),
    /// Analytic vs simulated reconciliation feasibility over a grid, as CSV.
    Feasibility(FeasibilityArgs),
    /// Fit κ to measured latencies.
    Calibrate(CalibrateArgs),
    /// Run a scenario against two OpenAI-compatible completion servers.
    Live(LiveArgs),
}

#[derive(Args)]
struct ProfileArgs {
    /// Seconds per summation unit; overrides the profile.
    #[arg(long, conflicts_with = "fixture")]
    kappa: Option<f64>,
    /// Calibration fixture to fit κ from.
    #[arg(long)]
    fixture: Option<PathBuf>,
}

impl ProfileArgs {
    fn apply(&self, profile: HardwareProfile) -> Result<HardwareProfile> {
        if let Some(k) = self.kappa {
            return Ok(profile.rescaled(k));
        }
        if let Some(path) = &self.fixture {
            let cal = calibrate_kappa(&read_fixture(path)?.anchors)?;
            return Ok(profile.rescaled(cal.kappa));
        }
        Ok(profile)
    }
}

#[derive(Args)]
struct OutputArgs {
    /// Trace as JSON lines, one sample per line; `-` for stdout.
    #[arg(long, default_value = "-")]
    trace: PathBuf,
    /// Trace events (evictions, background prefills, swaps) as JSON lines.
    #[arg(long)]
    events: Option<PathBuf>,
    /// Summary statistics as JSON; written to stderr when omitted.
    #[arg(long)]
    stats: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario JSON; omitted fields take their defaults.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Overrides the scenario's policy (csr_asr, csr_asr_scheduler, csr_sync_evict, unordered_baseline).
    #[arg(long, value_parser = parse_policy)]
    policy: Option<Policy>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    profile: ProfileArgs,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// Static lengths, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [30_000usize, 60_000, 90_000, 120_000])]
    n: Vec<usize>,
    /// Dynamic lengths, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 1_024, 2_048, 4_096, 8_192])]
    m: Vec<usize>,
    #[command(flatten)]
    profile: ProfileArgs,
    /// CSV destination; `-` for stdout.
    #[arg(long, default_value = "-")]
    out: PathBuf,
}

#[derive(Args)]
struct FeasibilityArgs {
    /// Grid JSON with any of `epsilons`, `token_rates`, `n_maxes`,
    /// `total_lens`, `chunk_tokens`, `n_catchup`.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[command(flatten)]
    profile: ProfileArgs,
    /// CSV destination; `-` for stdout.
    #[arg(long, default_value = "-")]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Fixture JSON: `{"anchors": [{"seq_len", "i_star_mode", "static_len"?, "measured_seconds"}]}`.
    fixture: PathBuf,
}

#[derive(Args)]
struct LiveArgs {
    /// Base URL of the server acting as R1.
    #[arg(long)]
    r1: String,
    /// Base URL of the server acting as R2.
    #[arg(long)]
    r2: String,
    #[arg(long)]
    model: String,
    /// Model name on R2 when it differs from R1.
    #[arg(long)]
    model_r2: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long, default_value = "OPENAI_API_KEY")]
    api_key_env: String,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 120.0)]
    timeout: f64,
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, value_parser = parse_policy)]
    policy: Option<Policy>,
    #[command(flatten)]
    out: OutputArgs,
}

fn parse_policy(s: &str) -> Result<Policy, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
        format!("unknown policy {s:?}; expected csr_asr, csr_asr_scheduler, csr_sync_evict or unordered_baseline")
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_fixture(path: &Path) -> Result<CalibrationFixture> {
    read_json(path)
}

fn load_scenario(path: Option<&Path>) -> Result<ScenarioConfig> {
    match path {
        Some(p) => read_json(p),
        None => Ok(ScenarioConfig::default()),
    }
}

fn writer(path: &Path) -> Result<Box<dyn Write>> {
    if path == Path::new("-") {
        Ok(Box::new(BufWriter::new(io::stdout().lock())))
    } else {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Box::new(BufWriter::new(f)))
    }
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = writer(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct RunReport<'a> {
    policy: Policy,
    evictions: usize,
    swaps: usize,
    overflow: Option<&'a TraceEvent>,
    stats: Option<TraceStats>,
}

fn emit(trace: &TtftTrace, policy: Policy, out: &OutputArgs) -> Result<()> {
    write_lines(&out.trace, &trace.samples)?;
    if let Some(p) = &out.events {
        write_lines(p, &trace.events)?;
    }
    let count = |kind| trace.events.iter().filter(|e| e.kind == kind).count();
    let report = RunReport {
        policy,
        evictions: count(TraceEventKind::Eviction),
        swaps: count(TraceEventKind::Swap),
        overflow: trace.overflow.as_ref(),
        stats: trace_stats(trace, &StatsOptions::default()).ok(),
    };
    let json = serde_json::to_string_pretty(&report)?;
    match &out.stats {
        Some(p) => std::fs::write(p, json + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => eprintln!("{json}"),
    }
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let mut cfg = load_scenario(args.scenario.as_deref())?;
    if let Some(p) = args.policy {
        cfg.policy = p;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.profile = args.profile.apply(cfg.profile)?;
    if cfg.mode == Mode::Live {
        bail!("scenario is in live mode; use `csr live`");
    }
    let trace = run_scenario(&cfg)?;
    emit(&trace, cfg.policy, &args.out)
}

fn sweep(args: SweepArgs) -> Result<()> {
    let profile = args.profile.apply(HardwareProfile::default())?;
    let table = sweep_latency(&args.n, &args.m, &profile)?;
    let mut w = writer(&args.out)?;
    w.write_all(table.to_csv().as_bytes())?;
    w.flush()?;
    Ok(())
}

fn feasibility(args: FeasibilityArgs) -> Result<()> {
    let grid: FeasibilityGrid = match &args.grid {
        Some(p) => read_json(p)?,
        None => FeasibilityGrid::default(),
    };
    let profile = args.profile.apply(HardwareProfile::default())?;
    let map = feasibility_map(&grid, &profile)?;
    let mut w = writer(&args.out)?;
    w.write_all(map.to_csv().as_bytes())?;
    w.flush()?;
    eprintln!("{}", serde_json::to_string(&map.summary)?);
    Ok(())
}

fn calibrate(args: CalibrateArgs) -> Result<()> {
    let fixture = read_fixture(&args.fixture)?;
    let cal = calibrate_kappa(&fixture.anchors)?;
    let mut w = writer(Path::new("-"))?;
    serde_json::to_writer_pretty(&mut w, &cal)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn live(args: LiveArgs) -> Result<()> {
    let mut cfg = load_scenario(args.scenario.as_deref())?;
    if let Some(p) = args.policy {
        cfg.policy = p;
    }
    cfg.mode = Mode::Live;
    let r2_model = args.model_r2.unwrap_or_else(|| args.model.clone());
    let mut live_cfg = LiveConfig::new(Upstream::new(args.r1, args.model), Upstream::new(args.r2, r2_model));
    live_cfg.api_key_env = Some(args.api_key_env);
    live_cfg.timeout_seconds = args.timeout;
    let clock = Arc::new(WallClock::new());
    let backend = LiveBackend::new(&live_cfg, clock.clone());
    let trace = run_live(&cfg, &backend, clock)?;
    emit(&trace, cfg.policy, &args.out)
}

fn broken_pipe(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<io::Error>().map(io::Error::kind) == Some(io::ErrorKind::BrokenPipe)
            || e.downcast_ref::<serde_json::Error>().and_then(serde_json::Error::io_error_kind) == Some(io::ErrorKind::BrokenPipe)
    })
}

fn main() -> Result<()> {
    let result = match Cli::parse().command {
        Command::Simulate(a) => simulate(a),
        Command::Sweep(a) => sweep(a),
        Command::Feasibility(a) => feasibility(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Live(a) => live(a),
    };
    match result {
        Err(e) if broken_pipe(&e) => Ok(()),
        other => other,
    }
}
