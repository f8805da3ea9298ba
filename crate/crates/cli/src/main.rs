//! `ccfluid`: run the fluid model from the command line.
//!
//! Reports go to stdout as JSON and into `--out`, series go to `--out` as
//! CSV, and every run leaves a `<subcommand>.manifest.json` next to them.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{debug, info};
use serde::Serialize;
use serde_json::{json, Value};

use ccfluid::dynamics::{simulate, AdaptationPolicy, IntegratorSettings, FREEZE_HISTORY, FREEZE_KAPPA};
use ccfluid::equilibrium::{build_update_functions_with, solve_short_term_with};
use ccfluid::model::SystemState;
use ccfluid::oscillation::fairness_bounds;
use ccfluid::stability::{instability_condition_with, linearize, sweep, SweepAxis};
use ccfluid::{Error, NetworkConfig};

const DEFAULT_SWEEP_STEPS: usize = 20;

#[derive(Parser)]
#[command(name = "ccfluid", version, about = "Fluid model of BBR competing with CUBIC at a drop-tail bottleneck")]
#[command(after_help = "Units: rates in segments/s unless marked Mbps, times in seconds, \
    windows and queues in segments. Set CCFLUID_LOG=info|debug for progress output.")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Network config (JSON). Defaults to the built-in 100 Mbps / 40 ms / 1.5 BDP setup.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Directory for every file this run writes.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Seed for randomized probe timing.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// How BBR updates its minimum-RTT estimate and which strength rule it uses.
    #[arg(long, global = true, value_enum, default_value_t = PolicyName::Vanilla)]
    policy: PolicyName,

    /// Smoothing weight for --policy smoothed, in (0, 1] (dimensionless).
    #[arg(long, global = true, default_value_t = 1.0 / 6.0)]
    theta: f64,

    /// Freeze threshold for --policy detect-freeze, as a relative spread (dimensionless).
    #[arg(long, global = true, default_value_t = FREEZE_KAPPA)]
    kappa: f64,

    /// Probe history length for --policy detect-freeze (probes).
    #[arg(long, global = true, default_value_t = FREEZE_HISTORY)]
    history: usize,

    /// Probing-gain multiplier for --policy bbrv3, >= 1 (dimensionless).
    #[arg(long, global = true, default_value_t = 1.25)]
    gain: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyName {
    Vanilla,
    Smoothed,
    Randomized,
    DetectFreeze,
    Bbrv2,
    Bbrv3,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the full system with periodic RTT probes and write the trace.
    Simulate(SimulateArgs),
    /// Short-term equilibrium at a fixed probing strength, or the long-term window fixed point.
    Equilibrium(EquilibriumArgs),
    /// Instability verdicts over a two-parameter grid.
    Sweep(SweepArgs),
    /// Worst-case and non-pessimal bounds on BBR's throughput share.
    Bounds,
    /// Jacobian, eigenvalues and center-manifold coefficient at a short-term equilibrium.
    Linearize(LinearizeArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulated time (s).
    #[arg(long, default_value_t = 120.0)]
    horizon: f64,

    /// Grid step (s). Defaults to min(1 ms, path_prop_delay/40).
    #[arg(long)]
    dt: Option<f64>,

    /// Keep every n-th grid point in the trace (grid points). Defaults to one sample per 100 ms.
    #[arg(long)]
    decimate: Option<usize>,

    /// Also write the samples as JSON lines.
    #[arg(long)]
    jsonl: bool,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct EquilibriumArgs {
    /// Probing strength held fixed (dimensionless).
    #[arg(long)]
    alpha: Option<f64>,

    /// Solve for the long-term fixed point w̄ (segments) instead.
    #[arg(long)]
    long_term: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// First axis as name:lo:hi[:steps]. Names: capacity (Mbps), path_prop_delay (s),
    /// buffer_bdp_multiple (BDPs), btl_delay_fraction (fraction of path delay).
    #[arg(long, value_name = "RANGE")]
    x: String,

    /// Second axis, same format as --x.
    #[arg(long, value_name = "RANGE")]
    y: String,

    /// Grid points per axis when a range omits them.
    #[arg(long, default_value_t = DEFAULT_SWEEP_STEPS)]
    steps: usize,
}

#[derive(Args)]
struct LinearizeArgs {
    /// Probing strength (dimensionless). Defaults to α←(w̄), the strength at the long-term fixed point.
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    subcommand: &'a str,
    config: Value,
    seed: u64,
    policy: Value,
    outputs: Vec<String>,
    tool_version: &'static str,
    wall_clock_secs: f64,
}

/// Exit code 2 for rejected input, 3 for numerical failure.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(err) if err.is_config() => 2,
        Some(_) => 3,
        None => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CCFLUID_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn policy(common: &Common) -> AdaptationPolicy {
    match common.policy {
        PolicyName::Vanilla => AdaptationPolicy::Vanilla,
        PolicyName::Smoothed => AdaptationPolicy::Smoothed { theta: common.theta },
        PolicyName::Randomized => AdaptationPolicy::Randomized { seed: common.seed },
        PolicyName::DetectFreeze => AdaptationPolicy::DetectFreeze { kappa: common.kappa, history_len: common.history },
        PolicyName::Bbrv2 => AdaptationPolicy::Bbrv2,
        PolicyName::Bbrv3 => AdaptationPolicy::Bbrv3 { gain: common.gain },
    }
}

fn load_config(path: Option<&Path>) -> Result<NetworkConfig, Error> {
    let cfg = match path {
        Some(p) => NetworkConfig::load_json(p)?,
        None => NetworkConfig::default_dumbbell(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Collects output paths so the manifest can list them.
struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::Io(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Outputs { dir: dir.to_path_buf(), written: Vec::new() })
    }

    fn create(&mut self, name: &str) -> anyhow::Result<BufWriter<File>> {
        let path = self.dir.join(name);
        let f = File::create(&path).map_err(|e| Error::Io(format!("cannot create {}: {e}", path.display())))?;
        self.written.push(path.display().to_string());
        Ok(BufWriter::new(f))
    }

    fn json(&mut self, name: &str, value: &Value) -> anyhow::Result<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let start = Instant::now();
    let common = &cli.common;
    let cfg = load_config(common.config.as_deref())?;
    let pol = policy(common);
    pol.validate()?;
    debug!("config {cfg:?}, policy {pol:?}");
    let mut out = Outputs::new(&common.out)?;

    let name = match &cli.command {
        Command::Simulate(args) => {
            cmd_simulate(&cfg, pol, common.seed, args, &mut out)?;
            "simulate"
        }
        Command::Equilibrium(args) => {
            cmd_equilibrium(&cfg, pol, args, &mut out)?;
            "equilibrium"
        }
        Command::Sweep(args) => {
            cmd_sweep(&cfg, pol, args, &mut out)?;
            "sweep"
        }
        Command::Bounds => {
            let fb = fairness_bounds(&cfg)?;
            emit(&mut out, "bounds.json", serde_json::to_value(fb)?)?;
            "bounds"
        }
        Command::Linearize(args) => {
            cmd_linearize(&cfg, pol, args, &mut out)?;
            "linearize"
        }
    };

    let manifest = RunManifest {
        subcommand: name,
        config: cfg.to_json_value(),
        seed: common.seed,
        policy: serde_json::to_value(pol)?,
        outputs: out.written.clone(),
        tool_version: env!("CARGO_PKG_VERSION"),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    let path = common.out.join(format!("{name}.manifest.json"));
    let mut w = BufWriter::new(File::create(&path)?);
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    writeln!(w)?;
    w.flush()?;
    info!("{name} finished in {:.2} s, manifest {}", manifest.wall_clock_secs, path.display());
    Ok(())
}

/// Print a report and keep a copy in the output directory.
fn emit(out: &mut Outputs, file: &str, report: Value) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(&report)?);
    out.json(file, &report)
}

fn cmd_simulate(
    cfg: &NetworkConfig,
    pol: AdaptationPolicy,
    seed: u64,
    args: &SimulateArgs,
    out: &mut Outputs,
) -> anyhow::Result<()> {
    let mut settings = IntegratorSettings::for_config(cfg).with_horizon(args.horizon);
    if let Some(dt) = args.dt {
        settings.dt = dt;
        settings.decimation = ((0.1 / dt).round() as usize).max(1);
    }
    if let Some(n) = args.decimate {
        settings.decimation = n;
    }
    settings.validate(cfg)?;
    info!("simulating {} s at dt = {} s with policy {}", settings.horizon, settings.dt, pol.name());
    let init = SystemState::initial(cfg, settings.probe_period);
    let trace = simulate(cfg, pol, settings, init, seed)?;

    let mut w = out.create("trace.csv")?;
    trace.write_csv(&mut w)?;
    w.flush()?;
    let mut w = out.create("probes.csv")?;
    trace.write_probes_csv(&mut w)?;
    w.flush()?;
    if args.jsonl {
        let mut w = out.create("trace.jsonl")?;
        trace.write_jsonl(&mut w)?;
        w.flush()?;
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "samples": trace.samples.len(),
            "probes": trace.probes.len(),
            "dt": settings.dt,
            "horizon": settings.horizon,
        }))?
    );
    Ok(())
}

fn cmd_equilibrium(
    cfg: &NetworkConfig,
    pol: AdaptationPolicy,
    args: &EquilibriumArgs,
    out: &mut Outputs,
) -> anyhow::Result<()> {
    let rule = pol.strength_rule();
    let report = if let Some(alpha) = args.alpha {
        let eq = solve_short_term_with(alpha, cfg, rule)?;
        let mut v = serde_json::to_value(eq)?;
        v["loss"] = json!(eq.loss(cfg));
        v["cubic_rate"] = json!(eq.cubic_rate(cfg));
        v
    } else {
        let uf = build_update_functions_with(cfg, rule)?;
        let w_bar = uf.long_term_equilibrium()?;
        let residual = (w_bar - uf.window_update(w_bar)?).abs() / w_bar;
        let mut v = serde_json::to_value(uf)?;
        v["w_bar"] = json!(w_bar);
        v["alpha_at_w_bar"] = json!(uf.alpha_update(w_bar));
        v["residual"] = json!(residual);
        v
    };
    emit(out, "equilibrium.json", report)
}

/// `name:lo:hi` gets `default_steps` appended.
fn parse_axis(s: &str, default_steps: usize) -> Result<SweepAxis, Error> {
    if s.split(':').count() == 3 {
        format!("{s}:{default_steps}").parse()
    } else {
        s.parse()
    }
}

fn cmd_sweep(cfg: &NetworkConfig, pol: AdaptationPolicy, args: &SweepArgs, out: &mut Outputs) -> anyhow::Result<()> {
    let x = parse_axis(&args.x, args.steps)?;
    let y = parse_axis(&args.y, args.steps)?;
    info!("sweeping {} x {} = {} cells", x.steps, y.steps, x.steps * y.steps);
    let grid = sweep(cfg, x, y, pol.strength_rule())?;
    let mut w = out.create("sweep.csv")?;
    grid.write_csv(&mut w)?;
    w.flush()?;
    let unstable = grid.cells.iter().filter(|c| c.unstable()).count();
    let failed = grid.cells.iter().filter(|c| c.error.is_some()).count();
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "cells": grid.cells.len(),
            "unstable": unstable,
            "failed": failed,
        }))?
    );
    Ok(())
}

fn cmd_linearize(
    cfg: &NetworkConfig,
    pol: AdaptationPolicy,
    args: &LinearizeArgs,
    out: &mut Outputs,
) -> anyhow::Result<()> {
    let rule = pol.strength_rule();
    let alpha = match args.alpha {
        Some(a) => a,
        None => {
            let uf = build_update_functions_with(cfg, rule)?;
            uf.alpha_update(uf.long_term_equilibrium()?)
        }
    };
    let eq = solve_short_term_with(alpha, cfg, rule)?;
    let rep = linearize(&eq, cfg)?;
    let verdict = instability_condition_with(cfg, rule)?;
    let mut v = serde_json::to_value(&rep)?;
    v["long_term"] = serde_json::to_value(verdict)?;
    emit(out, "linearize.json", v)
}
