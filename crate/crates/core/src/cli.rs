//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure (I/O, failed oracle, diverged
//! training), 2 usage or validation error, 3 infeasible assignment.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bubblefill::{fill_bubbles, AssignOptions, FilledSchedule};
use crate::config::{arch_from_arg, device_from_arg, resolve, ConfigSection, InputFile, Inputs, Overrides};
use crate::error::{Error, Result};
use crate::kfac::{train_toy, verify_all, ConvergenceFixture, Optimizer, ToyConfig};
use crate::perfmodel::{perf_report, run_sweep, sweep_csv, ArchSpec, DeviceSpec, SweepGrid};
use crate::schedule::{build_schedule, schedule_metrics};
use crate::trace::{emit_trace, TraceWindow};
use crate::types::Method;

#[derive(Debug, Parser)]
#[command(name = "kfac-pipe", version, about = "Pipeline schedule simulator with K-FAC work packed into bubbles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a pipeline schedule and print its makespan and utilization.
    Schedule(ScheduleArgs),
    /// Pack K-FAC work into the bubbles and report refresh period and staleness.
    Assign(AssignArgs),
    /// Evaluate the closed-form performance model at one point.
    Model(ModelArgs),
    /// Evaluate the performance model over a grid and write CSV.
    Sweep(SweepArgs),
    /// Numeric K-FAC checks and a toy training run.
    #[command(subcommand)]
    Kfac(KfacCommand),
}

#[derive(Debug, Args)]
struct PipelineArgs {
    /// TOML input file with [config], [costs], [comm], [arch] and [device] sections.
    #[arg(long, value_name = "PATH")]
    costs: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    /// Pipeline stages (D).
    #[arg(long)]
    depth: Option<usize>,
    /// Micro-batches per step (N_micro).
    #[arg(long)]
    micro: Option<usize>,
    #[arg(long)]
    micro_batch_size: Option<usize>,
    /// Stage replicas (W).
    #[arg(long)]
    replicas: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    recompute: bool,
    /// Architecture preset or file; derives costs analytically.
    #[arg(long, value_name = "NAME|PATH")]
    arch: Option<String>,
    /// Device preset or file.
    #[arg(long, value_name = "NAME|PATH")]
    device: Option<String>,
}

impl PipelineArgs {
    fn inputs(&self) -> Result<Inputs> {
        let file = match &self.costs {
            Some(p) => InputFile::load(p)?,
            None => InputFile::default(),
        };
        let over = Overrides {
            config: ConfigSection {
                method: self.method,
                depth: self.depth,
                micro_batches: self.micro,
                micro_batch_size: self.micro_batch_size,
                replicas: self.replicas,
                devices: None,
                layers_per_stage: self.layers,
                seq_len: self.seq_len,
                recompute: self.recompute.then_some(true),
            },
            arch: self.arch.as_deref().map(arch_from_arg).transpose()?,
            device: self.device.as_deref().map(device_from_arg).transpose()?,
        };
        resolve(&file, &over)
    }
}

impl clap::ValueEnum for Method {
    fn value_variants<'a>() -> &'a [Self] {
        &Method::ALL
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.name()))
    }
}

#[derive(Debug, Args)]
struct ScheduleArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Pipeline steps to unroll.
    #[arg(long, default_value_t = 1)]
    steps: usize,
    #[arg(long, value_name = "PATH")]
    trace: Option<PathBuf>,
    /// Write the metrics as JSON.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AssignArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Split inversion and preconditioning across stage replicas.
    #[arg(long)]
    inv_parallel: bool,
    #[arg(long, default_value_t = 10)]
    horizon_cap: usize,
    #[arg(long, value_name = "PATH")]
    trace: Option<PathBuf>,
    /// Only trace this device.
    #[arg(long, requires = "trace")]
    trace_device: Option<usize>,
    /// Only trace the first n steps.
    #[arg(long, requires = "trace")]
    trace_steps: Option<usize>,
    /// Write the refresh and staleness report as JSON.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Write the report as JSON.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Methods to include (default: all).
    #[arg(long, value_delimiter = ',')]
    method: Vec<Method>,
    /// Depths to include (default: 4,8,16,32).
    #[arg(long, value_delimiter = ',')]
    depth: Vec<usize>,
    /// Micro-batch sizes to include (default: 1,2,...,64).
    #[arg(long, value_delimiter = ',')]
    micro_batch_size: Vec<usize>,
    #[arg(long, value_name = "NAME|PATH", default_value = "bert-base")]
    arch: String,
    #[arg(long, value_name = "NAME|PATH")]
    device: Option<String>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    recompute: bool,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    /// CSV destination (default: stdout).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum KfacCommand {
    /// Run every numeric oracle comparison; exit 1 if any fails.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the ill-conditioned toy regression and print the trajectory summary.
    Demo(DemoArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DemoOptimizer {
    Kfac,
    Gd,
}

#[derive(Debug, Args)]
struct DemoArgs {
    #[arg(long, value_enum, default_value_t = DemoOptimizer::Kfac)]
    optimizer: DemoOptimizer,
    /// Step size (default 1e-3 for K-FAC, 1.9 for GD).
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 1e-3)]
    damping: f64,
    #[arg(long, default_value_t = 5)]
    refresh_period: usize,
    #[arg(long, default_value_t = ConvergenceFixture::MAX_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = ConvergenceFixture::TARGET_LOSS)]
    target_loss: f64,
    /// Write the trajectory as CSV.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Infeasible { .. } => 3,
        Error::Io(_) | Error::Diverged { .. } | Error::NotPositiveDefinite { .. } => 1,
        _ => 2,
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("reports always serialize");
    s.push('\n');
    write_file(path, &s)
}

fn header(out: &mut dyn Write, i: &Inputs) -> std::io::Result<()> {
    let c = &i.config;
    writeln!(
        out,
        "method: {}  D: {}  N_micro: {}  B_micro: {}  W: {}  devices: {}  layers/stage: {}{}",
        c.method,
        c.depth,
        c.micro_batches,
        c.micro_batch_size,
        c.replicas,
        c.devices,
        c.layers_per_stage,
        if c.recompute { "  recompute" } else { "" }
    )
}

fn cmd_schedule(a: &ScheduleArgs, out: &mut dyn Write) -> Result<()> {
    let i = a.pipeline.inputs()?;
    let s = build_schedule(&i.config, &i.costs, a.steps)?;
    let m = schedule_metrics(&s);
    header(out, &i)?;
    writeln!(out, "makespan: {}", m.makespan)?;
    writeln!(out, "period: {}", s.period)?;
    writeln!(out, "utilization: {:.3}", m.utilization)?;
    for (d, busy) in m.per_device_busy.iter().enumerate() {
        writeln!(out, "device {d}: busy {busy}, idle {}", m.makespan - busy)?;
    }
    if let Some(p) = &a.trace {
        let n = emit_trace(&s, &TraceWindow::all(), p)?;
        writeln!(out, "trace: {n} events -> {}", p.display())?;
    }
    if let Some(p) = &a.out {
        write_json(p, &m)?;
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct AssignReport<'a> {
    base_period: f64,
    period: f64,
    refresh_period: usize,
    stage_refresh_periods: &'a [usize],
    device_refresh_periods: &'a [usize],
    utilization_base: f64,
    utilization_filled: f64,
    staleness: &'a [crate::bubblefill::LayerStaleness],
}

fn assign_report(f: &FilledSchedule, base_utilization: f64) -> AssignReport<'_> {
    AssignReport {
        base_period: f.base_period,
        period: f.schedule.period,
        refresh_period: f.refresh_period,
        stage_refresh_periods: &f.stage_refresh_periods,
        device_refresh_periods: &f.device_refresh_periods,
        utilization_base: base_utilization,
        utilization_filled: f.utilization(),
        staleness: &f.staleness,
    }
}

fn cmd_assign(a: &AssignArgs, out: &mut dyn Write) -> Result<()> {
    let i = a.pipeline.inputs()?;
    let opts = AssignOptions {
        inversion_parallel: a.inv_parallel,
        horizon_cap: a.horizon_cap,
    };
    let f = fill_bubbles(&i.config, &i.costs, &opts)?;
    let base = schedule_metrics(&build_schedule(&i.config, &i.costs, 1)?).utilization;
    let r = assign_report(&f, base);
    header(out, &i)?;
    writeln!(out, "base_period: {}", r.base_period)?;
    writeln!(out, "period: {}", r.period)?;
    writeln!(out, "refresh_period: {}", r.refresh_period)?;
    writeln!(out, "stage_refresh_periods: {:?}", r.stage_refresh_periods)?;
    writeln!(out, "utilization: {:.3} -> {:.3}", r.utilization_base, r.utilization_filled)?;
    for s in r.staleness {
        writeln!(
            out,
            "stage {} layer {}: inverses ready in step {}, staleness {}",
            s.stage, s.layer, s.completed_step, s.staleness
        )?;
    }
    if let Some(p) = &a.trace {
        let mut w = TraceWindow::all();
        if let Some(d) = a.trace_device {
            w = w.device(d);
        }
        if let Some(n) = a.trace_steps {
            w = w.steps(0..n);
        }
        let n = emit_trace(&f.schedule, &w, p)?;
        writeln!(out, "trace: {n} events -> {}", p.display())?;
    }
    if let Some(p) = &a.out {
        write_json(p, &r)?;
    }
    Ok(())
}

fn cmd_model(a: &ModelArgs, out: &mut dyn Write) -> Result<()> {
    let i = a.pipeline.inputs()?;
    let r = perf_report(&i.config, &i.costs)?;
    header(out, &i)?;
    if let (Some(cf), Some(cb)) = (r.c_f, r.c_b) {
        writeln!(out, "critical path: C_f = {cf}, C_b = {cb}")?;
    }
    writeln!(out, "T_pipe: {} ms", r.t_pipe)?;
    writeln!(out, "T_bubble: {} ms", r.t_bubble)?;
    writeln!(out, "M_pipe: {} B", r.m_pipe)?;
    writeln!(out, "T_kfac_plus: {} ms", r.t_kfac_plus)?;
    writeln!(out, "M_kfac_plus: {} B", r.m_kfac_plus)?;
    writeln!(out, "utilization: {:.4}", r.utilization)?;
    writeln!(out, "throughput: {:.2} seq/s", r.throughput)?;
    writeln!(out, "ratio: {:.4}", r.ratio)?;
    writeln!(out, "refresh_period: {}", r.refresh_period)?;
    writeln!(out, "speedup_vs_skip: {:.4}", r.speedup_vs_skip)?;
    if let Some(p) = &a.out {
        write_json(p, &r)?;
    }
    Ok(())
}

fn cmd_sweep(a: &SweepArgs, out: &mut dyn Write) -> Result<()> {
    let mut grid = SweepGrid::bert_base();
    if !a.method.is_empty() {
        grid.methods = a.method.clone();
    }
    if !a.depth.is_empty() {
        grid.depths = a.depth.clone();
    }
    if !a.micro_batch_size.is_empty() {
        grid.micro_batch_sizes = a.micro_batch_size.clone();
    }
    let mut arch: ArchSpec = arch_from_arg(&a.arch)?;
    if let Some(s) = a.seq_len {
        arch = arch.with_seq_len(s);
    }
    grid.archs = vec![arch];
    grid.devices = vec![match &a.device {
        Some(d) => device_from_arg(d)?,
        None => DeviceSpec::default(),
    }];
    grid.recompute = vec![a.recompute];
    grid.layers_per_stage = a.layers;
    let csv = sweep_csv(&run_sweep(&grid));
    match &a.out {
        Some(p) => {
            write_file(p, &csv)?;
            writeln!(out, "{} rows -> {}", csv.lines().count() - 1, p.display())?;
        }
        None => out.write_all(csv.as_bytes())?,
    }
    Ok(())
}

fn cmd_verify(seed: u64, out: &mut dyn Write) -> Result<bool> {
    let checks = verify_all(seed)?;
    for c in &checks {
        writeln!(
            out,
            "{} {} (error {:.3e}, tolerance {:.0e})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.error,
            c.tolerance
        )?;
    }
    let ok = checks.iter().all(|c| c.passed);
    writeln!(out, "{} of {} checks passed", checks.iter().filter(|c| c.passed).count(), checks.len())?;
    Ok(ok)
}

fn cmd_demo(a: &DemoArgs, out: &mut dyn Write) -> Result<()> {
    let (optimizer, lr) = match a.optimizer {
        DemoOptimizer::Kfac => (
            Optimizer::Kfac {
                damping: a.damping,
                refresh_period: a.refresh_period,
            },
            a.lr.unwrap_or(1e-3),
        ),
        DemoOptimizer::Gd => (Optimizer::Gd, a.lr.unwrap_or(1.9)),
    };
    let mut cfg = ToyConfig::ill_conditioned_regression(optimizer, lr, a.steps);
    cfg.target_loss = Some(a.target_loss);
    let t = train_toy(&cfg)?;
    let last = t.points.last().map_or(f64::NAN, |p| p.loss);
    writeln!(out, "optimizer: {:?}  lr: {lr}", optimizer)?;
    writeln!(out, "initial loss: {:e}", t.points.first().map_or(f64::NAN, |p| p.loss))?;
    writeln!(out, "final loss: {last:e} after {} steps", t.points.len().saturating_sub(1))?;
    match t.steps_to(a.target_loss) {
        Some(s) => writeln!(out, "reached {:e} at step {s}", a.target_loss)?,
        None => writeln!(out, "did not reach {:e}", a.target_loss)?,
    }
    writeln!(out, "max staleness: {}, plain-gradient steps: {}", t.max_staleness, t.fallback_steps)?;
    if let Some(p) = &a.out {
        write_file(p, &t.to_csv())?;
    }
    Ok(())
}

/// Parses `argv` (program name first) and runs one subcommand.
pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    2
                }
            };
        }
    };
    let result = match &cli.command {
        Command::Schedule(a) => cmd_schedule(a, out),
        Command::Assign(a) => cmd_assign(a, out),
        Command::Model(a) => cmd_model(a, out),
        Command::Sweep(a) => cmd_sweep(a, out),
        Command::Kfac(KfacCommand::Verify { seed }) => match cmd_verify(*seed, out) {
            Ok(true) => Ok(()),
            Ok(false) => return 1,
            Err(e) => Err(e),
        },
        Command::Kfac(KfacCommand::Demo(a)) => cmd_demo(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            if let Error::Infeasible { unplaced, .. } = &e {
                for w in unplaced.iter().take(20) {
                    let _ = writeln!(err, "  unplaced: {} on device {}", w.label(), w.device);
                }
                if unplaced.len() > 20 {
                    let _ = writeln!(err, "  ... and {} more", unplaced.len() - 20);
                }
            }
            exit_code(&e)
        }
    }
}

/// Runs with the process arguments and standard streams.
pub fn run() -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}

