use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use minipic::instrument::{
    read_trace, trace_summary, working_set_report, Breakdown, CommReport, IoReport,
    WorkingSetReport, DEFAULT_LLC_MIB,
};
use minipic::sim::{
    write_reports, BREAKDOWN_FILE, COMM_FILE, IO_FILE, TRACE_FILE, WORKING_SET_FILE,
};
use minipic::{load_config, run, Error, RunOptions, ScenarioConfig};

mod plot;

const AFTER_HELP: &str = "\
Output files (all under --out):
  breakdown.csv    phase,percent,cpu_ns,wall_ns,calls            (--profile)
  comm.csv         rank,mpi_ns,wait_ns,call_ns,sends,recvs,bytes_sent,bytes_received,group
  io.csv           scope,kind,files,bytes,write_ns,window_ns,mib_per_s
  working_set.csv  ranks,bytes_per_rank,threshold_bytes,fits
  scaling.csv      ranks,wall_time_s,speedup,efficiency,bytes_per_rank,fits_llc   (scale)
  trace.txt        '# minipic-trace v1' then t_ns<TAB>rank<TAB>kind<TAB>detail  (--trace)
  prof_r<rank>_s<step>.dat, dist_r<rank>_s<step>.dat, coll_r<rank>_s<step>.dat, ckpt_r<rank>_s<step>.dmp

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.";

#[derive(Parser)]
#[command(name = "minipic", version, about = "1D3V particle-in-cell / Monte Carlo runs with built-in performance instrumentation", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its reports.
    Run(RunArgs),
    /// Run the same scenario at several rank counts.
    Scale(ScaleArgs),
    /// Re-render the report tables of a finished run from its CSV files.
    Report {
        /// Output directory of a previous `run`.
        run_dir: PathBuf,
    },
    /// Summarize a trace file: per-rank wait fraction and message counts.
    TraceSummary {
        /// A trace.txt written by `run --trace`.
        trace: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// Scenario file (INI).
    config: PathBuf,
    /// Override the number of time steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Output directory [default: ./out/<unix seconds>].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seconds a rank may block on one message before the run is declared
    /// deadlocked.
    #[arg(long, default_value_t = 60)]
    timeout: u64,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Override the number of ranks.
    #[arg(long)]
    ranks: Option<usize>,
    /// Record per-phase times and write breakdown.csv.
    #[arg(long)]
    profile: bool,
    /// Record an event trace and write trace.txt.
    #[arg(long)]
    trace: bool,
    /// Resume from the checkpoints in this directory.
    #[arg(long)]
    restart: Option<PathBuf>,
    /// Checkpoint step to resume from [default: latest].
    #[arg(long, requires = "restart")]
    restart_step: Option<u64>,
    /// Stretch one rank's compute phases, as RANK:FACTOR (e.g. 0:2).
    #[arg(long, value_parser = parse_slowdown)]
    slowdown: Option<(usize, f64)>,
}

#[derive(Args)]
struct ScaleArgs {
    #[command(flatten)]
    common: Common,
    /// Rank counts to run, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    ranks_list: Vec<usize>,
    /// Runs per rank count; the fastest is kept.
    #[arg(long, default_value_t = 1)]
    repeats: u32,
}

fn parse_slowdown(s: &str) -> Result<(usize, f64), String> {
    let (r, f) = s
        .split_once(':')
        .ok_or_else(|| format!("expected RANK:FACTOR, got '{s}'"))?;
    let rank = r.parse().map_err(|_| format!("bad rank '{r}'"))?;
    let factor: f64 = f.parse().map_err(|_| format!("bad factor '{f}'"))?;
    if !(factor >= 1.0) {
        return Err(format!("factor must be >= 1, got {factor}"));
    }
    Ok((rank, factor))
}

fn default_out() -> PathBuf {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    Path::new("out").join(secs.to_string())
}

fn load(common: &Common) -> anyhow::Result<ScenarioConfig> {
    let mut config = load_config(&common.config).map_err(ConfigError)?;
    if let Some(steps) = common.steps {
        config.n_steps = steps;
    }
    Ok(config)
}

fn cmd_run(args: RunArgs) -> anyhow::Result<()> {
    let mut config = load(&args.common)?;
    if let Some(r) = args.ranks {
        config.n_ranks = r;
    }
    config.validate().map_err(ConfigError)?;
    let out = args.common.out.clone().unwrap_or_else(default_out);
    let opts = RunOptions {
        profile: args.profile,
        trace: args.trace,
        out_dir: Some(out.clone()),
        restart_dir: args.restart,
        restart_step: args.restart_step,
        slowdown: args.slowdown,
        timeout: Duration::from_secs(args.common.timeout),
        keep_state: false,
    };
    let report = run(&config, &opts)?;
    let tables = write_reports(&report, &config, &out)?;
    println!(
        "ran steps {}..{} on {} ranks in {:.3} s; {} particles at end",
        report.first_step,
        report.last_step,
        report.n_ranks,
        report.wall_ns as f64 * 1e-9,
        report.total_particles()
    );
    println!("\n{tables}");
    println!("outputs in {}", out.display());
    Ok(())
}

#[derive(Debug, Clone, serde::Serialize)]
struct ScaleRow {
    ranks: usize,
    wall_time_s: f64,
    speedup: f64,
    efficiency: f64,
    bytes_per_rank: u64,
    fits_llc: bool,
}

/// Rewritten after every leg so an interrupted sweep keeps its finished rows.
fn write_scaling(path: &Path, rows: &[ScaleRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_scale(args: ScaleArgs) -> anyhow::Result<()> {
    let base = load(&args.common)?;
    let out = args.common.out.clone().unwrap_or_else(default_out);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut legs = Vec::new();
    for &ranks in &args.ranks_list {
        let mut c = base.clone();
        c.n_ranks = ranks;
        c.validate().map_err(ConfigError)?;
        legs.push(c);
    }
    let ws = working_set_report(&base, &args.ranks_list, DEFAULT_LLC_MIB);
    ws.write_csv(&out.join(WORKING_SET_FILE))?;
    let opts = RunOptions {
        timeout: Duration::from_secs(args.common.timeout),
        ..RunOptions::default()
    };
    let mut rows: Vec<ScaleRow> = Vec::new();
    for (config, ws_row) in legs.iter().zip(&ws.rows) {
        let mut best = f64::INFINITY;
        for _ in 0..args.repeats.max(1) {
            let report = run(config, &opts)
                .with_context(|| format!("scaling leg with {} ranks failed", config.n_ranks))?;
            best = best.min(report.wall_ns as f64 * 1e-9);
        }
        let (r0, t0) = rows
            .first()
            .map_or((config.n_ranks, best), |r| (r.ranks, r.wall_time_s));
        let speedup = t0 / best * r0 as f64;
        rows.push(ScaleRow {
            ranks: config.n_ranks,
            wall_time_s: best,
            speedup,
            efficiency: speedup / config.n_ranks as f64,
            bytes_per_rank: ws_row.bytes_per_rank,
            fits_llc: ws_row.fits,
        });
        write_scaling(&out.join("scaling.csv"), &rows)?;
        println!(
            "{:>4} ranks  {:>10.3} s  speedup {:>6.2}  efficiency {:>5.2}",
            config.n_ranks, best, speedup, speedup / config.n_ranks as f64
        );
    }
    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.ranks as f64, r.wall_time_s)).collect();
    let svg = plot::line_plot(&points, "ranks", "wall time (s)", "Strong scaling");
    std::fs::write(out.join("scaling.svg"), svg).context("writing scaling.svg")?;
    println!("\n{}", ws.to_table());
    println!("outputs in {}", out.display());
    Ok(())
}

fn cmd_report(dir: &Path) -> anyhow::Result<()> {
    let required = [COMM_FILE, IO_FILE, WORKING_SET_FILE];
    let missing: Vec<&str> = required
        .iter()
        .copied()
        .filter(|f| !dir.join(f).is_file())
        .collect();
    if !missing.is_empty() {
        bail!(
            "{} is missing run artifacts: {} (expected {}, plus {} when profiled)",
            dir.display(),
            missing.join(", "),
            required.join(", "),
            BREAKDOWN_FILE
        );
    }
    let mut text = String::new();
    let breakdown = dir.join(BREAKDOWN_FILE);
    if breakdown.is_file() {
        text.push_str(&format!("phase breakdown\n{}\n", Breakdown::read_csv(&breakdown)?.to_table()));
    }
    text.push_str(&format!("communication\n{}\n", CommReport::read_csv(&dir.join(COMM_FILE))?.to_table()));
    text.push_str(&format!("I/O\n{}\n", IoReport::read_csv(&dir.join(IO_FILE))?.to_table()));
    text.push_str(&format!(
        "working set\n{}",
        WorkingSetReport::read_csv(&dir.join(WORKING_SET_FILE))?.to_table()
    ));
    let path = dir.join("report.txt");
    std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
    print!("{text}");
    Ok(())
}

fn cmd_trace_summary(path: &Path) -> anyhow::Result<()> {
    let events = read_trace(path)?;
    let s = trace_summary(&events);
    print!("{}", s.to_table());
    println!("total wait: {:.3} ms", s.total_wait_ns() as f64 / 1e6);
    if path.file_name().is_some_and(|n| n == TRACE_FILE) {
        if let Some(dir) = path.parent() {
            let comm = dir.join(COMM_FILE);
            if comm.is_file() {
                let c = CommReport::read_csv(&comm)?;
                let total: u64 = c.rows.iter().map(|r| r.wait_ns).sum();
                println!("comm report wait: {:.3} ms", total as f64 / 1e6);
            }
        }
    }
    Ok(())
}

/// A scenario file that cannot be read or parsed.
#[derive(Debug)]
struct ConfigError(Error);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl std::error::Error for ConfigError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_user_error() => 2,
        _ => 1,
    }
}

/// Error chain on one line. Library errors already quote their source, so
/// links repeated by the previous message are skipped.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut prev = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !prev.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
        prev = msg;
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Scale(a) => cmd_scale(a),
        Command::Report { run_dir } => cmd_report(&run_dir),
        Command::TraceSummary { trace } => cmd_trace_summary(&trace),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
