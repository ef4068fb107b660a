//! `mixsim` command-line interface.
//!
//! Subcommands: `gen-trace`, `simulate`, `sweep`, `report`. Every subcommand
//! is deterministic given its config and seed. Exit codes: 0 success,
//! 2 configuration/usage error, 3 validation error, 4 invariant violation.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{anyhow, Result};
use clap::{Args, Parser, Subcommand};
use mixsim_core::engine::{run, Report, SimError};
use mixsim_core::workload::generate_trace;

use mixsim::config::ExperimentConfig;
use mixsim::report::{
    pretty_summary, read_report_file, summary_line, sweep_csv_header, sweep_csv_row,
    write_report_file,
};
use mixsim::tracefile::{read_trace_file, write_trace_file};

const EXIT_CONFIG: i32 = 2;
const EXIT_VALIDATION: i32 = 3;
const EXIT_INVARIANT: i32 = 4;

struct CliError {
    code: i32,
    source: anyhow::Error,
}

type CliResult<T = ()> = Result<T, CliError>;

trait IntoCli<T> {
    fn code(self, code: i32) -> CliResult<T>;
}

impl<T> IntoCli<T> for Result<T> {
    fn code(self, code: i32) -> CliResult<T> {
        self.map_err(|source| CliError { code, source })
    }
}

fn sim_error(e: SimError) -> CliError {
    let code = match &e {
        SimError::Internal(_) => EXIT_INVARIANT,
        _ => EXIT_VALIDATION,
    };
    CliError {
        code,
        source: anyhow!("{e}"),
    }
}

#[derive(Parser)]
#[command(name = "mixsim", version, about = "Trace-driven simulator for mixed-precision MoE expert serving")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by config-driven subcommands. Precedence is
/// flag > config file > built-in default; the config file defaults to
/// `$MIXSIM_CONFIG` when `-c` is omitted.
#[derive(Args)]
struct Common {
    /// Experiment config file (TOML).
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Print the fully resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args, Default, Clone)]
struct Overrides {
    /// Workload and report seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Zipf skew exponent (0 = uniform).
    #[arg(long)]
    zipf_s: Option<f64>,
    /// Cross-layer coupling strength in [0, 1].
    #[arg(long)]
    coupling: Option<f64>,
    /// Tokens between hot-set rotations (0 disables drift).
    #[arg(long)]
    drift_period: Option<u64>,
    /// Fraction of the hot set replaced per rotation.
    #[arg(long)]
    drift_rotation: Option<f64>,
    #[arg(long)]
    prefill_tokens: Option<u64>,
    #[arg(long)]
    decode_tokens: Option<u64>,
    /// Force the per-layer high-precision population.
    #[arg(long)]
    n_hot: Option<u32>,
    /// Correlation-prefetch fan-out (0 disables prefetch).
    #[arg(long)]
    prefetch_fanout: Option<u32>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(v) = self.seed {
            cfg.workload.seed = v;
            cfg.sim.seed = v;
        }
        if let Some(v) = self.zipf_s {
            cfg.workload.zipf_s = v;
        }
        if let Some(v) = self.coupling {
            cfg.workload.coupling = v;
        }
        if let Some(v) = self.drift_period {
            cfg.workload.drift_period = v;
        }
        if let Some(v) = self.drift_rotation {
            cfg.workload.drift_rotation = v;
        }
        if let Some(v) = self.prefill_tokens {
            cfg.workload.prefill_tokens = v;
        }
        if let Some(v) = self.decode_tokens {
            cfg.workload.decode_tokens = v;
        }
        if let Some(v) = self.n_hot {
            cfg.budget.n_hot_override = Some(v);
        }
        if let Some(v) = self.prefetch_fanout {
            cfg.sim.prefetch_fanout = v;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic routing trace.
    GenTrace {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: Overrides,
        /// Output trace path (default from [output] trace).
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run one simulation over a trace and write a JSON report.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: Overrides,
        /// Input trace file.
        #[arg(short, long)]
        trace: PathBuf,
        /// Output report path (default from [output] report).
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Also write per-period hotness snapshots as CSV
        /// (step,layer,expert,score).
        #[arg(long, value_name = "CSV")]
        dump_hotness: Option<PathBuf>,
    },
    /// Run one simulation per grid point; write reports and a summary CSV.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: Overrides,
        /// Input trace file.
        #[arg(short, long)]
        trace: PathBuf,
        /// Grid spec, e.g. `n_hot=0,16,32,64`.
        #[arg(long)]
        grid: String,
        /// Output directory (default from [output] dir).
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Maximum concurrent grid points.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Summarize an existing JSON report.
    Report {
        /// Report file to summarize.
        path: PathBuf,
        /// Re-emit the full JSON document instead of a summary.
        #[arg(long)]
        json: bool,
    },
}

fn load_config(common: &Common, overrides: &Overrides) -> CliResult<ExperimentConfig> {
    let path = common
        .config
        .clone()
        .or_else(|| std::env::var_os("MIXSIM_CONFIG").map(PathBuf::from));
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(&p).code(EXIT_CONFIG)?,
        None => ExperimentConfig::default(),
    };
    overrides.apply(&mut cfg);
    Ok(cfg)
}

fn cmd_gen_trace(common: Common, overrides: Overrides, output: Option<PathBuf>) -> CliResult {
    let cfg = load_config(&common, &overrides)?;
    if common.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let model = cfg.model_config();
    let spec = cfg.workload_spec();
    let trace = generate_trace(&model, &spec)
        .map_err(|e| anyhow!("invalid workload spec: {e}"))
        .code(EXIT_VALIDATION)?;
    let out = output.unwrap_or_else(|| PathBuf::from(&cfg.output.trace));
    write_trace_file(&trace, &out).code(EXIT_CONFIG)?;
    println!(
        "wrote {}: tokens={} layers={} k={} seed={}",
        out.display(),
        spec.total_tokens(),
        model.num_layers,
        model.experts_active_per_token,
        spec.seed
    );
    Ok(())
}

fn run_once(cfg: &ExperimentConfig, trace_path: &Path) -> CliResult<Report> {
    let trace = read_trace_file(trace_path).code(EXIT_VALIDATION)?;
    run(&cfg.sim_config(), &trace).map_err(sim_error)
}

fn cmd_simulate(
    common: Common,
    overrides: Overrides,
    trace: PathBuf,
    output: Option<PathBuf>,
    dump_hotness: Option<PathBuf>,
) -> CliResult {
    let mut cfg = load_config(&common, &overrides)?;
    if dump_hotness.is_some() {
        cfg.sim.record_hotness = true;
    }
    if common.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let report = run_once(&cfg, &trace)?;
    if let Some(path) = &dump_hotness {
        let mut csv = String::from("step,layer,expert,score\n");
        for sample in &report.hotness_series {
            for (expert, score) in sample.scores.iter().enumerate() {
                csv.push_str(&format!("{},{},{expert},{score}\n", sample.step, sample.layer));
            }
        }
        std::fs::write(path, csv)
            .map_err(|e| anyhow!("writing {}: {e}", path.display()))
            .code(EXIT_CONFIG)?;
    }
    let out = output.unwrap_or_else(|| PathBuf::from(&cfg.output.report));
    write_report_file(&report, &out).code(EXIT_CONFIG)?;
    println!("{} -> {}", summary_line(&report), out.display());
    if !report.clean() {
        return Err(CliError {
            code: EXIT_INVARIANT,
            source: anyhow!(
                "invariant audit failed: {} stalls, {} provenance violations, {} memory violations \
                 (report written to {})",
                report.stall_count,
                report.provenance_violations,
                report.memory_violations,
                out.display()
            ),
        });
    }
    Ok(())
}

fn parse_grid(grid: &str) -> CliResult<Vec<u32>> {
    let (key, values) = grid
        .split_once('=')
        .ok_or_else(|| anyhow!("grid spec must look like `n_hot=0,16,32`"))
        .code(EXIT_CONFIG)?;
    if key != "n_hot" {
        return Err(CliError {
            code: EXIT_CONFIG,
            source: anyhow!("unsupported grid parameter `{key}` (only n_hot)"),
        });
    }
    let points: Vec<u32> = values
        .split(',')
        .filter(|v| !v.is_empty())
        .map(|v| v.trim().parse::<u32>().map_err(|e| anyhow!("bad grid value `{v}`: {e}")))
        .collect::<Result<_>>()
        .code(EXIT_CONFIG)?;
    if points.is_empty() {
        return Err(CliError {
            code: EXIT_CONFIG,
            source: anyhow!("empty grid"),
        });
    }
    Ok(points)
}

fn cmd_sweep(
    common: Common,
    overrides: Overrides,
    trace_path: PathBuf,
    grid: String,
    output: Option<PathBuf>,
    jobs: usize,
) -> CliResult {
    let cfg = load_config(&common, &overrides)?;
    if common.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let points = parse_grid(&grid)?;
    let trace = read_trace_file(&trace_path).code(EXIT_VALIDATION)?;
    let dir = output.unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    std::fs::create_dir_all(&dir)
        .map_err(|e| anyhow!("creating {}: {e}", dir.display()))
        .code(EXIT_CONFIG)?;

    let base = cfg.sim_config();
    let jobs = jobs.max(1).min(points.len());
    let results: Vec<Mutex<Option<Result<Report, SimError>>>> =
        points.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= points.len() {
                    break;
                }
                let mut point = base;
                point.budget.n_hot_override = Some(points[i]);
                *results[i].lock().unwrap() = Some(run(&point, &trace));
            });
        }
    });

    let mut csv = String::from(sweep_csv_header());
    let mut failed = 0usize;
    for (i, cell) in results.iter().enumerate() {
        let result = cell.lock().unwrap().take().expect("all points visited");
        match result {
            Ok(report) => {
                let path = dir.join(format!("n_hot_{}.json", points[i]));
                write_report_file(&report, &path).code(EXIT_CONFIG)?;
                println!("n_hot={}: {}", points[i], summary_line(&report));
                csv.push_str(&sweep_csv_row(&report));
                if !report.clean() {
                    eprintln!("n_hot={}: invariant audit failed", points[i]);
                    failed += 1;
                }
            }
            Err(e) => {
                eprintln!("n_hot={}: {e}", points[i]);
                failed += 1;
            }
        }
    }
    let csv_path = dir.join("summary.csv");
    std::fs::write(&csv_path, csv)
        .map_err(|e| anyhow!("writing {}: {e}", csv_path.display()))
        .code(EXIT_CONFIG)?;
    println!("wrote {}", csv_path.display());
    if failed > 0 {
        return Err(CliError {
            code: EXIT_INVARIANT,
            source: anyhow!("{failed} of {} sweep points failed", points.len()),
        });
    }
    Ok(())
}

fn cmd_report(path: PathBuf, json: bool) -> CliResult {
    let doc = read_report_file(&path).code(EXIT_VALIDATION)?;
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&doc).expect("report serializes")
        );
    } else {
        print!("{}", pretty_summary(&doc));
    }
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenTrace {
            common,
            overrides,
            output,
        } => cmd_gen_trace(common, overrides, output),
        Command::Simulate {
            common,
            overrides,
            trace,
            output,
            dump_hotness,
        } => cmd_simulate(common, overrides, trace, output, dump_hotness),
        Command::Sweep {
            common,
            overrides,
            trace,
            grid,
            output,
            jobs,
        } => cmd_sweep(common, overrides, trace, grid, output, jobs),
        Command::Report { path, json } => cmd_report(path, json),
    }
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {:#}", e.source);
            std::process::exit(e.code);
        }
    }
}
