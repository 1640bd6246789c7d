//! `fms` — hub generation, HPO runs, multi-seed comparisons, and report
//! rendering on cached benchmark hubs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fms_core::benchhub::{generate_hub, BenchmarkTable, HubSpec};
use fms_core::hpo::{pretrain_surrogate, run, MethodConfig, MethodId, DEFAULT_POOL_SIZE};
use fms_core::report::{compare, render_reports};
use fms_core::trace::HpoTrace;

#[derive(Parser)]
#[command(
    name = "fms",
    version,
    about = "Multifidelity hyperparameter optimization with checkpoint-aware deep-kernel surrogates"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Benchmark-hub operations.
    Hub {
        #[command(subcommand)]
        command: HubCommand,
    },
    /// HPO runs and comparisons against a hub.
    Hpo {
        #[command(subcommand)]
        command: HpoCommand,
    },
    /// Surrogate-state utilities (transfer warm starts).
    Surrogate {
        #[command(subcommand)]
        command: SurrogateCommand,
    },
    /// Re-render report.csv / tau.csv / regret.svg from stored traces.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum HubCommand {
    /// Train all configurations of a hub spec and cache curves/checkpoints.
    Generate {
        /// Hub spec JSON; the built-in desk-scale spec when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the built-in desk-scale hub spec as JSON (a template to edit).
    Spec,
}

#[derive(Subcommand)]
enum HpoCommand {
    /// One HPO run; writes a line-delimited JSON trace.
    Run {
        #[arg(long)]
        hub: PathBuf,
        #[arg(long)]
        method: String,
        /// Total epoch budget.
        #[arg(long)]
        budget: u64,
        #[arg(long)]
        seed: u64,
        /// Trace output path (.jsonl).
        #[arg(long)]
        out: PathBuf,
        /// Serialized surrogate state to initialize (θ, w) from.
        #[arg(long)]
        warm_start: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_POOL_SIZE)]
        pool_size: usize,
    },
    /// Run methods × seeds, then write traces + report.csv + tau.csv + regret.svg.
    Compare {
        #[arg(long)]
        hub: PathBuf,
        /// Comma-separated method ids.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        budget: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_POOL_SIZE)]
        pool_size: usize,
    },
}

#[derive(Subcommand)]
enum SurrogateCommand {
    /// Fit a surrogate on random evaluations from one or more hubs and save
    /// it for --warm-start.
    Pretrain {
        /// Comma-separated hub directories.
        #[arg(long, value_delimiter = ',')]
        hubs: Vec<PathBuf>,
        #[arg(long)]
        method: String,
        #[arg(long, default_value_t = 30)]
        records_per_hub: usize,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long)]
        seed: u64,
        /// State output path (.fmsr).
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ReportArgs {
    /// Trace files: a glob over file names ('*' and '?'), or a directory
    /// containing trace_*.jsonl files.
    #[arg(long)]
    traces: String,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Hub { command } => match command {
            HubCommand::Generate { spec, seed, out } => {
                let spec = match spec {
                    Some(path) => serde_json::from_slice(
                        &std::fs::read(&path)
                            .with_context(|| format!("reading spec {}", path.display()))?,
                    )
                    .context("parsing hub spec")?,
                    None => HubSpec::desk_default(),
                };
                let table = generate_hub(&spec, seed, &out)?;
                println!(
                    "hub ready: {} configurations x {} epochs in {}",
                    table.n_configs(),
                    table.b_max(),
                    out.display()
                );
                Ok(())
            }
            HubCommand::Spec => {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&HubSpec::desk_default())?
                );
                Ok(())
            }
        },
        Command::Hpo { command } => match command {
            HpoCommand::Run {
                hub,
                method,
                budget,
                seed,
                out,
                warm_start,
                pool_size,
            } => {
                let method = MethodId::parse(&method)?;
                let bench = BenchmarkTable::load(&hub)?;
                let mut cfg = MethodConfig::new(method, budget);
                cfg.pool_size = pool_size;
                cfg.warm_start = warm_start;
                let trace = run(&cfg, &bench, seed)?;
                trace.write_jsonl(&out)?;
                let last = trace.incumbent_series().last().copied().unwrap_or(0.0);
                println!(
                    "{method} seed {seed}: {} epochs, incumbent {last}, trace {}",
                    trace.total_epochs(),
                    out.display()
                );
                Ok(())
            }
            HpoCommand::Compare {
                hub,
                methods,
                seeds,
                budget,
                out,
                pool_size,
            } => {
                let methods = methods
                    .iter()
                    .map(|m| MethodId::parse(m))
                    .collect::<fms_core::Result<Vec<_>>>()?;
                let bench = BenchmarkTable::load(&hub)?;
                let paths = compare(&bench, &methods, &seeds, budget, pool_size, &out)?;
                println!(
                    "{} runs complete; traces and reports in {}",
                    paths.len(),
                    out.display()
                );
                Ok(())
            }
        },
        Command::Surrogate { command } => match command {
            SurrogateCommand::Pretrain {
                hubs,
                method,
                records_per_hub,
                steps,
                seed,
                out,
            } => {
                let method = MethodId::parse(&method)?;
                let tables = hubs
                    .iter()
                    .map(|p| BenchmarkTable::load(p))
                    .collect::<fms_core::Result<Vec<_>>>()?;
                let refs: Vec<&BenchmarkTable> = tables.iter().collect();
                let state = pretrain_surrogate(method, &refs, records_per_hub, steps, seed)?;
                state.save(&out)?;
                println!(
                    "pretrained {method} surrogate on {} hubs ({} evaluations) -> {}",
                    tables.len(),
                    state.evals_seen,
                    out.display()
                );
                Ok(())
            }
        },
        Command::Report(args) => {
            let paths = expand_traces(&args.traces)?;
            if paths.is_empty() {
                bail!("no trace files match `{}`", args.traces);
            }
            let traces = paths
                .iter()
                .map(|p| HpoTrace::read_jsonl(p))
                .collect::<fms_core::Result<Vec<_>>>()?;
            render_reports(&traces, &args.out)?;
            println!(
                "rendered reports for {} traces into {}",
                traces.len(),
                args.out.display()
            );
            Ok(())
        }
    }
}

/// Expand a trace argument: a directory (all trace_*.jsonl inside) or a path
/// whose file name may contain `*`/`?` wildcards. Results are sorted for
/// deterministic report rendering.
fn expand_traces(pattern: &str) -> Result<Vec<PathBuf>> {
    let as_path = Path::new(pattern);
    if as_path.is_dir() {
        return list_matching(as_path, "trace_*.jsonl");
    }
    let (dir, name) = match (as_path.parent(), as_path.file_name()) {
        (Some(dir), Some(name)) if !dir.as_os_str().is_empty() => {
            (dir.to_path_buf(), name.to_string_lossy().into_owned())
        }
        (_, Some(name)) => (PathBuf::from("."), name.to_string_lossy().into_owned()),
        _ => bail!("invalid trace pattern `{pattern}`"),
    };
    if !name.contains('*') && !name.contains('?') {
        return Ok(if as_path.exists() {
            vec![as_path.to_path_buf()]
        } else {
            Vec::new()
        });
    }
    list_matching(&dir, &name)
}

fn list_matching(dir: &Path, pattern: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if wildcard_match(pattern, &name) {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

/// Glob-style matching with `*` (any run) and `?` (any one character).
fn wildcard_match(pattern: &str, text: &str) -> bool {
    let p: Vec<char> = pattern.chars().collect();
    let t: Vec<char> = text.chars().collect();
    // Iterative wildcard match with backtracking on the last `*`.
    let (mut pi, mut ti) = (0usize, 0usize);
    let (mut star, mut star_t) = (usize::MAX, 0usize);
    while ti < t.len() {
        if pi < p.len() && (p[pi] == '?' || p[pi] == t[ti]) {
            pi += 1;
            ti += 1;
        } else if pi < p.len() && p[pi] == '*' {
            star = pi;
            star_t = ti;
            pi += 1;
        } else if star != usize::MAX {
            pi = star + 1;
            star_t += 1;
            ti = star_t;
        } else {
            return false;
        }
    }
    while pi < p.len() && p[pi] == '*' {
        pi += 1;
    }
    pi == p.len()
}
