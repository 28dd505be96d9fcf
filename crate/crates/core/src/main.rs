use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use circuitscope::experiment::{analyze_trace, verify_report, ExperimentConfig, ExperimentError, Pipeline};
use circuitscope::metrics::{write_metrics_csv, MetricKind};
use circuitscope::trace::read_trace;

const OUT_ENV: &str = "CIRCUITSCOPE_OUT";
const DEFAULT_OUT: &str = "out";

#[derive(Parser)]
#[command(name = "circuitscope", version, about = "Circuit analysis of small denoising diffusion models")]
struct Cli {
    /// Experiment config (JSON). Defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (else $CIRCUITSCOPE_OUT, the config, or ./out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Skip stages already completed for this config.
    #[arg(long, global = true)]
    resume: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render both datasets and write manifests and previews.
    GenData,
    /// Train one model per arm.
    Train,
    /// Capture activations and attention maps at the analysis timesteps.
    Trace,
    /// Compute metrics from the traces, or from one trace file.
    Analyze {
        /// Analyze this DTRC file on its own.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Ablation sweep, head importance and robustness per arm.
    Intervene,
    /// Cross-arm hypothesis tests.
    Stats,
    /// Every stage in order.
    RunAll,
    /// Assemble the report, or check a finished one.
    Report {
        /// Recompute randomly chosen report numbers from the stored traces.
        #[arg(long)]
        verify: bool,
        /// Numbers to recompute with --verify.
        #[arg(long, default_value_t = 3)]
        checks: usize,
        /// Seed for choosing the numbers (random if absent).
        #[arg(long)]
        verify_seed: Option<u64>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Trace => "trace",
            Command::Analyze { .. } => "analyze",
            Command::Intervene => "intervene",
            Command::Stats => "stats",
            Command::RunAll => "run-all",
            Command::Report { .. } => "report",
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: Option<&ExperimentConfig>) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn analyze_file(cli: &Cli, path: &Path) -> Result<(), ExperimentError> {
    let cfg = load_config(cli)?;
    let invalid = |m: String| ExperimentError::InvalidInput(m);
    let trace = read_trace(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let analysis = analyze_trace(&trace, None, &cfg.analysis).map_err(|e| invalid(e.to_string()))?;
    let out = out_dir(cli, Some(&cfg));
    std::fs::create_dir_all(&out).map_err(|e| invalid(e.to_string()))?;
    let csv = out.join("trace_metrics.csv");
    write_metrics_csv(&analysis.metrics, &csv).map_err(|e| invalid(e.to_string()))?;
    println!("{} records, {} metric values -> {}", trace.records.len(), analysis.metrics.len(), csv.display());
    for c in &analysis.circuit {
        println!("t={:>4} circuit_complexity={:.6} layers={}", c.timestep, c.mean, c.per_layer.len());
    }
    for (t, h) in analysis.head_mean_series(MetricKind::Entropy) {
        println!("t={t:>4} mean_head_entropy={h:.6}");
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), ExperimentError> {
    match &cli.command {
        Command::Analyze { trace: Some(path) } => return analyze_file(cli, path),
        Command::Report { verify: true, checks, verify_seed } => {
            let out = out_dir(cli, None);
            let seed = verify_seed.unwrap_or_else(rand::random);
            let results = verify_report(&out, *checks, seed)?;
            for c in &results {
                println!("ok {} = {}", c.what, c.reported);
            }
            println!("verified {} numbers (selection seed {seed})", results.len());
            return Ok(());
        }
        _ => {}
    }
    let cfg = load_config(cli)?;
    let out = out_dir(cli, Some(&cfg));
    let p = Pipeline::new(cfg, &out, cli.resume)?;
    match &cli.command {
        Command::GenData => p.gen_data(),
        Command::Train => p.train(),
        Command::Trace => p.trace(),
        Command::Analyze { .. } => p.analyze(),
        Command::Intervene => p.intervene(),
        Command::Stats => p.stats(),
        Command::RunAll | Command::Report { .. } => {
            let report = if matches!(cli.command, Command::RunAll) {
                p.run_all()?
            } else {
                p.report()?
            };
            println!("report written to {}", out.join("report.json").display());
            for row in &report.tables.complexity_ratio {
                println!(
                    "t={:>4} complexity A={:.6} B={:.6} ratio={}",
                    row.timestep,
                    row.complexity_a,
                    row.complexity_b,
                    row.ratio.map_or("n/a".to_string(), |r| format!("{r:.4}"))
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let stage = e.stage().map_or(cli.command.name(), |s| s.name());
            let message = e.message().replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
            eprintln!("error: stage={stage} kind={} message=\"{message}\"", e.kind());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
