//! `dualtask` command line: runs one experiment per invocation, or compares
//! two finished runs.

use std::io::{self, BufReader};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dualtask::experiment::{
    compare_runs, parse_config, run_experiment, ExperimentConfig, ExperimentError, ExperimentKind,
    Metric,
};
use dualtask::telemetry::categorize_lines;

#[derive(Parser)]
#[command(name = "dualtask", version, about = "Dual-task switching experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quadratic mixture-GD run checked against its closed form.
    Theory(RunArgs),
    /// Toy-denoiser training with telemetry (set p = 0 for image-only).
    Train(RunArgs),
    /// Switching vs PCGrad on paired seeds.
    Pcgrad(RunArgs),
    /// Step-cost model and measured attention cost.
    Cost(RunArgs),
    /// Motion categorizer. Without --config/--out it filters `fg,bg` lines
    /// from --input (or stdin) to labels on stdout.
    MotionCat {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Compares the last quarter of telemetry between two runs.
    Compare {
        /// Manifest file or run directory.
        run_a: PathBuf,
        run_b: PathBuf,
        #[arg(long, default_value = "phi_final_band")]
        metric: String,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: `$DUALTASK_OUT_ROOT/<kind>-<seed>`, else `runs/…`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// First seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Sweep size; overrides the config.
    #[arg(long)]
    seeds: Option<u64>,
}

fn load(kind: ExperimentKind, args: &RunArgs) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                ExperimentError::Config(format!("cannot read {}: {e}", path.display()))
            })?;
            let cfg = parse_config(&text)?;
            let explicit_kind = text
                .parse::<toml::Table>()
                .is_ok_and(|t| t.contains_key("kind"));
            if explicit_kind && cfg.kind != kind {
                return Err(ExperimentError::Config(format!(
                    "config kind `{}` does not match subcommand `{}`",
                    cfg.kind.name(),
                    kind.name()
                )));
            }
            cfg
        }
        None => ExperimentConfig::default(),
    };
    cfg.kind = kind;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(seeds) = args.seeds {
        cfg.seeds = seeds;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(kind: ExperimentKind, args: &RunArgs) -> Result<i32, ExperimentError> {
    let cfg = load(kind, args)?;
    let out = cfg.resolve_output_dir();
    let m = run_experiment(&cfg, &out)?;
    println!(
        "{}: {} ({} ms) -> {}",
        m.kind,
        if m.passed() { "ok" } else { "FAILED" },
        m.duration_ms,
        out.display()
    );
    for (k, v) in &m.results {
        println!("  {k} = {v}");
    }
    for f in &m.failures {
        eprintln!("assertion failed: {f}");
    }
    Ok(m.exit_code())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Theory(a) => run(ExperimentKind::Theory, &a),
        Command::Train(a) => run(ExperimentKind::Train, &a),
        Command::Pcgrad(a) => run(ExperimentKind::Pcgrad, &a),
        Command::Cost(a) => run(ExperimentKind::Cost, &a),
        Command::MotionCat { run: a, input } if a.config.is_none() && a.out.is_none() => {
            let out = io::stdout().lock();
            let filtered = match input {
                Some(path) => std::fs::File::open(&path)
                    .map_err(ExperimentError::from)
                    .and_then(|f| Ok(categorize_lines(BufReader::new(f), out)?)),
                None => categorize_lines(io::stdin().lock(), out).map_err(ExperimentError::from),
            };
            filtered.map(|_| 0)
        }
        Command::MotionCat { run: a, input } => match load(ExperimentKind::MotionCat, &a) {
            Ok(mut cfg) => {
                if let Some(path) = input {
                    cfg.motion_cat.input = path.to_string_lossy().into_owned();
                }
                let out = cfg.resolve_output_dir();
                run_experiment(&cfg, &out).map(|m| {
                    println!(
                        "motion_cat: {} -> {}",
                        if m.passed() { "ok" } else { "FAILED" },
                        out.display()
                    );
                    m.exit_code()
                })
            }
            Err(e) => Err(e),
        },
        Command::Compare {
            run_a,
            run_b,
            metric,
        } => metric
            .parse::<Metric>()
            .and_then(|metric| compare_runs(&run_a, &run_b, metric))
            .map(|report| {
                println!("{report}");
                0
            }),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
