use std::path::PathBuf;
use std::process::ExitCode;

use agrisplat::harness::{
    run_experiment, summarize, Ablation, CellResult, ExecutionMode, ExperimentConfig, MeanStd, Method,
};
use agrisplat::scene::{generate_scene, SceneConfig};
use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "agrisplat", version, about = "Active semantic mapping of crop rows in simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural scene and write it as JSON.
    GenerateScene {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        rows: Option<usize>,
        #[arg(long)]
        plants: Option<usize>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Run the active-mapping loop for every configured cell.
    Run(RunArgs),
    /// Run the full pipeline and its ablations on the same cells.
    Ablate(RunArgs),
    /// Summarize a results.json file.
    Report {
        results: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML, or JSON by extension).
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Seeds to run; overrides the config.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Methods: hybrid, octomap-0.01, octomap-0.015, ...
    #[arg(long, value_delimiter = ',')]
    methods: Vec<Method>,
    /// Label correctness probabilities to run.
    #[arg(long, value_delimiter = ',')]
    p_correct: Vec<f64>,
    #[arg(long)]
    no_confidence: bool,
    #[arg(long)]
    exploration_only: bool,
    #[arg(long)]
    no_downsample: bool,
    /// Overlap splat optimization with planning.
    #[arg(long)]
    pipelined: bool,
}

fn load_config(args: &RunArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if !args.seeds.is_empty() {
        cfg.seeds = args.seeds.clone();
    }
    if !args.methods.is_empty() {
        cfg.methods = args.methods.clone();
    }
    if !args.p_correct.is_empty() {
        cfg.p_correct = args.p_correct.clone();
    }
    if args.pipelined {
        cfg.run.mode = ExecutionMode::Pipelined;
    }
    if args.out.is_some() {
        cfg.output_dir = args.out.clone();
    }
    Ok(cfg)
}

fn fmt_stat(s: &Option<MeanStd>) -> String {
    match s {
        None => "-".into(),
        Some(m) => match m.std {
            Some(sd) => format!("{:.3}±{:.3}", m.mean, sd),
            None => format!("{:.3}", m.mean),
        },
    }
}

fn print_summary(results: &[CellResult]) {
    println!(
        "{:<16} {:<34} {:>5} {:>6} {:>14} {:>14} {:>14} {:>14} {:>16} {:>16}",
        "method", "variant", "p", "cells", "chamfer", "precision", "recall", "f1", "volume%", "count%"
    );
    for row in summarize(results) {
        println!(
            "{:<16} {:<34} {:>5} {:>6} {:>14} {:>14} {:>14} {:>14} {:>16} {:>16}",
            row.method,
            row.variant,
            row.p_correct,
            format!("{}/{}", row.cells - row.failed, row.cells),
            fmt_stat(&row.chamfer),
            fmt_stat(&row.precision),
            fmt_stat(&row.recall),
            fmt_stat(&row.f1),
            fmt_stat(&row.volume_accuracy_pct),
            fmt_stat(&row.count_accuracy_pct),
        );
    }
}

fn finish(results: Vec<CellResult>) -> anyhow::Result<ExitCode> {
    print_summary(&results);
    let failed: Vec<&CellResult> = results.iter().filter(|r| r.error.is_some()).collect();
    for f in &failed {
        eprintln!(
            "cell seed={} method={} variant={} row={} failed: {}",
            f.seed,
            f.method,
            f.variant,
            f.row_id,
            f.error.as_deref().unwrap_or_default()
        );
    }
    Ok(if failed.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::GenerateScene { seed, rows, plants, out } => {
            let mut cfg = SceneConfig::default();
            if let Some(s) = seed {
                cfg.rng_seed = s;
            }
            if let Some(r) = rows {
                cfg.n_rows = r;
            }
            if let Some(p) = plants {
                cfg.plants_per_row = p;
            }
            let scene = generate_scene(&cfg)?;
            scene.save(&out)?;
            println!(
                "wrote {} ({} primitives, {} fruits)",
                out.display(),
                scene.primitives.len(),
                scene.fruits().count()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Run(args) => {
            let mut cfg = load_config(&args)?;
            let ablation = Ablation {
                no_confidence: args.no_confidence,
                exploration_only: args.exploration_only,
                no_downsample: args.no_downsample,
            };
            if ablation != Ablation::default() {
                cfg.ablations = vec![ablation];
            }
            finish(run_experiment(&cfg)?)
        }
        Command::Ablate(args) => {
            let mut cfg = load_config(&args)?;
            cfg.methods.retain(|m| *m == Method::Hybrid);
            if cfg.methods.is_empty() {
                bail!("ablations apply to the hybrid method only");
            }
            cfg.ablations = vec![
                Ablation::default(),
                Ablation {
                    no_confidence: true,
                    ..Ablation::default()
                },
                Ablation {
                    exploration_only: true,
                    ..Ablation::default()
                },
                Ablation {
                    no_downsample: true,
                    ..Ablation::default()
                },
            ];
            finish(run_experiment(&cfg)?)
        }
        Command::Report { results } => {
            let text = std::fs::read_to_string(&results).with_context(|| format!("reading {}", results.display()))?;
            let cells: Vec<CellResult> = serde_json::from_str(&text)?;
            print_summary(&cells);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
