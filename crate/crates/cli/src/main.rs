//! Command-line front end: resolves experiment configs and dispatches to the
//! library runners. Exit codes: 0 success, 2 configuration error,
//! 3 numerical failure.

use afmeta::experiments::analyze::{cmd_analyze, AnalysisConfig};
use afmeta::experiments::sweep::prefactor_sweep;
use afmeta::experiments::transfer::{transfer_matrix, TransferRunConfig};
use afmeta::experiments::{cmd_gen_data, cmd_meta, cmd_train, exit_code_for, ExperimentConfig};
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "afmeta", about = "Meta-learned activation functions: training, analysis, and task runners")]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train models per seed; writes metrics CSV, checkpoints, trajectories.
    Train,
    /// Meta-learn an activation function with restarts; writes spline JSON.
    Meta,
    /// Train every task/activation combination into a transfer matrix.
    Transfer,
    /// Sweep the tanh prefactor with the learning rate rescaled as lr/alpha.
    Sweep {
        /// Comma-separated prefactor grid.
        #[arg(long, default_value = "0.01,0.1,0.5,1,2,4,8")]
        alphas: String,
    },
    /// Analyze a checkpoint: TV report, input slice, or landscapes.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Generate the synthetic datasets (IDX images + staircase CSV).
    GenData {
        #[arg(long, default_value_t = 2000)]
        rows: usize,
    },
}

fn load_experiment(cli: &Cli) -> afmeta::Result<ExperimentConfig> {
    let path = cli.config.as_ref().ok_or_else(|| {
        afmeta::Error::Config("this command needs --config <experiment.json>".into())
    })?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg_dir: Option<&PathBuf>) -> afmeta::Result<PathBuf> {
    cli.out
        .clone()
        .or_else(|| cfg_dir.cloned())
        .ok_or_else(|| afmeta::Error::Config("no output directory: pass --out <dir>".into()))
}

fn run(cli: &Cli) -> afmeta::Result<()> {
    match &cli.command {
        Command::Train => {
            let cfg = load_experiment(cli)?;
            let out = out_dir(cli, cfg.output_dir.as_ref())?;
            let summary = cmd_train(&cfg, &out)?;
            println!(
                "trained {} run(s); mean test accuracy {:.4} -> {}",
                summary.runs.len(),
                summary.mean_test_acc,
                out.display()
            );
        }
        Command::Meta => {
            let cfg = load_experiment(cli)?;
            let out = out_dir(cli, cfg.output_dir.as_ref())?;
            let summary = cmd_meta(&cfg, &out)?;
            println!(
                "restart {} won with retrain validation accuracy {:.4}; spline at {}",
                summary.best_index,
                summary.best_retrain_val_acc,
                summary.spline_path.display()
            );
        }
        Command::Transfer => {
            let path = cli.config.as_ref().ok_or_else(|| {
                afmeta::Error::Config("transfer needs --config <transfer.json>".into())
            })?;
            let cfg = TransferRunConfig::load(path)?;
            let out = out_dir(cli, None)?;
            std::fs::create_dir_all(&out)?;
            let sources = cfg.resolve_sources()?;
            let matrix = transfer_matrix(&cfg.tasks, &sources, &cfg.budget)?;
            std::fs::write(out.join("transfer.csv"), matrix.to_csv())?;
            std::fs::write(out.join("transfer.json"), serde_json::to_string_pretty(&matrix)?)?;
            println!("column means: {:?} -> {}", matrix.column_means, out.display());
        }
        Command::Sweep { alphas } => {
            let cfg = load_experiment(cli)?;
            let out = out_dir(cli, cfg.output_dir.as_ref())?;
            std::fs::create_dir_all(&out)?;
            let grid: Vec<f64> = alphas
                .split(',')
                .map(|a| {
                    a.trim()
                        .parse::<f64>()
                        .map_err(|_| afmeta::Error::Config(format!("bad prefactor '{a}'")))
                })
                .collect::<afmeta::Result<_>>()?;
            let report = prefactor_sweep(&cfg, &grid)?;
            std::fs::write(out.join("sweep.csv"), report.to_csv())?;
            std::fs::write(out.join("sweep.json"), serde_json::to_string_pretty(&report)?)?;
            println!("best alpha {} (val acc {:.4})", report.best_alpha, report.best_val_acc);
        }
        Command::Analyze { checkpoint } => {
            let path = cli.config.as_ref().ok_or_else(|| {
                afmeta::Error::Config("analyze needs --config <analysis.json>".into())
            })?;
            let cfg: AnalysisConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            let out = out_dir(cli, None)?;
            let report = cmd_analyze(checkpoint, &cfg, cli.seed.unwrap_or(0), &out)?;
            println!("wrote {:?} -> {}", report.files, out.display());
        }
        Command::GenData { rows } => {
            let out = out_dir(cli, None)?;
            cmd_gen_data(&out, *rows, cli.seed.unwrap_or(0))?;
            println!("generated {rows}-row synthetic datasets in {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err) as u8)
        }
    }
}
