//! Command-line entry point: training runs, the pairwise transfer study,
//! negative-transfer sequence construction, ablations, grid search, and
//! report emission.

use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use shlpt::config::{
    grid_search, load_config, read_records, run_experiment, ExperimentConfig, GridSpec, RunDir,
};
use shlpt::evalbench::{build_negative_transfer_sequences, transfer_matrix, SequenceMode, TransferMatrix};
use shlpt::report::{emit_reports, ReportInputs};
use shlpt::trainer::Method;
use shlpt::{Error, Result};

/// Lifelong prompt tuning with similarity-partitioned transfer.
#[derive(Parser)]
#[command(name = "shlpt", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured task sequence across all seeds.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue each seed from its last completed task.
        #[arg(long)]
        resume: bool,
        /// Override the configured seeds (repeatable).
        #[arg(long = "seed")]
        seeds: Vec<u64>,
    },
    /// Train every ordered task pair and write the transfer matrix.
    Matrix {
        #[arg(long)]
        config: PathBuf,
        /// Directory of task-spec JSON files overriding the configured
        /// sequence.
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long = "seed")]
        seeds: Vec<u64>,
    },
    /// List task orderings with negative transfer between the required
    /// pairs.
    Sequences {
        /// Transfer-matrix CSV produced by `matrix`.
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long, default_value = "strict")]
        mode: String,
        /// Sequence length; defaults to every task in the matrix.
        #[arg(long)]
        length: Option<usize>,
    },
    /// Run one training mode (a baseline or ablation) on the configured
    /// sequence.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// One of: shlpt, per_task_prompts, continual_init,
        /// progressive_prompts, shlpt_minus_ase, shlpt_minus_asc,
        /// shlpt_minus_hsc, shlpt_minus_stt, shlpt_minus_asc_hsc.
        #[arg(long)]
        method: String,
        #[arg(long = "seed")]
        seeds: Vec<u64>,
    },
    /// Grid search over the partition threshold and similarity
    /// temperature.
    Grid {
        #[arg(long)]
        config: PathBuf,
        /// Threshold grid values (repeatable); defaults to 0.02..=0.20.
        #[arg(long = "delta")]
        deltas: Vec<f64>,
        /// Temperature grid values (repeatable); defaults to the config's.
        #[arg(long = "tau-sim")]
        taus: Vec<f64>,
    },
    /// Emit figures and CSVs for a finished run directory.
    Report {
        #[arg(long = "run-dir")]
        run_dir: PathBuf,
    },
}

/// `SHLPT_OUTPUT_ROOT` relocates every run directory under one root.
fn apply_output_root(config: &mut ExperimentConfig) {
    if let Ok(root) = std::env::var("SHLPT_OUTPUT_ROOT") {
        let root = PathBuf::from(root);
        config.output_dir = if config.output_dir.is_relative() {
            root.join(&config.output_dir)
        } else {
            root.join(config.output_dir.file_name().unwrap_or_default())
        };
    }
}

fn load(path: &Path, seeds: &[u64]) -> Result<ExperimentConfig> {
    let mut config = load_config(path)?;
    apply_output_root(&mut config);
    if !seeds.is_empty() {
        config.train.seeds = seeds.to_vec();
        config.validate()?;
    }
    Ok(config)
}

fn parse_method(s: &str) -> Result<Method> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::Config(format!("unknown method: {s}")))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume, seeds } => {
            let config = load(&config, &seeds)?;
            let records = run_experiment(&config, resume)?;
            for r in &records {
                let last = r.outcome.accuracy_matrix.last();
                let avg = last.map(|row| row.iter().sum::<f64>() / row.len() as f64);
                println!(
                    "seed {}: avg accuracy after last task = {}",
                    r.seed,
                    avg.map_or("n/a".to_string(), |a| format!("{a:.4}"))
                );
                if let Some(m) = &r.metrics {
                    println!("  bwt = {:.4}, fwt = {:.4}", m.bwt, m.fwt);
                }
            }
            Ok(())
        }
        Command::Matrix { config, tasks, seeds } => {
            let mut config = load(&config, &seeds)?;
            if let Some(dir) = tasks {
                let mut specs = Vec::new();
                let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|e| e == "json"))
                    .collect();
                paths.sort();
                for p in paths {
                    specs.push(shlpt::task_data::load_spec(&p)?);
                }
                config.sequence = specs;
            }
            let datasets = config.datasets()?;
            let dir = RunDir::claim(&config.output_dir, &config)?;
            let backbone = shlpt::config::experiment_backbone(&config, dir.root())?;
            let seed = config.train.seeds[0];
            let matrix = transfer_matrix(&backbone, &datasets, &config.train, seed)?;
            let csv_path = dir.root().join("matrix.csv");
            matrix.save_csv(&csv_path)?;
            shlpt::report::transfer_heatmap(&matrix, &dir.root().join("matrix.png"))?;
            println!("wrote {}", csv_path.display());
            for s in 0..matrix.tasks.len() {
                for t in 0..matrix.tasks.len() {
                    if let Some(r) = matrix.reduction(s, t) {
                        println!("{} -> {}: r = {r:+.2}", matrix.tasks[s], matrix.tasks[t]);
                    }
                }
            }
            Ok(())
        }
        Command::Sequences { matrix, mode, length } => {
            let matrix = TransferMatrix::load_csv(&matrix)?;
            let mode = match mode.as_str() {
                "strict" => SequenceMode::Strict,
                "adjacent" => SequenceMode::Adjacent,
                other => return Err(Error::Config(format!("unknown mode: {other}"))),
            };
            let length = length.unwrap_or(matrix.tasks.len());
            let seqs = build_negative_transfer_sequences(&matrix, length, mode)?;
            if seqs.is_empty() {
                println!("no qualifying sequences");
            }
            for s in seqs {
                println!("{}", s.join(" -> "));
            }
            Ok(())
        }
        Command::Ablate { config, method, seeds } => {
            let mut config = load(&config, &seeds)?;
            config.train.method = parse_method(&method)?;
            config.output_dir = config.output_dir.join(method);
            let records = run_experiment(&config, false)?;
            for r in &records {
                let last = r.outcome.accuracy_matrix.last();
                let avg = last.map(|row| row.iter().sum::<f64>() / row.len() as f64);
                println!(
                    "{:?} seed {}: avg accuracy = {}",
                    r.outcome.method,
                    r.seed,
                    avg.map_or("n/a".to_string(), |a| format!("{a:.4}"))
                );
            }
            Ok(())
        }
        Command::Grid { config, deltas, taus } => {
            let config = load(&config, &[])?;
            let grid = GridSpec {
                delta: if deltas.is_empty() {
                    (1..=10).map(|i| i as f64 * 0.02).collect()
                } else {
                    deltas
                },
                tau_sim: if taus.is_empty() {
                    vec![config.train.tau_sim]
                } else {
                    taus.into_iter().map(Some).collect()
                },
            };
            let (best, cells) = grid_search(&config, &grid)?;
            println!("delta\ttau_sim\tmean_val_accuracy");
            for c in &cells {
                println!(
                    "{}\t{}\t{}",
                    c.delta,
                    c.tau_sim.map_or("default".into(), |t| format!("{t}")),
                    c.mean_val_accuracy
                        .map_or_else(|| c.error.clone().unwrap_or_default(), |m| format!("{m:.4}"))
                );
            }
            println!(
                "best: delta = {}, tau_sim = {:?}",
                best.train.delta, best.train.tau_sim
            );
            Ok(())
        }
        Command::Report { run_dir } => {
            let records_path = run_dir.join("records.jsonl");
            if !records_path.exists() {
                return Err(Error::NothingToResume(run_dir.display().to_string()));
            }
            let records = read_records(&records_path)?;
            let record = records.last().ok_or_else(|| {
                Error::Config("records.jsonl holds no finished runs".into())
            })?;
            let matrix_path = run_dir.join("matrix.csv");
            let matrix = if matrix_path.exists() {
                Some(TransferMatrix::load_csv(&matrix_path)?)
            } else {
                None
            };
            let backbone_path = run_dir.join("backbone.bin");
            let pool_dir = run_dir.join(format!("seed_{}", record.seed)).join("pool");
            let loaded = if backbone_path.exists() && pool_dir.join("index.json").exists() {
                let backbone = shlpt::backbone::Backbone::load(&backbone_path)?;
                let pool = shlpt::pool::PromptPool::load(&pool_dir)?;
                let datasets = record.config.datasets()?;
                Some((backbone, pool, datasets))
            } else {
                None
            };
            let inputs = ReportInputs {
                transfer: matrix.as_ref(),
                results: &record.outcome.task_results,
                activation: loaded.as_ref().map(|(b, p, d)| (b, p, d.as_slice())),
            };
            let written = emit_reports(&inputs, &run_dir.join("reports"))?;
            for p in &written {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
    }
}

fn exit_code_for(err: &Error) -> ExitCode {
    match err {
        Error::Config(_)
        | Error::InvalidArgument { .. }
        | Error::Serde(_)
        | Error::NothingToResume(_)
        | Error::HashMismatch { .. }
        | Error::Locked(_)
        | Error::CorruptCheckpoint(_) => ExitCode::from(2),
        _ => ExitCode::from(3),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
