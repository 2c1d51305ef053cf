use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use svt_core::data::load_inputs;
use svt_core::harness::{
    check_gradients, emit_results_table, export_embeddings, read_checkpoint, run_ablation, run_experiment,
    ExperimentConfig, TableFormat, RESULTS_FILE,
};
use svt_core::metrics::RunResult;
use svt_core::params::count_parameters;
use svt_core::protocol::{load_dataset_manifest, Partition};

#[derive(Parser)]
#[command(name = "svt", version, about = "Semantic-visual pretraining and incremental evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the base session and evaluate every incremental session.
    Run {
        config: PathBuf,
        /// Run the λ = 0 / λ > 0 pair and tabulate both.
        #[arg(long)]
        ablation: bool,
    },
    /// Tabulate results files (or run directories).
    Table {
        #[arg(required = true)]
        results: Vec<PathBuf>,
        /// Row labels, comma separated; defaults to the config hashes.
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
        /// Row whose Avg. the improvement column is measured from.
        #[arg(long, default_value_t = 0)]
        reference: usize,
        #[arg(long, default_value = "markdown")]
        format: TableFormat,
    },
    /// Write test-set embeddings of the chosen classes as TSV.
    ExportEmbeddings {
        checkpoint: PathBuf,
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        classes: Vec<String>,
        #[arg(long, default_value = "embeddings.tsv")]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients of the losses.
    CheckGrads {
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        probes: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        /// Exit nonzero when any error exceeds this.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Print the parameter shape table and totals of a checkpoint.
    Params { checkpoint: PathBuf },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config, ablation } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            if ablation {
                let out = run_ablation(&cfg)?;
                print!("{}", out.table);
                println!("table: {}", out.table_path.display());
            } else {
                let out = run_experiment(&cfg)?;
                for m in &out.result.per_session {
                    println!("session {}: top1 {:.2} ({} classes, {} test)", m.session_index, m.top1, m.n_classes_seen, m.n_test);
                }
                println!("avg {:.2}", out.result.avg);
                println!("results: {}", out.dir.display());
            }
        }
        Command::Table {
            results,
            labels,
            reference,
            format,
        } => {
            let runs = results
                .iter()
                .map(|p| {
                    let path = if p.is_dir() { p.join(RESULTS_FILE) } else { p.clone() };
                    RunResult::read_json(&path).with_context(|| format!("reading {}", path.display()))
                })
                .collect::<Result<Vec<_>>>()?;
            let labels = if labels.is_empty() {
                runs.iter().map(|r| format!("{}-{}", r.config_hash, r.seed)).collect()
            } else {
                labels
            };
            print!("{}", emit_results_table(&runs, &labels, reference, format)?);
        }
        Command::ExportEmbeddings {
            checkpoint,
            manifest,
            classes,
            out,
        } => {
            let ckpt = read_checkpoint(&checkpoint)?;
            let manifest = load_dataset_manifest(&manifest)?;
            let vision = ckpt.config.model.vision;
            let inputs = load_inputs(&manifest, &vision.input)?;
            let candidates: Vec<usize> = (0..manifest.examples().len())
                .filter(|&i| manifest.example(i).partition == Partition::Test)
                .collect();
            let n = export_embeddings(&ckpt.params, &vision, &manifest, &inputs, &candidates, &classes, &out)?;
            println!("wrote {n} rows to {}", out.display());
        }
        Command::CheckGrads {
            config,
            probes,
            step,
            batch,
            tolerance,
        } => {
            if !(step > 0.0) {
                bail!("--step must be positive");
            }
            let cfg = ExperimentConfig::from_file(&config)?;
            let mut ok = true;
            for (name, report) in check_gradients(&cfg, probes, step, batch)? {
                let pass = report.max_relative_error < tolerance;
                ok &= pass;
                println!(
                    "{} {name}: max relative error {:.3e} at {}[{}] over {} probes",
                    if pass { "PASS" } else { "FAIL" },
                    report.max_relative_error,
                    report.worst_tensor,
                    report.worst_index,
                    report.probes
                );
            }
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Params { checkpoint } => {
            let ckpt = read_checkpoint(&checkpoint)?;
            for entry in ckpt.params.shape_table() {
                println!("{}\t{}x{}\t{}", entry.name, entry.shape[0], entry.shape[1], entry.numel());
            }
            let count = count_parameters(&ckpt.params);
            println!("total\t{}\t{:.4} MB", count.scalars, count.megabytes);
        }
    }
    Ok(ExitCode::SUCCESS)
}
