mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use roiformer::checkpoint::Checkpoint;
use roiformer::Error;

use commands::Split;
use run_config::RunConfig;

#[derive(Parser)]
#[command(name = "roiformer", version, about = "Train and inspect the ROI time-series transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct DataArgs {
    /// Run config whose `[data]` paths are used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory holding `series/` and `phenotypic.tsv`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    series_dir: Option<PathBuf>,
    #[arg(long)]
    phenotypic: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        /// Config file; only its `[synthetic]` table is read.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_subjects: Option<usize>,
        #[arg(long)]
        t_full: Option<usize>,
        #[arg(long)]
        n_rois: Option<usize>,
        #[arg(long)]
        effect_size: Option<f64>,
    },
    /// Split, train, and write the best checkpoint with its history.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `data.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on center segments.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value = "all")]
        split: Split,
        /// Report file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write every post-softmax attention matrix for one subject.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        subject: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::NonFinite { .. } | Error::Diverged { .. } | Error::DegenerateMask { .. } => 3,
        _ => 2,
    }
}

fn load_config(path: Option<&PathBuf>) -> roiformer::Result<Option<RunConfig>> {
    path.map(|p| RunConfig::load(p)).transpose()
}

fn run(cli: Cli) -> roiformer::Result<()> {
    match cli.command {
        Command::Synth {
            config,
            out,
            seed,
            n_subjects,
            t_full,
            n_rois,
            effect_size,
        } => {
            let mut spec = load_config(config.as_ref())?.unwrap_or_default().synthetic;
            spec.seed = seed.unwrap_or(spec.seed);
            spec.n_subjects = n_subjects.unwrap_or(spec.n_subjects);
            spec.t_full = t_full.unwrap_or(spec.t_full);
            spec.n_rois = n_rois.unwrap_or(spec.n_rois);
            spec.effect_size = effect_size.unwrap_or(spec.effect_size);
            let subjects = commands::synth(&spec, &out)?;
            println!("wrote {} subjects to {}", subjects.len(), out.display());
        }
        Command::Train { config, out, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(out) = out {
                cfg.data.out_dir = out;
            }
            if let Some(seed) = seed {
                cfg.train.seed = seed;
            }
            let s = commands::train_run(&cfg)?;
            println!(
                "best epoch {} (val acc {:.4}); outputs in {}",
                s.best_epoch,
                s.validation.acc,
                s.out_dir.display()
            );
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = load_config(data.config.as_ref())?;
            let (series, pheno) = commands::data_paths(cfg.as_ref(), data.series_dir, data.phenotypic, data.data);
            let report = commands::eval(&ck, &series, &pheno, split, &out)?;
            print!("{}", report.to_tsv());
        }
        Command::ExportAttention {
            checkpoint,
            data,
            subject,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let cfg = load_config(data.config.as_ref())?;
            let (series, pheno) = commands::data_paths(cfg.as_ref(), data.series_dir, data.phenotypic, data.data);
            let files = commands::export_attention(&ck, &series, &pheno, &subject, &out)?;
            println!("wrote {} matrices to {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                Error::Config(msgs) => {
                    eprintln!("error: invalid configuration");
                    for m in msgs {
                        eprintln!("  {m}");
                    }
                }
                e => eprintln!("error: {e}"),
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
