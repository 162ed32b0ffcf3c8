use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use quanv_cli::commands;
use quanv_cli::{CliError, CliResult, ExperimentConfig};

#[derive(Parser)]
#[command(name = "quanv", version, about = "Quanvolutional network experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare the simulated two-qubit circuit with its closed form.
    ValidateAppendix {
        /// θ points per β over [0, 2π].
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the filter bank over the split and write feature CSVs.
    PrecomputeFeatures(Experiment),
    /// Train CNN and/or QNN replicas and write metrics.
    Train(Experiment),
    /// Generate or split datasets.
    #[command(subcommand)]
    Dataset(DatasetCommand),
}

#[derive(Args)]
struct Experiment {
    /// key = value config file; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// exact | shots
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    shots: Option<u64>,
    /// Distinct blocks to simulate, or `all`.
    #[arg(long)]
    budget: Option<String>,
    #[arg(long)]
    replicas: Option<usize>,
}

impl Experiment {
    fn resolve(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        let overrides = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("mode", self.mode.clone()),
            ("shots", self.shots.map(|v| v.to_string())),
            ("budget", self.budget.clone()),
            ("replicas", self.replicas.map(|v| v.to_string())),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.set(key, &v, Path::new("."))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Write a synthetic 4-class dataset.
    Gen {
        #[arg(long, default_value_t = 125)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV, gzip-compressed when it ends in `.gz`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a dataset into train.csv and test.csv.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        train: usize,
        #[arg(long)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::ValidateAppendix { resolution, out } => {
            let rows = commands::validate_appendix(resolution, &out)?;
            let worst = rows.iter().map(|r| r.abs_delta).fold(0.0, f64::max);
            println!("{} points within {:e} (worst {worst:e})", rows.len(), commands::APPENDIX_TOLERANCE);
        }
        Command::PrecomputeFeatures(exp) => {
            let cfg = exp.resolve()?;
            let s = commands::precompute_features(&cfg, &exp.out)?;
            println!(
                "{} images, {} blocks: {} simulated, {} exact, {} mapped",
                s.images, s.blocks, s.evaluations, s.exact_blocks, s.mapped_blocks
            );
        }
        Command::Train(exp) => {
            let cfg = exp.resolve()?;
            for s in commands::train(&cfg, &exp.out)? {
                println!(
                    "{}: final mean test accuracy {:.4} over {} replicas after {} iterations",
                    s.model_kind,
                    s.final_accuracy(),
                    s.replicas.len(),
                    s.final_iteration()
                );
            }
        }
        Command::Dataset(DatasetCommand::Gen { per_class, seed, out }) => {
            let ds = commands::dataset_gen(per_class, seed, &out)?;
            println!("{} rows ({}) -> {}", ds.len(), commands::histogram_line(&ds), out.display());
        }
        Command::Dataset(DatasetCommand::Split { input, train, test, seed, out }) => {
            let (tr, te) = commands::dataset_split(&input, train, test, seed, &out)?;
            println!("train {} ({}), test {} ({})", tr.len(), commands::histogram_line(&tr), te.len(), commands::histogram_line(&te));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &CliError) -> u8 {
    e.exit_code()
}
