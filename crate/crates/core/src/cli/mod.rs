//! Command-line front end: argument parsing, run configuration and the
//! command implementations used by the `unvp` binary.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{
    cmd_eval, cmd_export_latents, cmd_grid, cmd_perturb, cmd_train, config_domains, exit_code, open_checkpoint,
    projection_matrix, DomainReport, GridRow, GridSpec, PerturbReport, TrainSummary,
};
pub use config::{BlobSettings, DatasetSpec, DigitSettings, RunConfig};

use crate::data::{generate_digit_corpus, import_idx, Dataset};
use crate::error::{Error, Result};
use crate::generalizer::Mode;

#[derive(Debug, Parser)]
#[command(name = "unvp", version, about = "Domain generalization with flow-based latent priors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every command that builds a run config. Flags win over
/// the config file.
#[derive(Debug, Default, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long = "K")]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// blobs, digits or file:PATH
    #[arg(long)]
    pub dataset: Option<DatasetSpec>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Extra `key=value` settings, as in the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        let t = &mut cfg.train;
        let g = &mut t.generalization;
        if let Some(v) = self.mode {
            t.mode = v;
        }
        if let Some(v) = self.alpha {
            g.alpha = v;
        }
        if let Some(v) = self.beta {
            g.beta = v;
        }
        if let Some(v) = self.rounds {
            g.rounds = v;
        }
        if let Some(v) = self.gamma {
            t.gamma = v;
        }
        if let Some(v) = self.lambda {
            t.lambda = v;
        }
        if let Some(v) = self.lr {
            t.learning_rate = v;
        }
        if let Some(v) = self.batch {
            t.batch_size = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = &self.dataset {
            cfg.dataset = v.clone();
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_values(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("'{v}': {e}")))
        .collect()
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, metrics and summary.
    Train(RunArgs),
    /// Accuracy and confusion counts of a checkpoint on its datasets.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate on this dataset container instead of the run's domains.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthesize hard samples for one class with a checkpoint's models.
    Perturb {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long, default_value_t = 32)]
        count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep lambda × alpha × beta on a base config.
    Grid {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = parse_values)]
        lambdas: Option<Vec<f64>>,
        #[arg(long, value_parser = parse_values)]
        alphas: Option<Vec<f64>>,
        #[arg(long, value_parser = parse_values)]
        betas: Option<Vec<f64>>,
    },
    /// Write 2-d latent scatter data for a checkpoint's datasets.
    ExportLatents {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a synthetic 28×28 digit corpus into a dataset container.
    GenDigits {
        #[arg(long, default_value_t = 6000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "data/digits.bin")]
        out: PathBuf,
    },
    /// Convert an IDX image/label pair into a dataset container.
    ImportIdx {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value = "data/digits.bin")]
        out: PathBuf,
    },
}

fn checkpoint_datasets(checkpoint: &std::path::Path, data: &Option<PathBuf>) -> Result<Vec<Dataset>> {
    match data {
        Some(p) => Ok(vec![Dataset::load(p)?]),
        None => config_domains(&open_checkpoint(checkpoint)?.1),
    }
}

fn default_out(checkpoint: &std::path::Path, out: &Option<PathBuf>) -> PathBuf {
    out.clone()
        .unwrap_or_else(|| checkpoint.parent().map(PathBuf::from).unwrap_or_default())
}

/// Runs one parsed command; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let s = cmd_train(&cfg)?;
            match &s.final_metrics {
                Some(m) => println!(
                    "{} after {} epochs: acc_src {:.4} acc_unseen {} pool {} nll {}",
                    s.mode,
                    s.epochs,
                    m.acc_src,
                    m.acc_unseen.map_or("-".into(), |v| format!("{v:.4}")),
                    m.pool_size,
                    m.nll.map_or("-".into(), |v| format!("{v:.4}")),
                ),
                None => println!("{}: no epochs run", s.mode),
            }
            println!("artifacts in {}", cfg.out.display());
            Ok(0)
        }
        Command::Eval { checkpoint, data, out } => {
            let datasets = checkpoint_datasets(&checkpoint, &data)?;
            for r in cmd_eval(&checkpoint, &datasets, &default_out(&checkpoint, &out))? {
                println!("{}: accuracy {:.4} over {} samples", r.domain, r.accuracy, r.samples);
                for (c, row) in r.confusion.counts.iter().enumerate() {
                    let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                    println!("  true {c}: {}", cells.join(" "));
                }
            }
            Ok(0)
        }
        Command::Perturb {
            checkpoint,
            class,
            count,
            out,
        } => {
            let (_, cfg) = open_checkpoint(&checkpoint)?;
            let (source, _) = cfg.load_domains()?;
            let r = cmd_perturb(&checkpoint, &source, class, count, &default_out(&checkpoint, &out))?;
            println!(
                "class {}: {} samples, mean displacement {:.6}, {} still classified correctly",
                r.class, r.samples, r.mean_displacement, r.still_correct
            );
            Ok(0)
        }
        Command::Grid {
            run,
            lambdas,
            alphas,
            betas,
        } => {
            let cfg = run.resolve()?;
            let mut spec = GridSpec::default();
            if let Some(v) = lambdas {
                spec.lambdas = v;
            }
            if let Some(v) = alphas {
                spec.alphas = v;
            }
            if let Some(v) = betas {
                spec.betas = v;
            }
            let rows = cmd_grid(&cfg, &spec)?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            println!(
                "{} cells, {failed} failed; table in {}",
                rows.len(),
                cfg.out.join(commands::GRID_FILE).display()
            );
            Ok(if failed > 0 { 1 } else { 0 })
        }
        Command::ExportLatents { checkpoint, data, out } => {
            let datasets = checkpoint_datasets(&checkpoint, &data)?;
            let path = cmd_export_latents(&checkpoint, &datasets, &default_out(&checkpoint, &out))?;
            println!("wrote {}", path.display());
            Ok(0)
        }
        Command::GenDigits { count, seed, out } => {
            generate_digit_corpus(count, seed)?.save(&out)?;
            println!("wrote {count} digits to {}", out.display());
            Ok(0)
        }
        Command::ImportIdx { images, labels, out } => {
            let d = import_idx(&images, &labels)?;
            d.save(&out)?;
            println!("wrote {} samples to {}", d.len(), out.display());
            Ok(0)
        }
    }
}
