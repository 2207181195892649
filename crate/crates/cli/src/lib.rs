//! Command-line driver: simulate, train, reconstruct, evaluate and gradcheck.

pub mod checks;
pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{
    cmd_evaluate, cmd_gradcheck, cmd_reconstruct, cmd_simulate, cmd_train, ReconIndex, ReconOptions, ReconRun,
    TrainFlags,
};
pub use config::{EvaluationConfig, ExperimentConfig, Method, CONFIG_VERSION};
pub use error::{CliError, CliResult, EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION};

use commands::require_out;

#[derive(Debug, Parser)]
#[command(name = "convlr", version, about = "Recurrent radial MRI reconstruction for interventional sequences")]
pub struct Cli {
    /// Experiment configuration (JSON); built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the dataset seed (simulate) or the training seed (train).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "CONVLR_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with k-space at every configured spoke count.
    Simulate,
    /// Train the recurrent network on the dataset's training split.
    Train(TrainArgs),
    /// Reconstruct a dataset split with one method.
    Reconstruct(ReconstructArgs),
    /// Score reconstructions against the ground truth.
    Evaluate(EvaluateArgs),
    /// Run finite-difference checks over every op and composed block.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Zero the Conv-LSTM output (masked ablation).
    #[arg(long)]
    pub mask_lstm: bool,
    #[arg(long)]
    pub no_discriminator: bool,
    /// Start the recurrent states at zero instead of from the reference image.
    #[arg(long)]
    pub no_initializer: bool,
    #[arg(long)]
    pub spokes: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = Method::Convlr)]
    pub method: Method,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Spoke counts; defaults to the evaluation sweep.
    #[arg(long, num_args = 1..)]
    pub spokes: Vec<usize>,
    /// Frame counts; defaults to the evaluation sweep.
    #[arg(long, num_args = 1..)]
    pub frames: Vec<usize>,
    #[arg(long)]
    pub split: Option<String>,
    /// Method name used in reports.
    #[arg(long)]
    pub label: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Directories written by `reconstruct`.
    #[arg(long, num_args = 1.., required = true)]
    pub recon: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Corrupt the sigmoid backward pass to confirm the checks catch it.
    #[arg(long)]
    pub sabotage: bool,
    #[arg(long, default_value_t = checks::DEFAULT_EPS)]
    pub eps: f64,
    #[arg(long, default_value_t = checks::DEFAULT_TOLERANCE)]
    pub tolerance: f64,
}

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    Ok(cfg)
}

fn set_threads(n: Option<usize>) -> CliResult<()> {
    if let Some(n) = n {
        if n == 0 {
            return Err(CliError::Validation("--threads must be at least 1".into()));
        }
        // A pool may already exist when called repeatedly in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Executes one parsed command line, printing a short summary to stdout.
pub fn run(cli: Cli) -> CliResult<()> {
    set_threads(cli.threads)?;
    let mut cfg = load_config(&cli)?;
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Simulate => {
            if let Some(s) = cli.seed {
                cfg.dataset.seed = s;
            }
            cfg.validate()?;
            let out = require_out(out)?;
            let m = cmd_simulate(&cfg, &out)?;
            for s in &m.splits {
                println!("{:<5} {:>5} sequences from seed {}", s.name, s.count, s.seed_start);
            }
            println!(
                "{}x{} images, {} frames, spokes {:?} -> {}",
                m.size,
                m.size,
                m.frames,
                m.spokes,
                out.display()
            );
        }
        Command::Train(a) => {
            if let Some(s) = cli.seed {
                cfg.training.seed = s;
            }
            if let Some(s) = a.spokes {
                cfg.training.spokes = s;
            }
            if let Some(s) = a.steps {
                cfg.training.steps = s;
            }
            TrainFlags {
                mask_lstm: a.mask_lstm,
                no_discriminator: a.no_discriminator,
                no_initializer: a.no_initializer,
            }
            .apply(&mut cfg);
            let out = require_out(out)?;
            let o = cmd_train(&cfg, &a.dataset, &out)?;
            println!(
                "trained {} steps{} final loss {:.6} -> {}",
                o.steps_run,
                if o.stopped_early { " (early stop)" } else { "" },
                o.final_loss,
                o.checkpoint.display()
            );
        }
        Command::Reconstruct(a) => {
            let out = require_out(out)?;
            let opts = ReconOptions {
                method: a.method,
                checkpoint: a.checkpoint.clone(),
                spokes: if a.spokes.is_empty() { cfg.evaluation.spokes.clone() } else { a.spokes.clone() },
                frames: if a.frames.is_empty() { cfg.evaluation.frames.clone() } else { a.frames.clone() },
                split: a.split.clone().unwrap_or_else(|| cfg.evaluation.split.clone()),
                label: a.label.clone(),
            };
            let idx = cmd_reconstruct(&cfg, &a.dataset, &out, &opts)?;
            for r in &idx.runs {
                println!("{} {} spokes, {} frames: {} sequences", idx.label, r.spokes, r.frames, r.sequences.len());
            }
        }
        Command::Evaluate(a) => {
            let out = require_out(out)?;
            let report = cmd_evaluate(&cfg, &a.dataset, &a.recon, &out)?;
            print!("{}", report.to_csv());
        }
        Command::Gradcheck(a) => {
            let results = cmd_gradcheck(a.sabotage, a.eps, a.tolerance, out)?;
            for r in &results {
                println!("{}", r.line());
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            println!("{} checks, {} failed", results.len(), failed);
            if failed > 0 {
                return Err(CliError::Runtime(anyhow::anyhow!("{failed} gradient checks failed")));
            }
        }
    }
    Ok(())
}
