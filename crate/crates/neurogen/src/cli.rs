//! Command-line front end.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use neurogen_core::metrics::fmt3;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pipeline::{self, Run};
use crate::synth::{write_synthetic, SynthSpec};

#[derive(Debug, Parser)]
#[command(name = "neurogen", version, about = "Image-conditioned diffusion generation of M/EEG signals")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the configuration against its files and print the parameter count.
    Validate,
    /// Train one model per subject.
    Train,
    /// Sample the configured split with each subject's final checkpoint.
    Generate,
    /// Per-subject MSE / PCC of generated against target signals.
    EvalWithin,
    /// Every subject's model against every other subject's targets.
    EvalCross,
    /// Train and evaluate once per fusion mode.
    CompareFusion,
    /// Render train / test / generated / difference topographies.
    Topo,
    /// Write a deterministic synthetic archive, embeddings, montage and config.
    SynthData(SynthArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value = "synthetic")]
    pub out: PathBuf,
    /// Trials per subject.
    #[arg(long, default_value_t = 32)]
    pub trials: usize,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    #[arg(long, default_value_t = 32)]
    pub timepoints: usize,
    #[arg(long, default_value_t = 2)]
    pub subjects: usize,
    /// Distinct images (default: a quarter of the trials, at least 2).
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long, default_value_t = 768)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 250.0)]
    pub rate: f64,
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
}

fn open_run(cli: &Cli) -> Result<Run> {
    Run::open(RunConfig::load(cli.config.as_deref(), &cli.set)?)
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::SynthData(a) => {
            let spec = SynthSpec {
                trials: a.trials,
                channels: a.channels,
                timepoints: a.timepoints,
                subjects: a.subjects,
                images: a.images,
                dim: a.dim,
                seed: a.seed,
                sampling_rate_hz: a.rate,
                noise: a.noise,
            };
            let out = write_synthetic(&a.out, &spec)?;
            println!("archive: {}", out.archive.display());
            println!("embeddings: {}", out.embeddings.display());
            println!("montage: {}", out.montage.display());
            println!("config: {}", out.config.display());
        }
        Command::Validate => {
            let run = open_run(&cli)?;
            run.archive.verify_values()?;
            let m = run.archive.manifest();
            println!("dataset: {} ({} trials, {}×{} at {} Hz)", m.dataset_id, run.archive.len(), m.n_channels, m.n_timepoints, m.sampling_rate_hz);
            println!("subjects: {}", run.subjects().join(", "));
            println!("parameters: {}", run.cfg.model.parameter_count());
        }
        Command::Train => {
            let run = open_run(&cli)?;
            run.write_snapshot()?;
            for o in pipeline::train(&run)? {
                println!("{}: {} epochs, {} steps, final loss {:.6}, best {:.6}", o.subject, o.epochs, o.steps, o.final_loss, o.best_loss);
            }
        }
        Command::Generate => {
            let run = open_run(&cli)?;
            run.write_snapshot()?;
            let a = pipeline::generate(&run)?;
            println!("generated: {} ({} signals)", a.dir().display(), a.len());
        }
        Command::EvalWithin => {
            let run = open_run(&cli)?;
            run.write_snapshot()?;
            let r = pipeline::eval_within(&run)?;
            print!("{}", r.to_csv());
        }
        Command::EvalCross => {
            let run = open_run(&cli)?;
            run.write_snapshot()?;
            let (mse, _) = pipeline::eval_cross(&run)?;
            print!("{}", mse.to_csv());
        }
        Command::CompareFusion => {
            let run = open_run(&cli)?;
            run.write_snapshot()?;
            let t = pipeline::compare_fusion(&run)?;
            for (mode, r) in &t.rows {
                println!("{}: MSE {} PCC {}", mode.label(), fmt3(r.mse_average()), fmt3(r.pcc_average()));
            }
        }
        Command::Topo => {
            let run = open_run(&cli)?;
            run.write_snapshot()?;
            for p in pipeline::topo(&run)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

/// One JSON line for machines, then the human-readable message.
pub fn error_report(e: &Error) -> String {
    let line = serde_json::json!({ "error": e.kind(), "exit_code": e.exit_kind() as i32, "message": e.to_string() });
    format!("{line}\nneurogen: {e}")
}

/// Parses `args`, runs the command, and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let message = e.kind().to_string();
            eprintln!("{}", serde_json::json!({ "error": "usage", "exit_code": 2, "message": message }));
            eprint!("{e}");
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_report(&e));
            e.exit_kind() as i32
        }
    }
}
