//! Command-line harness: corpus synthesis, training, decoding, sweeps and
//! reports. [`run`] takes the argument list so tests can drive it in-process.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod report;
pub mod svg;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use scones_core::exec::{init_threads, Exec};
use scones_core::losses::Head;

use crate::commands::Ctx;
use crate::config::{ExperimentConfig, ModeName};
pub use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "scones", version, about = "Sigmoid vs softmax output layers for translation: experiments")]
pub struct Cli {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; 1 runs everything sequentially, 0 uses all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample synthetic parallel corpora for every configured temperature.
    SampleData,
    /// Train one model on a corpus directory.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        head: Option<String>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Translate a file with a trained model.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// greedy, beam or exact.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        max_states: Option<u64>,
    },
    /// Corpus BLEU of a hypothesis file, optionally bootstrapped against a second one.
    Evaluate {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp_b: Option<PathBuf>,
    },
    /// BLEU, log-probability and search errors across beam sizes.
    SweepBeam {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Train and evaluate one model per alpha (plus softmax) on one corpus.
    SweepAlpha {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Tables and plots from every CSV under a run directory.
    Report { run: Option<PathBuf> },
}

fn parse_head(s: &str) -> Result<Head> {
    s.parse().map_err(|e: scones_core::losses::LossError| CliError::Config(e.to_string()))
}

fn parse_mode(s: &str) -> Result<ModeName> {
    match s {
        "greedy" => Ok(ModeName::Greedy),
        "beam" => Ok(ModeName::Beam),
        "exact" => Ok(ModeName::Exact),
        _ => Err(CliError::Config(format!("unknown decode mode {s:?}"))),
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => match e.kind() {
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                print!("{e}");
                return Ok(());
            }
            _ => return Err(CliError::Config(e.to_string())),
        },
    };
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    match &cli.command {
        Command::Train { head, alpha, lambda, .. } => {
            if let Some(h) = head {
                cfg.loss.head = parse_head(h)?;
            }
            if let Some(a) = alpha {
                cfg.loss.alpha = *a;
            }
            if let Some(l) = lambda {
                cfg.loss.lambda = *l;
            }
        }
        Command::Decode {
            mode,
            beam,
            max_len,
            max_states,
            ..
        } => {
            if let Some(m) = mode {
                cfg.decode.mode = parse_mode(m)?;
            }
            if let Some(b) = beam {
                cfg.decode.beam_size = *b;
            }
            if max_len.is_some() {
                cfg.decode.max_len = *max_len;
            }
            if let Some(s) = max_states {
                cfg.decode.max_states = *s;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    let threads = cli.threads.unwrap_or(0);
    init_threads(threads);
    let ctx = Ctx {
        out: cli.out.clone().or_else(|| cfg.out_dir.clone()),
        cfg,
        exec: Exec::from_threads(threads),
    };
    match cli.command {
        Command::SampleData => commands::sample_data(&ctx),
        Command::Train { data, .. } => commands::train(&ctx, data),
        Command::Decode { model, input, .. } => commands::decode(&ctx, &model, &input),
        Command::Evaluate { hyp, reference, hyp_b } => commands::evaluate(&ctx, &hyp, &reference, hyp_b.as_deref()),
        Command::SweepBeam { model, input, reference } => commands::sweep_beam(&ctx, &model, &input, &reference),
        Command::SweepAlpha { data } => commands::sweep_alpha(&ctx, data),
        Command::Report { run } => report::report(&ctx, run),
    }
}
