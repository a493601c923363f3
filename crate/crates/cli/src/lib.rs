//! The `eclf` command line: configuration, run directories and subcommands.

pub mod commands;
pub mod config;
pub mod runs;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use eclf_core::{EclfError, Result};

use crate::commands::{Context, Outcome};

#[derive(Debug, Parser)]
#[command(
    name = "eclf",
    version,
    about = "Explainable classification with a split-latent VAE",
    after_help = "Any configuration key can be set with --<section>.<key> <value>, e.g. --vae.beta 4.\n\
                  Sections: data, vae, heads, classifier, explain, sweep."
)]
pub struct Cli {
    /// Configuration file of `section.key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seeds data generation, training, the classifier and explanations.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root; defaults to $ECLF_OUT, then ./eclf-runs.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic leaf dataset (needs data.preset).
    GenData,
    /// Import a folder of `<class>/*.png` images.
    Ingest { folder: PathBuf },
    /// Train the VAE with its adversarial heads.
    TrainVae {
        #[arg(long)]
        data: Option<PathBuf>,
        /// `eclf` or `eclf-cs`; shorthand for --vae.mode.
        #[arg(long)]
        mode: Option<String>,
        /// Continue from a saved checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the final classifier on latent means.
    TrainCls {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        vae: Option<PathBuf>,
    },
    /// Explain test images: importance ranking, traversals and change masks.
    Explain {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long)]
        classifier: Option<PathBuf>,
        /// Test sample id or index; repeatable. Defaults to one image per class.
        #[arg(long)]
        query: Vec<String>,
    },
    /// Report accuracy, the KL decomposition and factor alignment.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long)]
        classifier: Option<PathBuf>,
        /// Also train and score the direct image classifier.
        #[arg(long)]
        baseline: bool,
    },
    /// Train over a grid of beta or latent sizes and seeds.
    Sweep {
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

/// Pulls `--section.key value` (or `--section.key=value`) pairs out of the arguments.
pub fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let key = a.strip_prefix("--").filter(|k| k.contains('.') && !k.starts_with('.'));
        match key {
            Some(k) => match k.split_once('=') {
                Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
                None => {
                    let v = it.next().ok_or_else(|| EclfError::config(k, "override needs a value"))?;
                    overrides.push((k.to_string(), v));
                }
            },
            None => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

/// Parses the command line and runs it. Usage errors come back as `Err(clap::Error)`.
pub fn run(args: Vec<String>) -> std::result::Result<Result<Outcome>, clap::Error> {
    let (rest, mut overrides) = match split_overrides(args) {
        Ok(x) => x,
        Err(e) => return Ok(Err(e)),
    };
    let cli = Cli::try_parse_from(rest)?;
    if let Command::TrainVae { mode: Some(m), .. } = &cli.command {
        overrides.push(("vae.mode".into(), m.clone()));
    }
    Ok(execute(cli, &overrides))
}

fn execute(cli: Cli, overrides: &[(String, String)]) -> Result<Outcome> {
    let cfg = config::parse_config(cli.config.as_deref(), None, overrides, cli.seed)?;
    let ctx = Context {
        cfg,
        root: runs::output_root(cli.out.as_deref()),
    };
    match &cli.command {
        Command::GenData => commands::gen_data(&ctx),
        Command::Ingest { folder } => commands::ingest(&ctx, folder),
        Command::TrainVae { data, resume, .. } => commands::train_vae(&ctx, data.as_deref(), resume.as_deref()),
        Command::TrainCls { data, vae } => commands::train_cls(&ctx, data.as_deref(), vae.as_deref()),
        Command::Explain { data, vae, classifier, query } => commands::explain_cmd(&ctx, data.as_deref(), vae.as_deref(), classifier.as_deref(), query),
        Command::Eval {
            data,
            vae,
            classifier,
            baseline,
        } => commands::eval(&ctx, data.as_deref(), vae.as_deref(), classifier.as_deref(), *baseline),
        Command::Sweep { data } => commands::sweep(&ctx, data.as_deref()),
    }
}
