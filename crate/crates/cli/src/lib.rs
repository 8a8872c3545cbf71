//! Pipeline runner for phone-to-studio texture translation: config files,
//! run manifests, the eight stages, ablations and reports.

pub mod ablate;
pub mod config;
pub mod error;
pub mod manifest;
pub mod stages;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::ablate::{run_ablations, AblationName};
use crate::config::RunConfig;
use crate::error::CliResult;
use crate::manifest::Run;

pub const DATA_DIR_ENV: &str = "TEXBRIDGE_DATA_DIR";

#[derive(Debug, Parser)]
#[command(name = "texbridge", version, about = "Phone-to-studio texture translation pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration; embedded defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "runs/default")]
    pub out: PathBuf,
    /// `key=value` with a TOML literal value, e.g. `finetune.steps=50`.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Rerun stages even when their recorded outputs are up to date.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic phone and studio texture corpus.
    GenData,
    /// Train the phone generator and the identity embedder.
    PretrainPhone,
    /// Invert phone textures into W+ latents.
    Invert,
    /// Finetune the phone generator into the studio domain.
    FinetuneStudio,
    /// Train the residual-shifting super-resolution denoiser.
    TrainDiffusion,
    /// Produce studio textures for every held-out phone texture.
    Infer,
    /// Fit per-tile gain and bias and relight the outputs.
    FitColorxform,
    /// Write paired and unpaired metric reports.
    Evaluate,
    /// Every stage in order.
    Run,
    /// Ablation studies on top of a run directory that finished finetuning.
    Ablate {
        /// Defaults to all five.
        #[arg(long, value_enum)]
        spec: Vec<AblationName>,
    },
    /// Print the default configuration.
    Defaults,
}

impl Command {
    fn stage(&self) -> Option<&'static str> {
        Some(match self {
            Command::GenData => "gen_data",
            Command::PretrainPhone => "pretrain_phone",
            Command::Invert => "invert",
            Command::FinetuneStudio => "finetune_studio",
            Command::TrainDiffusion => "train_diffusion",
            Command::Infer => "infer",
            Command::FitColorxform => "fit_colorxform",
            Command::Evaluate => "evaluate",
            _ => return None,
        })
    }
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    if let Command::Defaults = cli.command {
        print!("{}", RunConfig::defaults_toml());
        return Ok(());
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), cli.seed, &cli.overrides)?;
    let data_root = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
    let mut run = Run::open(cfg, &cli.out, data_root.as_deref())?;
    run.save()?;
    match &cli.command {
        Command::Run => stages::run_all(&mut run, cli.force),
        Command::Ablate { spec } => {
            let names = if spec.is_empty() { AblationName::ALL.to_vec() } else { spec.clone() };
            for r in run_ablations(&run, &names)? {
                for c in &r.checks {
                    println!("{} | {} | {}", r.name.as_str(), if c.pass { "pass" } else { "FAIL" }, c.name);
                }
            }
            Ok(())
        }
        c => stages::run_stage(&mut run, c.stage().expect("stage command"), cli.force).map(|_| ()),
    }
}
