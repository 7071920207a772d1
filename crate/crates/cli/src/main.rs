use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hipandas_cli::commands::{
    cmd_energy_curve, cmd_evaluate, cmd_experiment, cmd_make_phantom, cmd_restore, cmd_simulate,
};
use hipandas_cli::config::ExperimentConfig;
use hipandas_cli::phantom::PhantomSpec;
use hipandas_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "hipandas", version, about = "Zero-shot joint pandenoising and pansharpening of hyperspectral images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Resampling ratio (overrides `scale`).
    #[arg(long)]
    scale: Option<usize>,
}

#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    stage1_epochs: Option<usize>,
    #[arg(long)]
    stage2_epochs: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a deterministic textured low-rank phantom cube.
    MakePhantom {
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 8)]
        bands: usize,
        #[arg(long, default_value_t = 3)]
        rank: usize,
        /// Texture seed.
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate noisy LR HS, HR PAN and LR PAN images from an HR cube.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Noise seed.
        #[arg(long)]
        seed: u64,
    },
    /// Run a zero-shot restoration.
    Restore {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainOverrides,
        /// Network initialization seed.
        #[arg(long)]
        seed: u64,
    },
    /// Compare an estimate against a reference cube.
    Evaluate {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long, default_value_t = 4)]
        scale: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Energy curves of clean and noisy detail maps.
    EnergyCurve {
        #[command(flatten)]
        common: Common,
        /// Pre-simulated noisy LR cube; simulated from the config otherwise.
        #[arg(long)]
        noisy: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the noise x ablation grid from the config.
    Experiment {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainOverrides,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load(common: &Common) -> CliResult<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.scale {
        cfg.scale = s;
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| CliError::Validation("no output directory: pass --out or set `out`".into()))?;
    cfg.out = Some(out.clone());
    Ok((cfg, out))
}

fn apply(cfg: &mut ExperimentConfig, t: &TrainOverrides) {
    if let Some(e) = t.stage1_epochs {
        cfg.train.stage1_epochs = e;
    }
    if let Some(e) = t.stage2_epochs {
        cfg.train.stage2_epochs = e;
    }
    if let Some(c) = t.channels {
        cfg.arch.channels = c;
    }
}

fn report(out: &Path) {
    eprintln!("wrote {}", out.display());
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::MakePhantom {
            height,
            width,
            bands,
            rank,
            seed,
            out,
        } => {
            let spec = PhantomSpec {
                height,
                width,
                bands,
                rank,
                seed,
            };
            cmd_make_phantom(&spec, &out)?;
            report(&out);
        }
        Command::Simulate { common, seed } => {
            let (cfg, out) = load(&common)?;
            cmd_simulate(&cfg, seed, &out)?;
            report(&out);
        }
        Command::Restore { common, train, seed } => {
            let (mut cfg, out) = load(&common)?;
            apply(&mut cfg, &train);
            let outcome = cmd_restore(&cfg, seed, &out)?;
            if let Some(m) = outcome.metrics {
                println!("{}", serde_json::to_string_pretty(&m)?);
            }
            report(&out);
        }
        Command::Evaluate {
            reference,
            estimate,
            scale,
            out,
        } => {
            let m = cmd_evaluate(&reference, &estimate, scale, out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Command::EnergyCurve { common, noisy, seed } => {
            let (cfg, out) = load(&common)?;
            for r in cmd_energy_curve(&cfg, noisy.as_deref(), seed, &out)? {
                println!("{}\t{:.6}\t{:.6}", r.k, r.clean, r.noisy);
            }
        }
        Command::Experiment { common, train, seed } => {
            let (mut cfg, out) = load(&common)?;
            apply(&mut cfg, &train);
            let rows = cmd_experiment(&cfg, seed, &out)?;
            print!("{}", hipandas_cli::commands::experiment_csv(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
