//! `restoriqa`: run the pipeline stage by stage under a run directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use restoriqa::config::RunConfig;
use restoriqa::pipeline::{stages, AblationAxis, RunLayout};
use restoriqa::Error;

const RUN_ROOT_ENV: &str = "RESTORIQA_RUN_ROOT";

#[derive(Parser)]
#[command(name = "restoriqa", version, about = "Restoration-guided image quality assessment")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the run directory from the config.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,

    /// Override the seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and the reference-disjoint split.
    GenCorpus,
    /// Train the conditional denoiser on the training split.
    TrainDiffusion,
    /// Restore every corpus image and write the snapshots as PNG.
    Restore,
    /// Train the quality model on the restored corpus.
    TrainIqa,
    /// Score the held-out split and write the evaluation report.
    Eval,
    /// Predict the quality of one image.
    Score {
        #[arg(long)]
        image: PathBuf,
    },
    /// Run one ablation study and write its CSV.
    Ablate {
        #[arg(long)]
        axis: AblationAxis,
    },
    /// Every stage from corpus generation to evaluation.
    Run,
    /// Print the effective configuration.
    Config {
        /// Print as TOML (the only format).
        #[arg(long)]
        dump: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::SplitLeak(_) => 2,
        Error::MissingArtifact(_) => 3,
        Error::NonFinite { .. } | Error::UndefinedCorrelation(_) => 4,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> restoriqa::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) if !p.exists() => return Err(Error::Config(format!("config file {} not found", p.display()))),
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = &cli.run_dir {
        cfg.run_dir = dir.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_root(cfg: &RunConfig) -> PathBuf {
    match std::env::var_os(RUN_ROOT_ENV) {
        Some(root) if cfg.run_dir.is_relative() => Path::new(&root).join(&cfg.run_dir),
        _ => cfg.run_dir.clone(),
    }
}

fn run(cli: &Cli) -> restoriqa::Result<()> {
    let cfg = load_config(cli)?;
    let run = RunLayout::new(run_root(&cfg));
    match &cli.command {
        Command::GenCorpus => {
            let n = stages::gen_corpus(&cfg, &run)?;
            println!("wrote {n} samples to {}", run.corpus_dir().display());
        }
        Command::TrainDiffusion => {
            let losses = stages::train_diffusion(&cfg, &run)?;
            if let Some(last) = losses.last() {
                println!("trained {} steps, final loss {last:.6}", losses.len());
            }
        }
        Command::Restore => {
            let n = stages::restore(&cfg, &run)?;
            println!("restored {n} images into {}", run.restored_dir().display());
        }
        Command::TrainIqa => {
            let curve = stages::train_iqa(&cfg, &run)?;
            if let Some(last) = curve.last() {
                println!("trained {} epochs, final loss {last:.6}", curve.len());
            }
        }
        Command::Eval => {
            let report = stages::eval(&cfg, &run)?;
            println!("srcc {:.4} plcc {:.4} over {} pairs", report.srcc, report.plcc, report.pairs.len());
        }
        Command::Score { image } => {
            let s = stages::score(&cfg, &run, image)?;
            println!("score1 {:.6} score2 {:.6} final {:.6}", s.score1, s.score2, s.final_score);
        }
        Command::Ablate { axis } => {
            for r in stages::ablate(&cfg, &run, *axis)? {
                println!("{:<40} srcc {:.4} plcc {:.4}", r.row, r.srcc, r.plcc);
            }
        }
        Command::Run => {
            stages::gen_corpus(&cfg, &run)?;
            if cfg.toggles.diffusion {
                stages::train_diffusion(&cfg, &run)?;
                stages::restore(&cfg, &run)?;
            }
            stages::train_iqa(&cfg, &run)?;
            let report = stages::eval(&cfg, &run)?;
            println!("srcc {:.4} plcc {:.4} over {} pairs", report.srcc, report.plcc, report.pairs.len());
        }
        Command::Config { .. } => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
