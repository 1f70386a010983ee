use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use routefuse::commands;
use routefuse::Config;
use routefuse_core::config::Preset;
use routefuse_core::train::GradcheckOptions;

#[derive(Parser)]
#[command(name = "routefuse", version, about = "Weather-conditioned LiDAR/radar branch routing experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// Configuration file (`key = value` with `[section]` headers).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scale preset the configuration is layered over.
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    /// Seed override; see the subcommand help for what it seeds.
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: routefuse_core::Error| e.to_string())
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the train and test scene files. `--seed` sets `sim.seed`.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on `<data>/train.jsonl`. `--seed` sets `train.seed` and
    /// `model.init_seed`.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on `<data>/test.jsonl`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the resolved configuration and parameter groups, and with a
    /// dataset the routing weights per category.
    Inspect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient check per parameter group. `--seed` sets
    /// `sim.seed` and `model.init_seed`.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
}

fn load(c: &Common) -> Result<Config> {
    Config::load(c.config.as_deref(), c.preset)
}

fn run() -> Result<bool> {
    match Cli::parse().cmd {
        Cmd::GenData { common, out } => {
            let mut cfg = load(&common)?;
            if let Some(s) = common.seed {
                cfg.run.sim.seed = s;
            }
            let g = commands::gen_data(&cfg, &out)?;
            println!("wrote {} train scenes to {}", g.counts.0, g.train.display());
            println!("wrote {} test scenes to {}", g.counts.1, g.test.display());
        }
        Cmd::Train { common, data, out } => {
            let mut cfg = load(&common)?;
            if let Some(s) = common.seed {
                cfg.run.train.seed = s;
                cfg.run.model.init_seed = s;
            }
            let t = commands::train(&cfg, data.as_deref(), &out, true)?;
            let last = t.epochs.last().map_or(f64::NAN, |e| e.mean_loss.total);
            println!("final epoch loss {last:.6}; best epoch {}", t.best_epoch.map_or(0, |e| e + 1));
            println!("outputs in {}", out.display());
        }
        Cmd::Eval { common, data, ckpt, out } => {
            let cfg = load(&common)?;
            let e = commands::eval(&cfg, data.as_deref(), ckpt.as_deref(), &out)?;
            print!("{}", e.report.to_table());
            println!("routing report: {}", out.join(commands::ROUTING_REPORT).display());
        }
        Cmd::Inspect { common, data, ckpt, out } => {
            let cfg = load(&common)?;
            print!("{}", commands::inspect(&cfg, data.as_deref(), ckpt.as_deref(), out.as_deref())?);
        }
        Cmd::Gradcheck { common, tolerance } => {
            let mut cfg = load(&common)?;
            if let Some(s) = common.seed {
                cfg.run.sim.seed = s;
                cfg.run.model.init_seed = s;
            }
            let opts = GradcheckOptions { tolerance, seed: cfg.run.sim.seed, ..GradcheckOptions::default() };
            let groups = commands::gradcheck_cmd(&cfg, &opts)?;
            print!("{}", commands::gradcheck_table(&groups, tolerance));
            return Ok(groups.iter().all(|g| g.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
