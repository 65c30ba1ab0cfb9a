use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use dppo_core::cli::{dispatch, parse_seed_list, Command, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "dppo",
    version,
    about = "Diffusion policy pre-training and PPO fine-tuning on a 2D avoidance task"
)]
struct Cli {
    /// TOML run config; every key is optional.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Overrides `run.seed` (and DPPO_SEED).
    #[arg(long, global = true, value_name = "N", conflicts_with = "seeds")]
    seed: Option<u64>,

    /// Comma-separated seeds; runs once per seed under `<out>/seed_<n>/`.
    #[arg(long, global = true, value_name = "LIST")]
    seeds: Option<String>,

    /// Overrides `run.out` (and DPPO_OUT).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Cmd {
    /// Generate scripted demonstrations.
    GenDemos,
    /// Behavior-clone a policy on the demonstrations.
    Pretrain,
    /// Fine-tune a pre-trained checkpoint, including configured sweeps.
    Finetune,
    /// Evaluate a checkpoint or a scripted route.
    Eval,
    /// Render trajectory files to SVG.
    Plot,
    /// Aggregate fine-tuning logs.
    Report,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::GenDemos => Command::GenDemos,
            Cmd::Pretrain => Command::Pretrain,
            Cmd::Finetune => Command::Finetune,
            Cmd::Eval => Command::Eval,
            Cmd::Plot => Command::Plot,
            Cmd::Report => Command::Report,
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    cfg.apply_env(|k| std::env::var(k).ok())?;
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.run.out = o;
    }
    let seeds = cli.seeds.as_deref().map(parse_seed_list).transpose()?;
    dispatch(cli.command.into(), &cfg, seeds.as_deref())?;
    Ok(())
}

/// One JSON object on stderr: `{"error":{"kind":..,"message":..}}`.
fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({"error": {"kind": kind, "message": message}}).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            eprintln!(
                "{}",
                error_line(
                    "usage",
                    msg.lines()
                        .next()
                        .unwrap_or_default()
                        .trim_start_matches("error: ")
                )
            );
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| c.downcast_ref::<dppo_core::Error>())
                .map_or("internal", |c| c.kind());
            eprintln!("{}", error_line(kind, &format!("{e:#}")));
            ExitCode::from(if kind == "config" { 2 } else { 1 })
        }
    }
}
