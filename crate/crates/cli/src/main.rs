mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "msatr",
    version,
    about = "Low-light image enhancement with a multi-scale window attention transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator and write checkpoints plus a TSV step log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override a config value, e.g. `--set total_steps=20`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Enhance images; outputs are written as PPM into the output directory.
    Enhance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in", value_name = "IMAGE", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score enhanced low-light images against same-named references.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        low: PathBuf,
        #[arg(long = "ref", value_name = "DIR")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also record luminance and saturation over this many repeated
        /// enhancements per image.
        #[arg(long, default_value_t = 0)]
        passes: usize,
    },
    /// Write the random-region mixture of a low-light and an enhanced image.
    Mix {
        #[arg(long)]
        low: PathBuf,
        #[arg(long)]
        enh: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run gradient checks and numerical oracles.
    Selfcheck {
        /// Add a check with a deliberately broken backward rule.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Print the resolved configuration with every key.
    Config {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn resolve(config: Option<&PathBuf>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in overrides {
        cfg.apply_override(kv)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            set,
            resume,
        } => {
            let cfg = resolve(Some(&config), &set)?;
            let path = commands::train(&cfg, &out, resume.as_deref())?;
            println!("wrote {}", path.display());
        }
        Command::Enhance { ckpt, inputs, out } => {
            commands::enhance(&ckpt, &inputs, &out)?;
        }
        Command::Eval {
            ckpt,
            low,
            reference,
            out,
            passes,
        } => {
            let report = commands::eval(&ckpt, &low, &reference, &out, passes)?;
            let tsv = report.to_tsv();
            if let Some(summary) = tsv.lines().find(|l| l.starts_with("# mean")) {
                println!("{summary}");
            }
        }
        Command::Mix { low, enh, seed, out } => {
            let m = commands::mix(&low, &enh, seed, &out)?;
            let r = m.region;
            println!(
                "region top={} left={} height={} width={} alpha={:.6}",
                r.top, r.left, r.height, r.width, m.alpha
            );
        }
        Command::Selfcheck { inject_fault } => commands::selfcheck(inject_fault)?,
        Command::Config { config, set } => print!("{}", resolve(config.as_ref(), &set)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { exit::OK });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code_for(&e))
        }
    }
}
