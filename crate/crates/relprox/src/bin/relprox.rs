use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use relprox::commands::{self, Overrides, TrainOptions};
use relprox::CliError;

/// Relational proxy loss experiments on a synthetic keyword corpus.
#[derive(Parser)]
#[command(name = "relprox", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training seed, overriding `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    /// Deterministic mode (on unless `--deterministic=false`).
    #[arg(long, num_args = 0..=1, default_missing_value = "true", action = ArgAction::Set)]
    deterministic: Option<bool>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData(Common),
    /// Check every analytic gradient against finite differences.
    Gradcheck(Common),
    /// Train and write checkpoints and the metrics log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Train without first passing the gradient check.
        #[arg(long)]
        skip_gradcheck: bool,
    },
    /// Score a checkpoint on a split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to score; defaults to the latest one under the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train and score every ablation row over shared seeds.
    Ablate(Common),
}

fn overrides(c: &Common) -> Overrides {
    Overrides { out_dir: c.out.clone(), seed: c.seed, deterministic: c.deterministic }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut log = |m: &str| eprintln!("{m}");
    match cli.command {
        Command::GenData(c) => {
            let cfg = commands::load_config(&c.config, &overrides(&c))?;
            let dir = commands::gen_data(&cfg, c.force)?;
            println!("corpus written to {}", dir.display());
        }
        Command::Gradcheck(c) => {
            let cfg = commands::load_config(&c.config, &overrides(&c))?;
            match commands::gradcheck(&cfg) {
                Ok(report) => report.lines().iter().for_each(|l| println!("{l}")),
                Err(e) => {
                    if let Ok(text) = std::fs::read_to_string(cfg.out_dir.join("gradcheck.txt")) {
                        print!("{text}");
                    }
                    return Err(e);
                }
            }
        }
        Command::Train { common, resume, skip_gradcheck } => {
            let cfg = commands::load_config(&common.config, &overrides(&common))?;
            let opts = TrainOptions { force: common.force, resume, skip_gradcheck };
            let state = commands::train(&cfg, &opts, &mut log)?;
            println!("trained {} epochs ({} steps); outputs in {}", state.epoch, state.step, cfg.out_dir.display());
        }
        Command::Eval { common, checkpoint, split } => {
            let cfg = commands::load_config(&common.config, &overrides(&common))?;
            let split = commands::parse_split(&split)?;
            let out = commands::eval(&cfg, checkpoint.as_deref(), split)?;
            let r = out.report;
            println!(
                "{} split, epoch {}: EER {:.2}% AP {:.2}% ({} positive / {} negative pairs{})",
                split.as_str(),
                out.epoch,
                100.0 * r.eer,
                100.0 * r.ap,
                r.n_pos,
                r.n_neg,
                if r.sampled_with_replacement { ", sampled with replacement" } else { "" }
            );
        }
        Command::Ablate(c) => {
            let cfg = commands::load_config(&c.config, &overrides(&c))?;
            let out = commands::ablate(&cfg, &mut log)?;
            print!("{}", out.table);
            if !out.passed() {
                return Err(CliError::Check("directional checks failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
