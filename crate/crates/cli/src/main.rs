use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use htcl_cli::commands::{analyze_cmd, eval_cmd, finetune_cmd, gen_data, pretrain_cmd};
use htcl_cli::config::parse_config;
use htcl_cli::exit_code;
use htcl_core::train::Ablation;
use htcl_core::HtclError;

#[derive(Parser)]
#[command(name = "htcl", version, about = "Two-stage contrastive music representations")]
struct Cli {
    /// TOML configuration file; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set model.loss.temperature=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    None,
    #[value(name = "cf_pairs")]
    CfPairs,
    #[value(name = "no_text")]
    NoText,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Single,
    Compare,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and preference data.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: audio/text contrastive pre-training.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: preference fine-tuning from a stage-1 checkpoint.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        ablation: Option<AblationArg>,
    },
    /// Probe accuracy, matching hit rate and ranking AUC for a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Cosine-score distributions of anchor/positive and anchor/negative pairs.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Directory holding analysis_positive.tsv and analysis_negative.tsv.
        #[arg(long)]
        pairs: PathBuf,
        /// Corpus directory; defaults to the parent of --pairs.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "single")]
        mode: Mode,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = parse_config(cli.config.as_deref(), &cli.overrides).context("resolving configuration")?;
    match cli.command {
        Command::GenData { out } => gen_data(&cfg, &out).context("gen-data"),
        Command::Pretrain { data, out } => pretrain_cmd(&cfg, &data, &out).context("pretrain"),
        Command::Finetune {
            data,
            init,
            out,
            ablation,
        } => {
            let ablation = ablation.map(|a| match a {
                AblationArg::None => Ablation::None,
                AblationArg::CfPairs => Ablation::CfPairs,
                AblationArg::NoText => Ablation::NoText,
            });
            finetune_cmd(&cfg, &data, &init, &out, ablation).context("finetune")
        }
        Command::Eval {
            checkpoint,
            data,
            report,
        } => {
            let checkpoint = checkpoint
                .ok_or_else(|| HtclError::config("checkpoint", "eval needs --checkpoint"))
                .context("eval")?;
            eval_cmd(&cfg, &checkpoint, &data, &report).context("eval")
        }
        Command::Analyze {
            checkpoint,
            baseline,
            pairs,
            data,
            out,
            mode,
        } => {
            if mode == Mode::Compare && baseline.is_none() {
                return Err(HtclError::config("baseline", "--mode compare needs --baseline")).context("analyze");
            }
            let data = match data {
                Some(d) => d,
                None => pairs
                    .parent()
                    .map(PathBuf::from)
                    .ok_or_else(|| HtclError::config("data", "cannot infer the corpus directory from --pairs"))?,
            };
            analyze_cmd(&cfg, &checkpoint, baseline.as_deref(), &pairs, &data, &out).context("analyze")
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
