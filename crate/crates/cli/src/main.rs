//! `b2t`: run the recommendation pipeline from a JSON config.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use b2t_core::config::{RunConfig, ScorerKind};
use b2t_core::pipeline;
use b2t_core::Error;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "b2t", version, about = "Sequential recommendation by masked item-text prediction")]
struct Cli {
    /// JSON run config; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override paths.out_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the effective config and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-domain corpus.
    Synth,
    /// Load and k-core filter the corpus, reporting per-domain statistics.
    Ingest,
    /// Pretrain on the pretraining domains.
    Pretrain {
        /// Continue from the checkpoint, optimizer state and log in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Finetune on the target domain with early stopping.
    Finetune {
        /// Start from a fresh initialization instead of the pretrained checkpoint.
        #[arg(long)]
        from_scratch: bool,
    },
    /// Leave-one-out test evaluation.
    Eval {
        #[arg(long, value_enum)]
        scorer: Option<ScorerArg>,
    },
    /// Evaluate the pretrained model on a domain without tuning.
    Zeroshot {
        #[arg(long)]
        from_scratch: bool,
    },
    /// Rerank retriever candidates at each configured size.
    Rerank,
    /// Score each of the last withheld items separately.
    Robustness {
        #[arg(long)]
        from_scratch: bool,
    },
    /// Train and test every textualization variant.
    Ablate,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ScorerArg {
    Model,
    Popularity,
    Markov,
    Random,
}

impl From<ScorerArg> for ScorerKind {
    fn from(s: ScorerArg) -> Self {
        match s {
            ScorerArg::Model => ScorerKind::Model,
            ScorerArg::Popularity => ScorerKind::Popularity,
            ScorerArg::Markov => ScorerKind::Markov,
            ScorerArg::Random => ScorerKind::Random,
        }
    }
}

fn effective_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.out_dir = out.clone();
    }
    if let Some(Command::Eval { scorer: Some(s) }) = &cli.command {
        cfg.eval.scorer = (*s).into();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = effective_config(cli)?;
    if cli.print_config {
        print!("{}", cfg.to_json());
        return Ok(());
    }
    let Some(command) = &cli.command else {
        anyhow::bail!(Error::Config("no command given; see --help".into()));
    };
    match command {
        Command::Synth => emit(&pipeline::cmd_synth(&cfg)?),
        Command::Ingest => emit(&pipeline::cmd_ingest(&cfg)?),
        Command::Pretrain { resume } => emit(&pipeline::cmd_pretrain(&cfg, *resume)?),
        Command::Finetune { from_scratch } => emit(&pipeline::cmd_finetune(&cfg, *from_scratch)?),
        Command::Eval { .. } => emit(&pipeline::cmd_eval(&cfg)?),
        Command::Zeroshot { from_scratch } => emit(&pipeline::cmd_zeroshot(&cfg, *from_scratch)?),
        Command::Rerank => emit(&pipeline::cmd_rerank(&cfg)?),
        Command::Robustness { from_scratch } => emit(&pipeline::cmd_robustness(&cfg, *from_scratch)?),
        Command::Ablate => emit(&pipeline::cmd_ablate(&cfg)?),
    }
}

fn is_config_error(err: &anyhow::Error) -> bool {
    err.chain()
        .any(|e| matches!(e.downcast_ref::<Error>(), Some(Error::Config(_) | Error::UnknownAttribute(_))))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_config_error(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
