mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Cross-lingual alignment experiments on a miniature dual encoder.
#[derive(Debug, Parser)]
#[command(name = "xlign", version, about)]
struct Cli {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Seed for the command's random streams; overrides the config.
    #[arg(long, global = true, env = "XLIGN_SEED", value_name = "U64")]
    seed: Option<u64>,

    /// Parallel sweep trials.
    #[arg(long, global = true, default_value_t = 1, value_name = "N")]
    jobs: usize,

    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus and image bank.
    GenCorpus,
    /// Pretrain (if configured) and fine-tune each language.
    Train,
    /// Evaluate without training, or evaluate saved per-language checkpoints.
    Eval {
        /// Directory holding `<lang>.json` checkpoints from `train`.
        #[arg(long, value_name = "DIR")]
        checkpoints: Option<PathBuf>,
    },
    /// Grid search over learning rate and alignment coefficient.
    Sweep,
    /// Finite-difference check of every loss/PEFT combination.
    Gradcheck,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let ctx = match commands::Context::load(cli.config.as_deref(), cli.seed, cli.jobs, cli.out, &cli.command) {
        Ok(ctx) => ctx,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let result = match &cli.command {
        Command::GenCorpus => commands::gen_corpus(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Eval { checkpoints } => commands::eval(&ctx, checkpoints.as_deref()),
        Command::Sweep => commands::sweep(&ctx),
        Command::Gradcheck => commands::gradcheck(&ctx),
    };
    match result {
        Ok(code) => code,
        Err(e) => commands::report_failure(&ctx, &e),
    }
}
