use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dlfd_cli::config::ExperimentConfig;
use dlfd_cli::harness::{cmd_compare, cmd_generate, cmd_train, cmd_unlearn};
use dlfd_cli::{exit, exit_code};
use dlfd_core::unlearn::MethodKind;
use dlfd_core::{Error, Result};

/// Machine unlearning experiments with distribution-level feature distancing.
///
/// Verbosity is set with the DLFD_LOG environment variable (error, warn, info, debug).
#[derive(Parser)]
#[command(name = "dlfd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); built-in defaults when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the data, training and unlearning seeds
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with retain/forget/unseen/test splits
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the original model on retain ∪ forget
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one unlearning method and evaluate it
    Unlearn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Retrain, FineTune, NegGrad, ErrorMax or DLFD
        #[arg(long)]
        method: String,
        #[arg(long)]
        out: PathBuf,
        /// Iterations between forgetting-score evaluations
        #[arg(long)]
        eval_every: Option<usize>,
    },
    /// Train the original and retrained models, run every configured method, write reports
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory; falls back to output.dir from the config
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        eval_every: Option<usize>,
    },
}

fn load_config(common: &Common, eval_every: Option<usize>) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.override_seed(seed);
    }
    if let Some(every) = eval_every {
        config.unlearn.eval_every = every;
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Generate { common, out } => {
            let config = load_config(&common, None)?;
            let summary = cmd_generate(&config, &out)?;
            println!("wrote {}", summary.path.display());
            for (tag, n) in summary.counts {
                println!("{tag}: {n}");
            }
            println!("checksum: {}", summary.checksum);
        }
        Command::Train { common, dataset, out } => {
            let config = load_config(&common, None)?;
            let summary = cmd_train(&dataset, &config, &out)?;
            println!("wrote {} ({} epochs)", summary.model_path.display(), summary.epochs);
            println!("training log: {}", summary.log_path.display());
            println!("test accuracy: {:.4}", summary.test_accuracy);
            println!("model sha256: {}", summary.model_hash);
        }
        Command::Unlearn { common, dataset, model, method, out, eval_every } => {
            let method: MethodKind = method.parse()?;
            let config = load_config(&common, eval_every)?;
            let summary = cmd_unlearn(&dataset, &model, &config, method, &out)?;
            print!("{}", summary.report.to_csv());
        }
        Command::Compare { common, dataset, out, eval_every } => {
            let config = load_config(&common, eval_every)?;
            let out = out
                .or_else(|| config.output.dir.clone())
                .ok_or_else(|| Error::Config("no output directory: pass --out or set output.dir".into()))?;
            let outcome = cmd_compare(&dataset, &config, Path::new(&out))?;
            print!("{}", outcome.report.to_csv());
            if outcome.has_failures() {
                return Ok(exit::PARTIAL_FAILURE);
            }
        }
    }
    Ok(exit::OK)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DLFD_LOG", "warn")).init();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
