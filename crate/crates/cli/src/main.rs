use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::{parse_override, RunConfig};

#[derive(Parser)]
#[command(name = "lshmf", version, about = "Neighborhood-aware matrix factorization with LSH Top-K search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// Flat `key = value` configuration file.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// gsm, simlsh, minhash, rpcos or random.
    #[arg(long, global = true)]
    provider: Option<String>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Worker count D for block-rotation training.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Lock-free shared-column training of the basic model; not reproducible.
    #[arg(long, global = true)]
    racy: bool,
}

impl Common {
    fn run_config(&self) -> anyhow::Result<RunConfig> {
        let mut pairs = self.set.iter().map(|s| parse_override(s)).collect::<anyhow::Result<Vec<_>>>()?;
        let flags = [
            ("seed", self.seed.map(|x| x.to_string())),
            ("provider", self.provider.clone()),
            ("k", self.k.map(|x| x.to_string())),
            ("epochs", self.epochs.map(|x| x.to_string())),
            ("workers", self.workers.map(|x| x.to_string())),
            ("racy", self.racy.then(|| "true".to_string())),
        ];
        pairs.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
        RunConfig::load(self.config.as_deref(), &pairs)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse a ratings text file into the serialized matrix format.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also write `kind,index,id` lines mapping dense indices to ids.
        #[arg(long)]
        ids_output: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Seeded train/test split.
    Split {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        train_output: PathBuf,
        #[arg(long)]
        test_output: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Build a Top-K neighbor table, optionally against a second provider.
    Topk {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        compare: Option<String>,
        #[arg(long, requires = "compare")]
        compare_output: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write per-epoch metrics.
    Train {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// simLSH hash state for later online updates.
        #[arg(long)]
        hash_state: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Held-out RMSE of a checkpoint.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Absorb new rows and columns from a second ratings file.
    OnlineUpdate {
        #[arg(long)]
        model: PathBuf,
        /// Ratings text file the model was trained on.
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        increment: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        hash_state: Option<PathBuf>,
        #[arg(long)]
        checkpoint_out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Time and memory of every Top-K provider on one input.
    BenchTopk {
        #[arg(long, conflicts_with = "synthetic")]
        input: Option<PathBuf>,
        /// `ROWS,COLS,DENSITY` uniform synthetic matrix.
        #[arg(long)]
        synthetic: Option<String>,
        /// Comma-separated provider list.
        #[arg(long, default_value = "gsm,simlsh,minhash,rpcos,random")]
        providers: String,
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Ingest { input, output, ids_output, common } => commands::ingest(&common.run_config()?, &input, &output, ids_output.as_deref()),
        Command::Split { input, train_output, test_output, common } => commands::split(&common.run_config()?, &input, &train_output, &test_output),
        Command::Topk { input, output, compare, compare_output, common } => {
            commands::topk(&common.run_config()?, &input, &output, compare.as_deref(), compare_output.as_deref())
        }
        Command::Train { input, test, metrics, checkpoint, hash_state, common } => {
            commands::train(&common.run_config()?, &input, test.as_deref(), &metrics, checkpoint.as_deref(), hash_state.as_deref())
        }
        Command::Eval { model, input, test, common } => commands::eval(&common.run_config()?, &model, &input, &test),
        Command::OnlineUpdate { model, base, increment, test, hash_state, checkpoint_out, common } => commands::online_update(
            &common.run_config()?,
            &model,
            &base,
            &increment,
            &test,
            hash_state.as_deref(),
            checkpoint_out.as_deref(),
        ),
        Command::BenchTopk { input, synthetic, providers, output, common } => {
            commands::bench_topk(&common.run_config()?, input.as_deref(), synthetic.as_deref(), &providers, output.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
