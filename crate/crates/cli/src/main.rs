use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use peerbnn::geometry::ParamMetric;
use peerbnn::harness::{commands, TrainConfig};

#[derive(Parser)]
#[command(name = "peerbnn", version, about = "Mutual learning for variational Bayesian neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    W2,
    Kl,
}

#[derive(clap::Args)]
struct Common {
    /// JSON config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run only this seed instead of the config's list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Posterior samples per prediction.
    #[arg(long)]
    samples: Option<usize>,
    /// Distance used by the parameter-diversity loss.
    #[arg(long, value_enum)]
    metric: Option<MetricArg>,
}

impl Common {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(s) = self.samples {
            anyhow::ensure!(s > 0, "--samples must be positive");
            cfg.eval.samples = s;
        }
        if let Some(m) = self.metric {
            cfg.hyper.metric = match m {
                MetricArg::W2 => ParamMetric::W2,
                MetricArg::Kl => ParamMetric::Kl,
            };
        }
        Ok(cfg)
    }

    fn first_seed(&self, cfg: &TrainConfig) -> u64 {
        self.seed.unwrap_or(cfg.seeds[0])
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured method for every seed.
    Train {
        #[command(flatten)]
        common: Common,
        /// Validate the config and print the plan without training or writing files.
        #[arg(long)]
        dry_run: bool,
    },
    /// Train vanilla, DML and the full method under matched seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dry_run: bool,
    },
    /// Ensemble metrics of a checkpoint on the evaluation split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file.
        checkpoint: PathBuf,
    },
    /// Finite-difference checks of every loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the deterministic network used to initialise B2's means.
    PretrainDeterministic {
        #[command(flatten)]
        common: Common,
    },
    /// Write the standardized train/validation splits as CSV.
    MakeData {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { common, dry_run } => {
            let cfg = common.resolve()?;
            if let Some(rep) = commands::cmd_train(&cfg, dry_run)? {
                print!("{}", rep.comparison_table());
                println!("wrote {}", cfg.out_dir.display());
                return Ok(!rep.failed());
            }
        }
        Command::Compare { common, dry_run } => {
            let cfg = common.resolve()?;
            if let Some(rep) = commands::cmd_compare(&cfg, dry_run)? {
                print!("{}\n{}", rep.comparison_table(), rep.retention_table());
                println!("wrote {}", cfg.out_dir.display());
                return Ok(!rep.failed());
            }
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.resolve()?;
            let seed = common.seed.unwrap_or(cfg.eval.seed);
            let rep = commands::cmd_eval(&cfg, &checkpoint, seed)?;
            println!("{}", serde_json_pretty(&rep)?);
        }
        Command::Gradcheck { seed } => {
            let (table, ok) = commands::cmd_gradcheck(seed)?;
            print!("{table}");
            return Ok(ok);
        }
        Command::PretrainDeterministic { common } => {
            let cfg = common.resolve()?;
            let path = cfg.out_dir.join("deterministic.ckpt");
            let losses = commands::cmd_pretrain(&cfg, common.first_seed(&cfg), &path)?;
            println!("final loss {:.4}; wrote {}", losses.last().copied().unwrap_or(f64::NAN), path.display());
        }
        Command::MakeData { common } => {
            let cfg = common.resolve()?;
            let (train, val) = commands::cmd_make_data(&cfg, common.first_seed(&cfg), &cfg.out_dir)?;
            println!("wrote {} and {}", train.display(), val.display());
        }
    }
    Ok(true)
}

fn serde_json_pretty(rep: &peerbnn::metrics::MetricsReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(rep)?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PEERBNN_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
