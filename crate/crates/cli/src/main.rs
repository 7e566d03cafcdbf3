//! `odil`: generate domain streams, run strategies, and combine reports.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use odil::experiment::{cmd_gen_data, cmd_report, cmd_run, comparison_table, ExperimentConfig, RunOptions};
use odil::{Budget, Error, StrategyKind};

#[derive(Parser)]
#[command(name = "odil", version, about = "Online domain-incremental learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write every stream domain as feature files plus manifests under <out>/data.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Replace an existing data directory.
        #[arg(long)]
        force: bool,
    },
    /// Run strategies over the stream and write reports, curves and checkpoints.
    Run {
        #[command(flatten)]
        common: Common,
        /// Strategy kinds to run (repeatable or comma separated). Default: all configured.
        #[arg(long, value_delimiter = ',')]
        strategy: Vec<KindArg>,
        /// Restrict training strategies to one budget.
        #[arg(long)]
        budget: Option<BudgetArg>,
        /// Number of consecutive seeds, starting at the configured seed.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        /// Overwrite existing reports.
        #[arg(long)]
        force: bool,
        /// Use the stored base checkpoint; fail if there is none.
        #[arg(long)]
        no_train: bool,
    },
    /// Combine report files into combined.csv and summary.csv.
    Report {
        /// Report JSON files written by `odil run`.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Allow reports produced by different configurations.
        #[arg(long)]
        allow_mixed: bool,
        /// Directory for combined.csv and summary.csv (printed only when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective configuration as JSON.
    Config {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// JSON configuration; the reference experiment when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the configuration).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed (overrides the configuration).
    #[arg(long)]
    seed: Option<u64>,
    /// Drop test-drawn adaptation samples from evaluation.
    #[arg(long)]
    exclude_adaptation_samples: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.exclude_adaptation_samples {
            cfg.exclude_adaptation_samples = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Base,
    Fe,
    Ft,
    Disjoint,
    Joint,
    Odil,
}

impl From<KindArg> for StrategyKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Base => StrategyKind::Base,
            KindArg::Fe => StrategyKind::Fe,
            KindArg::Ft => StrategyKind::Ft,
            KindArg::Disjoint => StrategyKind::Disjoint,
            KindArg::Joint => StrategyKind::Joint,
            KindArg::Odil => StrategyKind::Odil,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BudgetArg {
    Online,
    Offline,
}

impl From<BudgetArg> for Budget {
    fn from(b: BudgetArg) -> Self {
        match b {
            BudgetArg::Online => Budget::Online,
            BudgetArg::Offline => Budget::Offline,
        }
    }
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData { common, force } => {
            let cfg = common.load()?;
            let summary = cmd_gen_data(&cfg, force)?;
            print!("{}", summary.to_table());
            println!("wrote {}", cfg.output_dir.join("data").display());
        }
        Command::Run {
            common,
            strategy,
            budget,
            seeds,
            force,
            no_train,
        } => {
            let cfg = common.load()?;
            if seeds == 0 {
                return Err(Error::Config("--seeds must be >= 1".into()));
            }
            let opts = RunOptions {
                kinds: strategy.into_iter().map(StrategyKind::from).collect(),
                budget: budget.map(Budget::from),
                seeds,
                force,
                no_train,
            };
            let outcome = cmd_run(&cfg, &opts)?;
            for seed in (0..seeds as u64).map(|i| cfg.seed + i) {
                let reports: Vec<_> = outcome.reports.iter().filter(|r| r.seed == seed).cloned().collect();
                print!("{}", comparison_table(&reports));
            }
            println!("wrote {} files under {}", outcome.files.len(), cfg.output_dir.display());
        }
        Command::Report {
            reports,
            allow_mixed,
            out,
        } => {
            print!("{}", cmd_report(&reports, allow_mixed, out.as_deref())?);
        }
        Command::Config { common } => {
            println!("{}", common.load()?.to_json()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
