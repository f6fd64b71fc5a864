//! `longfactor` command-line tool.

mod commands;
mod config;
mod error;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use longfactor::model::Variant;
use longfactor::{Family, Strategy};

use config::{KSet, RunConfig};
use error::CliError;

#[derive(Parser)]
#[command(
    name = "longfactor",
    version,
    about = "Latent factor models for multivariate longitudinal data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model with a fixed number of factors.
    Fit {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Choose the number of factors by the information criterion.
    SelectK {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run a simulation study.
    Simulate {
        #[command(flatten)]
        sim: SimArgs,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Wald tests with BY adjustment, and optionally a permutation test.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        /// Fitted parameters; the model is refitted when omitted.
        #[arg(long)]
        params: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Next-period predictions, residual deviance and recommendations.
    Predict {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        params: PathBuf,
        /// Next-period outcomes (`person,item,value`) for sensitivity scoring.
        #[arg(long)]
        future: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Long-form responses: `person,item,time,value`.
    #[arg(long)]
    responses: PathBuf,
    /// `person,x1..xp`.
    #[arg(long)]
    covariates: Option<PathBuf>,
    /// `person,time,z1..zq`.
    #[arg(long)]
    time_covariates: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long)]
    n_items: Option<usize>,
    #[arg(long)]
    n_persons: Option<usize>,
    #[arg(long)]
    n_times: Option<usize>,
    #[arg(long)]
    k_star: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    /// Also fit the model without factors.
    #[arg(long)]
    baseline: bool,
    /// Fit at the true number of factors only.
    #[arg(long)]
    no_select: bool,
    /// Write the first replication's data and true parameters.
    #[arg(long)]
    write_data: bool,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long)]
    family: Option<Family>,
    #[arg(long)]
    k: Option<usize>,
    /// Candidates such as `1-10` or `1,2,4`.
    #[arg(long)]
    k_set: Option<KSet>,
    #[arg(long)]
    c1: Option<f64>,
    #[arg(long)]
    c2: Option<f64>,
    /// Relative tolerance on the log-likelihood change.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_sweeps: Option<usize>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    n_perm: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Recommendation strategy; repeat for several.
    #[arg(long)]
    strategy: Vec<Strategy>,
}

impl CommonArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($flag:expr, $field:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v;
                }
            };
        }
        set!(self.seed, cfg.seed);
        set!(self.threads, cfg.threads);
        set!(self.family, cfg.family);
        set!(self.k, cfg.k);
        set!(self.k_set.as_ref().map(|k| k.0.clone()), cfg.k_set);
        set!(self.c1, cfg.c1);
        set!(self.c2, cfg.c2);
        set!(self.tol, cfg.fit.rel_tol);
        set!(self.max_sweeps, cfg.fit.max_sweeps);
        set!(self.variant, cfg.variant);
        set!(self.n_perm, cfg.n_perm);
        set!(self.top_k, cfg.top_k);
        if !self.strategy.is_empty() {
            cfg.strategies = self.strategy.clone();
        }
        Ok(cfg)
    }
}

impl DataArgs {
    fn paths(&self) -> io::DataPaths<'_> {
        io::DataPaths {
            responses: &self.responses,
            covariates: self.covariates.as_deref(),
            time_covariates: self.time_covariates.as_deref(),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Fit { data, common } => {
            let cfg = common.resolve()?.finish()?;
            commands::fit(&cfg, &data.paths(), &common.out_dir)
        }
        Command::SelectK { data, common } => {
            let cfg = common.resolve()?.finish()?;
            commands::select_k(&cfg, &data.paths(), &common.out_dir)
        }
        Command::Simulate { sim, common } => {
            let mut cfg = common.resolve()?;
            let s = &mut cfg.simulation;
            macro_rules! set {
                ($flag:expr, $field:expr) => {
                    if let Some(v) = $flag {
                        $field = v;
                    }
                };
            }
            set!(sim.n_items, s.n_items);
            set!(sim.n_persons, s.n_persons);
            set!(sim.n_times, s.n_times);
            set!(sim.k_star, s.k_star);
            set!(sim.reps, s.n_reps);
            s.baseline |= sim.baseline;
            s.skip_selection |= sim.no_select;
            let cfg = cfg.finish()?;
            commands::simulate(&cfg, &common.out_dir, sim.write_data)
        }
        Command::Evaluate {
            data,
            params,
            common,
        } => {
            let cfg = common.resolve()?.finish()?;
            commands::evaluate(&cfg, &data.paths(), params.as_deref(), &common.out_dir)
        }
        Command::Predict {
            data,
            params,
            future,
            common,
        } => {
            let cfg = common.resolve()?.finish()?;
            commands::predict(
                &cfg,
                &data.paths(),
                &params,
                future.as_deref(),
                &common.out_dir,
            )
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
