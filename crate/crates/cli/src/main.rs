//! Command-line driver for the staged experiment pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand, ValueEnum};
use stepcredit::config::{Algorithm, RunConfig};
use stepcredit::pipeline::{report, Pipeline};
use stepcredit::theory::{checks_to_csv, run_theory_suite};
use stepcredit::Error;

#[derive(Parser)]
#[command(name = "stepcredit", version, about = "Turn-level credit assignment experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; overrides `run.out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; overrides `run.jobs`.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Algo {
    Sweet,
    Rft,
    Mtdpo,
    Value,
    ZeroShot,
    SweetUnnormalized,
    SweetNoHiddenInfo,
    SweetValueHead,
    SweetRandom,
}

#[derive(Subcommand)]
enum Command {
    /// Sample training and held-out tasks.
    GenTasks(Common),
    /// Fit the zero-shot actor and collect offline trajectories.
    Rollout(Common),
    /// Train the advantage critic(s) on offline preference pairs.
    TrainCritic(Common),
    /// Train one actor (or the value head).
    TrainActor {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        algo: Algo,
    },
    /// Evaluate every configured algorithm on held-out tasks.
    Eval(Common),
    /// Best-of-N scaling curves for every configured scorer.
    BestOfN(Common),
    /// Exact checks on enumerable MDPs and gradient audits.
    VerifyTheory {
        #[command(flatten)]
        common: Common,
        /// Write the check table here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Aggregate a run directory into summary CSVs.
    Report {
        #[command(flatten)]
        common: Common,
        /// Run directory; defaults to `<out>/<run id>`.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Every stage for every seed, then the report.
    Pipeline(Common),
}

enum Failure {
    Validation(anyhow::Error),
    Stage(anyhow::Error),
    Theory(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Validation(e.into()),
            e => Failure::Stage(e.into()),
        }
    }
}

fn load(common: &Common) -> Result<(RunConfig, Vec<u64>), Failure> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display())).map_err(Failure::Validation)?,
        None => RunConfig::default(),
    };
    if let Some(j) = common.jobs {
        cfg.run.jobs = j;
    }
    if cfg.run.jobs > 0 {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.run.jobs).build_global();
    }
    let seeds = match common.seed {
        Some(s) => vec![s],
        None => cfg.run.seeds.clone(),
    };
    Ok((cfg, seeds))
}

fn pipeline(common: &Common) -> Result<(Pipeline, Vec<u64>), Failure> {
    let (cfg, seeds) = load(common)?;
    Ok((Pipeline::new(cfg, common.out.clone())?, seeds))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenTasks(c) => {
            let (p, seeds) = pipeline(&c)?;
            for s in seeds {
                p.gen_tasks(s)?;
            }
        }
        Command::Rollout(c) => {
            let (p, seeds) = pipeline(&c)?;
            for s in seeds {
                p.rollout(s)?;
            }
        }
        Command::TrainCritic(c) => {
            let (p, seeds) = pipeline(&c)?;
            for s in seeds {
                for r in p.train_critic(s)? {
                    println!(
                        "seed {s}: critic loss {:.4} -> {:.4}, pair accuracy {:.3}",
                        r.initial_loss, r.final_bt_loss, r.pair_accuracy
                    );
                }
            }
        }
        Command::TrainActor { common, algo } => {
            let (p, seeds) = pipeline(&common)?;
            for s in seeds {
                match algo {
                    Algo::Value => {
                        p.train_value(s)?;
                    }
                    a => p.train_actor(s, algorithm(a))?,
                }
            }
        }
        Command::Eval(c) => {
            let (p, seeds) = pipeline(&c)?;
            for s in seeds {
                for r in p.eval(s)? {
                    println!(
                        "seed {s}: {:<22} success {:.3} ± {:.3}  action length {:.2}",
                        r.algorithm, r.success_rate, r.stderr, r.mean_action_length
                    );
                }
            }
        }
        Command::BestOfN(c) => {
            let (p, seeds) = pipeline(&c)?;
            for s in seeds {
                for r in p.best_of_n(s)? {
                    println!("seed {s}: {:<22} N={:<3} success {:.3} ± {:.3}", r.scorer, r.n, r.success_rate, r.stderr);
                }
            }
        }
        Command::VerifyTheory { common, csv } => {
            let (cfg, _) = load(&common)?;
            let rows = run_theory_suite(&cfg.theory)?;
            let table = checks_to_csv(&rows);
            match csv {
                Some(path) => std::fs::write(&path, &table)
                    .with_context(|| format!("writing {}", path.display()))
                    .map_err(Failure::Stage)?,
                None => print!("{table}"),
            }
            let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.check.as_str()).collect();
            if !failed.is_empty() {
                return Err(Failure::Theory(failed.join(", ")));
            }
        }
        Command::Report { common, dir } => {
            let dir = match dir {
                Some(d) => d,
                None => pipeline(&common)?.0.run_dir().to_path_buf(),
            };
            print_summary(&report(&dir)?);
        }
        Command::Pipeline(c) => {
            let (p, seeds) = pipeline(&c)?;
            for &s in &seeds {
                p.run_seed(s)?;
            }
            print_summary(&report(p.run_dir())?);
        }
    }
    Ok(())
}

fn algorithm(a: Algo) -> Algorithm {
    match a {
        Algo::Sweet => Algorithm::Sweet,
        Algo::Rft => Algorithm::Rft,
        Algo::Mtdpo => Algorithm::Mtdpo,
        Algo::ZeroShot => Algorithm::ZeroShot,
        Algo::SweetUnnormalized => Algorithm::SweetUnnormalized,
        Algo::SweetNoHiddenInfo => Algorithm::SweetNoHiddenInfo,
        Algo::SweetValueHead => Algorithm::SweetValueHead,
        Algo::SweetRandom => Algorithm::SweetRandom,
        Algo::Value => unreachable!("value head is not an actor"),
    }
}

fn print_summary(r: &stepcredit::pipeline::Report) {
    println!("algorithm,seeds,success_rate,success_stderr,mean_action_length");
    for s in &r.summary {
        println!(
            "{},{},{:.4},{:.4},{:.3}",
            s.algorithm, s.seeds, s.success_rate, s.success_stderr, s.mean_action_length
        );
    }
    for c in &r.curve {
        println!("best-of-n,{},{},{:.4},{:.4}", c.scorer, c.n, c.success_rate, c.stderr);
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Theory(failed)) => {
            eprintln!("theory checks failed: {failed}");
            ExitCode::from(3)
        }
    }
}
