//! `eglr`: data generation, two-stage training, re-ranking, evaluation,
//! entropy probing and sweeps. Every command reads and writes files only.

mod commands;
mod fail;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use commands::RerankMode;

#[derive(Parser)]
#[command(name = "eglr", version, about = "Generative list re-ranking with entropy-guided latent reasoning")]
struct Cli {
    /// Print the full default config as TOML and exit.
    #[arg(long)]
    print_default_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a world, logged interactions and candidate pools.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the evaluator on logged interactions.
    TrainEvaluator {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Interactions JSONL.
        #[arg(long)]
        data: PathBuf,
        /// Held-out interactions, reported per epoch.
        #[arg(long)]
        test: Option<PathBuf>,
        /// Defaults to world.json next to the data file.
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// GRPO against a frozen evaluator.
    TrainGenerator {
        /// Defaults to the evaluator checkpoint's config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        evaluator: PathBuf,
        #[arg(long)]
        pools: PathBuf,
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-iteration training CSV.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Produce one list per candidate pool.
    Rerank {
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        evaluator: PathBuf,
        #[arg(long)]
        pools: PathBuf,
        #[arg(long)]
        world: Option<PathBuf>,
        /// greedy, sample or pass@K.
        #[arg(long, default_value = "greedy")]
        mode: RerankMode,
        /// Output JSONL of lists and evaluator scores.
        #[arg(long)]
        out: PathBuf,
        /// Step-level trace JSONL (greedy and sample only).
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// MAP/NDCG/evaluator score of logged versus generated orderings.
    Evaluate {
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        evaluator: PathBuf,
        /// Held-out interactions JSONL.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// Cutoffs, clamped to K.
        #[arg(long, value_delimiter = ',', default_value = "5,10")]
        ks: Vec<usize>,
        /// Also report best-of-N sampled lists.
        #[arg(long)]
        pass_k: Option<usize>,
    },
    /// Per-position entropy before and after reasoning.
    ProbeEntropy {
        /// Without a checkpoint an untrained generator is built from --config.
        #[arg(long)]
        generator: Option<PathBuf>,
        /// With --generator, only the reasoning section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        pools: PathBuf,
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        traces: Option<PathBuf>,
        /// Reasoning steps and latency CSV.
        #[arg(long)]
        efficiency: Option<PathBuf>,
        /// Use only the first N pools.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Full pipeline per point of a config grid.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Add a mean latency column.
        #[arg(long)]
        timing: bool,
    },
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out } => {
            let cfg = commands::load_config(config.as_deref())?;
            commands::gen_data(&cfg, &out)
        }
        Command::TrainEvaluator {
            config,
            data,
            test,
            world,
            out,
            log,
        } => {
            let cfg = commands::load_config(config.as_deref())?;
            commands::train_evaluator(
                &cfg,
                commands::TrainEvaluatorArgs {
                    data: &data,
                    test: test.as_deref(),
                    world: world.as_deref(),
                    out: &out,
                    log: log.as_deref(),
                },
            )
        }
        Command::TrainGenerator {
            config,
            evaluator,
            pools,
            world,
            out,
            log,
            iterations,
        } => commands::train_generator_cmd(commands::TrainGeneratorArgs {
            config: config.as_deref(),
            evaluator: &evaluator,
            pools: &pools,
            world: world.as_deref(),
            out: &out,
            log: log.as_deref(),
            iterations,
        }),
        Command::Rerank {
            generator,
            evaluator,
            pools,
            world,
            mode,
            out,
            traces,
        } => commands::rerank(commands::RerankArgs {
            generator: &generator,
            evaluator: &evaluator,
            pools: &pools,
            world: world.as_deref(),
            mode,
            out: &out,
            traces: traces.as_deref(),
        }),
        Command::Evaluate {
            generator,
            evaluator,
            data,
            world,
            report,
            ks,
            pass_k,
        } => commands::evaluate(commands::EvaluateArgs {
            generator: &generator,
            evaluator: &evaluator,
            data: &data,
            world: world.as_deref(),
            report: &report,
            ks: &ks,
            pass_k,
        }),
        Command::ProbeEntropy {
            generator,
            config,
            pools,
            world,
            report,
            traces,
            efficiency,
            limit,
        } => commands::probe_entropy(commands::ProbeArgs {
            generator: generator.as_deref(),
            config: config.as_deref(),
            pools: &pools,
            world: world.as_deref(),
            report: &report,
            traces: traces.as_deref(),
            efficiency: efficiency.as_deref(),
            limit,
        }),
        Command::Sweep {
            config,
            grid,
            report,
            timing,
        } => {
            let cfg = commands::load_config(config.as_deref())?;
            sweep::sweep(&cfg, &grid, &report, timing).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.print_default_config {
        print!("{}", eglr::config::ExperimentConfig::default().to_toml());
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("error: no command given (see --help)");
        return ExitCode::from(2);
    };
    match run(command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(fail::exit_code(&e))
        }
    }
}
