use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use eenet::cost::{count_model, Convention};
use eenet::experiment::{self, DataConfig, ExperimentConfig};
use eenet::graph::build_model;
use eenet::placement::{self, Strategy};

#[derive(Parser)]
#[command(name = "eenet", version, about = "Train and evaluate early-exit CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; the MNIST 8-layer setting when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory holding the MNIST IDX files.
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(p) => ExperimentConfig::load(p)
                .with_context(|| format!("reading config {}", p.display()))?,
            None => ExperimentConfig::mnist("data/mnist", "runs/eenet8-mnist", 1),
        };
        if let Some(seed) = self.seed {
            config.train.seed = seed;
        }
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        if let Some(root) = &self.data_root {
            match &mut config.data {
                DataConfig::Mnist { root: r, .. } => *r = root.clone(),
                DataConfig::Synthetic(_) => {
                    anyhow::bail!("--data-root given but the config uses synthetic data")
                }
            }
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train, evaluate and write the run reports.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Evaluate a checkpoint with early exiting.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `final.ckpt` in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// One independent training run per lambda.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 0.9, 1.3])]
        lambdas: Vec<f64>,
    },
    /// Per-exit operation counts of the configured model.
    CostReport {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        convention: Option<Convention>,
    },
    /// Exit placement targets and the boundaries they snap to.
    Place {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        exits: Option<usize>,
        #[arg(long)]
        phi: Option<f64>,
        /// Use a 6n+2 ResNet of this depth instead of the configured model.
        #[arg(long)]
        depth: Option<usize>,
    },
}

fn print_stats(stats: &eenet::inference::ExitStats) {
    println!("accuracy {:.4}", stats.accuracy);
    println!("mean relative cost {:.4}", stats.mean_relative_cost);
    if let Some(t) = stats.wall_clock_per_example {
        println!("time per example {t:.2} us");
    }
    for (i, c) in stats.counts.iter().enumerate() {
        println!(
            "exit {i}: {c} examples, accuracy {:.4}, relative cost {:.4}",
            stats.per_exit_accuracy[i], stats.relative_costs[i]
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            common,
            epochs,
            lambda,
        } => {
            let mut config = common.load()?;
            if let Some(e) = epochs {
                config.train.epochs = e;
            }
            if let Some(l) = lambda {
                config.train.lambda = l;
            }
            let report = experiment::run(&config)?;
            for m in &report.history {
                println!(
                    "epoch {:>3}  loss {:.4}  acc {:.4}  cost {:.4}  exits {:?}",
                    m.epoch, m.train_loss, m.eval_accuracy, m.eval_relative_cost, m.exit_counts
                );
            }
            print_stats(&report.stats);
            println!("reports written to {}", report.output_dir.display());
        }
        Command::Eval {
            common,
            checkpoint,
            threshold,
        } => {
            let mut config = common.load()?;
            if let Some(t) = threshold {
                config.train.threshold = t;
            }
            let ckpt = checkpoint.unwrap_or_else(|| config.output_dir.join("final.ckpt"));
            let (stats, _) = experiment::eval_checkpoint(&config, &ckpt)?;
            print_stats(&stats);
        }
        Command::Sweep { common, lambdas } => {
            let config = common.load()?;
            let rows = experiment::sweep_lambda(&config, &lambdas)?;
            for r in &rows {
                match &r.outcome {
                    Ok(s) => println!(
                        "lambda {:<5} accuracy {:.4}  cost {:.4}  exits {:?}",
                        r.lambda, s.accuracy, s.mean_relative_cost, s.counts
                    ),
                    Err(e) => println!("lambda {:<5} failed: {e}", r.lambda),
                }
            }
            println!(
                "sweep table written to {}",
                config.output_dir.join("sweep.csv").display()
            );
        }
        Command::CostReport { common, convention } => {
            let config = common.load()?;
            let convention = convention.unwrap_or(config.train.cost_convention);
            let input = match &config.data {
                DataConfig::Mnist { .. } => [1, 28, 28],
                DataConfig::Synthetic(s) => s.image_shape,
            };
            let classes = match &config.data {
                DataConfig::Mnist { .. } => 10,
                DataConfig::Synthetic(s) => s.num_classes,
            };
            let topology = config.model.topology(input)?;
            let placed = experiment::place(&topology, &config.placement, classes, convention)
                .context("placing exits")?;
            let model: eenet::graph::Model<f32> = build_model(
                &topology,
                &placed.boundaries,
                config.model.exit_kind,
                classes,
                config.seed(),
            )
            .context("building model")?;
            let profile = count_model(&model, convention);
            println!(
                "{convention:?} counts per example, exits after blocks {:?}",
                placed.boundaries
            );
            profile.write_summary(std::io::stdout().lock())?;
            std::fs::create_dir_all(&config.output_dir)?;
            let path = config.output_dir.join("cost.csv");
            profile.write_csv(&path)?;
            println!("cost report written to {}", path.display());
        }
        Command::Place {
            common,
            strategy,
            exits,
            phi,
            depth,
        } => {
            let mut config = common.load()?;
            if let Some(s) = strategy {
                config.placement.strategy = s;
                config.placement.boundaries = None;
            }
            if let Some(n) = exits {
                config.placement.exits = n;
            }
            if phi.is_some() {
                config.placement.phi = phi;
            }
            let (topology, classes) = match depth {
                Some(d) => (
                    eenet::graph::ResNetTopology::six_n_plus_two(d, [3, 32, 32])?,
                    10,
                ),
                None => {
                    let (input, classes) = match &config.data {
                        DataConfig::Mnist { .. } => ([1, 28, 28], 10),
                        DataConfig::Synthetic(s) => (s.image_shape, s.num_classes),
                    };
                    (config.model.topology(input)?, classes)
                }
            };
            let placed = experiment::place(
                &topology,
                &config.placement,
                classes,
                config.train.cost_convention,
            )
            .context("placing exits")?;
            println!("exit  target    boundary  realized");
            for i in 0..placed.targets.len() {
                println!(
                    "{i:>4}  {:.4}    {:>8}  {:.4}",
                    placed.targets[i], placed.boundaries[i], placed.realized[i]
                );
            }
            std::fs::create_dir_all(&config.output_dir)?;
            let path = config.output_dir.join("placement.csv");
            placement::write_csv(&placed, &path)?;
            println!("placement written to {}", path.display());
        }
    }
    Ok(())
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
