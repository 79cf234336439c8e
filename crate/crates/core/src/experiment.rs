//! Config-driven pipeline: data, placement, build, train, evaluate, report.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cost::{boundary_fractions, count_model, Convention, CostProfile};
use crate::data::{load_mnist, Dataset, Split, SyntheticSpec};
use crate::error::{Error, PhaseExt, Result};
use crate::graph::{
    build_model, load_checkpoint, save_checkpoint, ExitKind, Family, Model, ResNetTopology,
    UnitPlan,
};
use crate::inference::{evaluate_timed, ExitStats};
use crate::placement::{self, PlacementPolicy, PlacementResult, Strategy};
use crate::training::{self, write_metrics_csv, write_xy, EpochMetrics, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: Family,
    /// Required for the 6n+2 family.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    /// Custom-small plan; the 8-layer MNIST plan when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stem: Option<UnitPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<Vec<UnitPlan>>,
    pub exit_kind: ExitKind,
}

impl ModelConfig {
    pub fn topology(&self, input: [usize; 3]) -> Result<ResNetTopology> {
        match self.family {
            Family::SixNPlusTwo => {
                let depth = self
                    .depth
                    .ok_or_else(|| Error::Config("6n+2 models need a depth".into()))?;
                ResNetTopology::six_n_plus_two(depth, input)
            }
            Family::CustomSmall => match (&self.stem, &self.blocks) {
                (Some(stem), Some(blocks)) => {
                    Ok(ResNetTopology::custom_small(input, *stem, blocks.clone()))
                }
                (None, None) => {
                    let mut t = ResNetTopology::eenet8();
                    t.input = input;
                    Ok(t)
                }
                _ => Err(Error::Config(
                    "custom-small needs both stem and blocks".into(),
                )),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementConfig {
    pub strategy: Strategy,
    pub exits: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi: Option<f64>,
    /// Explicit boundary indices; bypasses the strategy when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundaries: Option<Vec<usize>>,
}

impl PlacementConfig {
    pub fn policy(&self) -> PlacementPolicy {
        PlacementPolicy {
            strategy: self.strategy,
            phi: self.phi,
            exits: self.exits,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataConfig {
    Mnist {
        root: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_limit: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_limit: Option<usize>,
    },
    Synthetic(SyntheticSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub placement: PlacementConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    /// The MNIST headline setting: 8-layer network, two quadratic Pool exits,
    /// L_v2 with λ = 1, Adam at 0.001, batch 32, 20 epochs.
    pub fn mnist(root: impl Into<PathBuf>, output_dir: impl Into<PathBuf>, seed: u64) -> Self {
        Self {
            name: "eenet8-mnist".into(),
            output_dir: output_dir.into(),
            model: ModelConfig {
                family: Family::CustomSmall,
                depth: None,
                stem: None,
                blocks: None,
                exit_kind: ExitKind::Pool,
            },
            placement: PlacementConfig {
                strategy: Strategy::Quadratic,
                exits: 2,
                phi: None,
                boundaries: None,
            },
            train: TrainConfig::mnist(seed),
            data: DataConfig::Mnist {
                root: root.into(),
                train_limit: None,
                test_limit: None,
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }
}

/// Loads the train and test sets named by the config.
pub fn load_data(config: &DataConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    match config {
        DataConfig::Mnist {
            root,
            train_limit,
            test_limit,
        } => {
            let mut train = load_mnist(root, Split::Train)?;
            let mut test = load_mnist(root, Split::Test)?;
            if let Some(n) = train_limit {
                train = train.take(*n);
            }
            if let Some(n) = test_limit {
                test = test.take(*n);
            }
            Ok((train, test))
        }
        DataConfig::Synthetic(spec) => spec.generate(seed),
    }
}

/// Resolves exit boundaries for `topology` under the placement config.
pub fn place(
    topology: &ResNetTopology,
    config: &PlacementConfig,
    num_classes: usize,
    convention: Convention,
) -> Result<PlacementResult> {
    let base: Model<f32> = build_model(topology, &[], ExitKind::Pool, num_classes, 0)?;
    let fractions = boundary_fractions(&base, convention);
    match &config.boundaries {
        Some(b) => {
            if b.len() != config.exits {
                return Err(Error::Config(format!(
                    "{} boundaries given for {} exits",
                    b.len(),
                    config.exits
                )));
            }
            if let Some(&bad) = b.iter().find(|&&i| i >= fractions.len()) {
                return Err(Error::Construction(format!(
                    "boundary {bad} does not exist"
                )));
            }
            Ok(PlacementResult {
                targets: b.iter().map(|&i| fractions[i]).collect(),
                realized: b.iter().map(|&i| fractions[i]).collect(),
                boundaries: b.clone(),
            })
        }
        None => placement::snap(&placement::targets(&config.policy())?, &fractions),
    }
}

/// A model built from the config, before any training.
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub placement: PlacementResult,
    pub model: Model<f32>,
    pub profile: CostProfile,
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    let (train, test) = load_data(&config.data, config.seed()).phase("loading data")?;
    let topology = config
        .model
        .topology(train.image_shape)
        .phase("building model")?;
    let placement = place(
        &topology,
        &config.placement,
        train.num_classes,
        config.train.cost_convention,
    )
    .phase("placing exits")?;
    let model = build_model(
        &topology,
        &placement.boundaries,
        config.model.exit_kind,
        train.num_classes,
        config.seed(),
    )
    .phase("building model")?;
    let profile = count_model(&model, config.train.cost_convention);
    Ok(Prepared {
        train,
        test,
        placement,
        model,
        profile,
    })
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub history: Vec<EpochMetrics>,
    pub stats: ExitStats,
    pub placement: PlacementResult,
    pub profile: CostProfile,
    pub output_dir: PathBuf,
}

/// The full pipeline. Writes into `config.output_dir`:
/// `config.toml`, `placement.csv`, `cost.csv`, `metrics.csv`, `exits.csv`,
/// `summary.csv`, `summary.md`, plot data and the best and final checkpoints.
pub fn run(config: &ExperimentConfig) -> Result<RunReport> {
    let out = &config.output_dir;
    std::fs::create_dir_all(out).phase("creating output directory")?;
    let snapshot = config.to_toml().phase("writing config")?;
    std::fs::write(out.join("config.toml"), snapshot).phase("writing config")?;

    let Prepared {
        train,
        test,
        placement,
        mut model,
        profile,
    } = prepare(config)?;
    placement::write_csv(&placement, &out.join("placement.csv")).phase("writing reports")?;
    profile
        .write_csv(&out.join("cost.csv"))
        .phase("writing reports")?;

    let mut best = f64::NEG_INFINITY;
    let best_path = out.join("best.ckpt");
    let history = training::train(&mut model, &train, &test, &config.train, |m, metrics, _| {
        if metrics.eval_accuracy > best {
            best = metrics.eval_accuracy;
            save_checkpoint(m, &best_path)?;
        }
        Ok(())
    })
    .phase("training")?;
    save_checkpoint(&model, &out.join("final.ckpt")).phase("writing checkpoint")?;

    let stats =
        evaluate_timed(&model, &test, config.train.threshold, &profile).phase("evaluating")?;
    write_run_reports(out, config, &history, &stats, &profile).phase("writing reports")?;
    Ok(RunReport {
        history,
        stats,
        placement,
        profile,
        output_dir: out.clone(),
    })
}

fn write_run_reports(
    out: &Path,
    config: &ExperimentConfig,
    history: &[EpochMetrics],
    stats: &ExitStats,
    profile: &CostProfile,
) -> Result<()> {
    write_metrics_csv(history, &out.join("metrics.csv"))?;
    stats.write_exits_csv(&out.join("exits.csv"))?;
    stats.write_summary_csv(&out.join("summary.csv"))?;
    let series = |f: fn(&EpochMetrics) -> f64| -> Vec<(f64, f64)> {
        history.iter().map(|m| (m.epoch as f64, f(m))).collect()
    };
    write_xy(
        &out.join("loss.dat"),
        ("epoch", "train_loss"),
        &series(|m| m.train_loss),
    )?;
    write_xy(
        &out.join("accuracy.dat"),
        ("epoch", "eval_acc"),
        &series(|m| m.eval_accuracy),
    )?;
    write_xy(
        &out.join("relative_cost.dat"),
        ("epoch", "eval_relative_cost"),
        &series(|m| m.eval_relative_cost),
    )?;
    std::fs::write(
        out.join("summary.md"),
        summary_markdown(config, stats, profile),
    )?;
    Ok(())
}

pub fn summary_markdown(
    config: &ExperimentConfig,
    stats: &ExitStats,
    profile: &CostProfile,
) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {}\n", config.name);
    let _ = writeln!(
        s,
        "loss `{:?}`, lambda {}, {} epochs, seed {}\n",
        config.train.loss, config.train.lambda, config.train.epochs, config.train.seed
    );
    let _ = writeln!(s, "| metric | value |\n|---|---|");
    let _ = writeln!(s, "| accuracy | {:.4} |", stats.accuracy);
    let _ = writeln!(
        s,
        "| mean relative cost | {:.4} |",
        stats.mean_relative_cost
    );
    if let Some(t) = stats.wall_clock_per_example {
        let _ = writeln!(s, "| time per example (us) | {t:.2} |");
    }
    let _ = writeln!(
        s,
        "\n| exit | examples | accuracy | relative cost | ops |\n|---|---|---|---|---|"
    );
    for i in 0..stats.counts.len() {
        let label = if i + 1 == stats.counts.len() {
            "last".to_string()
        } else {
            i.to_string()
        };
        let _ = writeln!(
            s,
            "| {label} | {} | {:.4} | {:.4} | {} |",
            stats.counts[i],
            stats.per_exit_accuracy[i],
            profile.relative[i],
            profile.flops_at_exit[i]
        );
    }
    s
}

/// Evaluates a saved checkpoint on the config's test split.
pub fn eval_checkpoint(
    config: &ExperimentConfig,
    checkpoint: &Path,
) -> Result<(ExitStats, CostProfile)> {
    let mut prepared = prepare(config)?;
    load_checkpoint(&mut prepared.model, checkpoint).phase("loading checkpoint")?;
    let stats = evaluate_timed(
        &prepared.model,
        &prepared.test,
        config.train.threshold,
        &prepared.profile,
    )
    .phase("evaluating")?;
    Ok((stats, prepared.profile))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    /// `Err` holds the failure message; the sweep carries on.
    pub outcome: std::result::Result<ExitStats, String>,
}

/// Directory of one sweep point.
pub fn sweep_point_dir(base: &Path, lambda: f64) -> PathBuf {
    base.join(format!("lambda_{lambda}"))
}

/// One independent run per λ, each from a fresh initialization with the
/// same seed, written to `lambda_<λ>` under the base output directory.
pub fn sweep_lambda(base: &ExperimentConfig, lambdas: &[f64]) -> Result<Vec<SweepRow>> {
    std::fs::create_dir_all(&base.output_dir).phase("creating output directory")?;
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut config = base.clone();
        config.train.lambda = lambda;
        config.output_dir = sweep_point_dir(&base.output_dir, lambda);
        config.name = format!("{} lambda={lambda}", base.name);
        let outcome = run(&config).map(|r| r.stats).map_err(|e| e.to_string());
        rows.push(SweepRow { lambda, outcome });
        write_sweep_csv(&rows, &base.output_dir.join("sweep.csv")).phase("writing reports")?;
    }
    let ok: Vec<_> = rows
        .iter()
        .filter_map(|r| r.outcome.as_ref().ok().map(|s| (r.lambda, s)))
        .collect();
    let pts = |f: fn(&ExitStats) -> f64| -> Vec<(f64, f64)> {
        ok.iter().map(|(l, s)| (*l, f(s))).collect()
    };
    write_xy(
        &base.output_dir.join("lambda_cost.dat"),
        ("lambda", "relative_cost"),
        &pts(|s| s.mean_relative_cost),
    )
    .phase("writing reports")?;
    write_xy(
        &base.output_dir.join("lambda_accuracy.dat"),
        ("lambda", "accuracy"),
        &pts(|s| s.accuracy),
    )
    .phase("writing reports")?;
    Ok(rows)
}

/// `lambda, accuracy, time_us, relative_cost, exit_0 .. exit_N, status`.
pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let n_out = rows
        .iter()
        .find_map(|r| r.outcome.as_ref().ok().map(|s| s.counts.len()))
        .unwrap_or(0);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![
        "lambda".to_string(),
        "accuracy".into(),
        "time_us".into(),
        "relative_cost".into(),
    ];
    header.extend((0..n_out).map(|i| format!("exit_{i}")));
    header.push("status".into());
    w.write_record(&header)?;
    for r in rows {
        let mut row = vec![r.lambda.to_string()];
        match &r.outcome {
            Ok(s) => {
                row.push(format!("{:.6}", s.accuracy));
                row.push(
                    s.wall_clock_per_example
                        .map(|t| format!("{t:.3}"))
                        .unwrap_or_default(),
                );
                row.push(format!("{:.6}", s.mean_relative_cost));
                row.extend(s.counts.iter().map(|c| c.to_string()));
                row.push("ok".into());
            }
            Err(e) => {
                row.extend(std::iter::repeat_n(String::new(), 3 + n_out));
                row.push(format!("error: {e}"));
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
