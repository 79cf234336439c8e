//! Soft-exit losses and the joint optimization loop.

mod optim;
mod soft;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use optim::{Optimizer, OptimizerConfig};
pub use soft::{loss, soft_forward, LossKind, SoftOutputs};

use crate::cost::{count_model, Convention, CostProfile};
use crate::data::{Dataset, Shuffler};
use crate::error::{Error, Result};
use crate::graph::{Mode, Model, ParamId};
use crate::inference::{evaluate, ExitStats};
use crate::tensor::{Float, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub lambda: f64,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Used only by the per-epoch evaluation.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default)]
    pub cost_convention: Convention,
}

fn default_threshold() -> f64 {
    crate::inference::DEFAULT_THRESHOLD
}

impl TrainConfig {
    /// The MNIST setting: L_v2, λ = 1, Adam at 0.001, batch 32, 20 epochs.
    pub fn mnist(seed: u64) -> Self {
        Self {
            loss: LossKind::V2,
            lambda: 1.0,
            optimizer: OptimizerConfig::adam(0.001),
            batch_size: 32,
            epochs: 20,
            seed,
            threshold: default_threshold(),
            cost_convention: Convention::Mac,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// One-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_accuracy: f64,
    pub eval_relative_cost: f64,
    pub exit_counts: Vec<usize>,
}

/// Loss and gradients of one batch.
pub struct StepResult<F> {
    pub loss: f64,
    pub grads: Vec<(ParamId, Tensor<F>)>,
    pub bn_updates: Vec<crate::graph::BnUpdate<F>>,
}

/// Forward over all exits, soft recursion, loss and backward for one batch.
pub fn loss_and_grads<F: Float>(
    model: &Model<F>,
    x: Tensor<F>,
    labels: &[usize],
    costs: &[f64],
    kind: LossKind,
    lambda: f64,
    mode: Mode,
) -> Result<StepResult<F>> {
    let mut tape = Tape::new();
    let input = tape.constant(x);
    let out = model.forward_all_exits(&mut tape, input, mode)?;
    let soft = soft_forward(&mut tape, &out.confidences, &out.probs, costs)?;
    let l = loss(&mut tape, kind, &soft, labels, lambda)?;
    let value = tape.value(l).item().to_f64();
    if !value.is_finite() {
        return Ok(StepResult {
            loss: value,
            grads: Vec::new(),
            bn_updates: Vec::new(),
        });
    }
    tape.backward(l)?;
    let grads = out
        .binding
        .bound()
        .filter_map(|(id, v)| tape.grad(v).map(|g| (id, g.clone())))
        .collect();
    Ok(StepResult {
        loss: value,
        grads,
        bn_updates: out.bn_updates,
    })
}

/// Loss value only, on an inference tape.
pub fn loss_value<F: Float>(
    model: &Model<F>,
    x: Tensor<F>,
    labels: &[usize],
    costs: &[f64],
    kind: LossKind,
    lambda: f64,
    mode: Mode,
) -> Result<f64> {
    let mut tape = Tape::inference();
    let input = tape.constant(x);
    let out = model.forward_all_exits(&mut tape, input, mode)?;
    let soft = soft_forward(&mut tape, &out.confidences, &out.probs, costs)?;
    let l = loss(&mut tape, kind, &soft, labels, lambda)?;
    Ok(tape.value(l).item().to_f64())
}

/// Relative error between analytic and central-difference gradients of the
/// loss, one entry per trainable parameter tensor.
pub fn parameter_gradient_errors(
    model: &mut Model<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    costs: &[f64],
    kind: LossKind,
    lambda: f64,
    step: f64,
) -> Result<Vec<(String, f64)>> {
    let analytic = loss_and_grads(model, x.clone(), labels, costs, kind, lambda, Mode::Train)?;
    let ids: Vec<ParamId> = model
        .store()
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let grad = analytic
            .grads
            .iter()
            .find(|(g, _)| *g == id)
            .map(|(_, t)| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; model.store().value(id).numel()]);
        let mut numeric = Vec::with_capacity(grad.len());
        for j in 0..grad.len() {
            let orig = model.store().value(id).data()[j];
            model.store_mut().value_mut(id).data_mut()[j] = orig + step;
            let plus = loss_value(model, x.clone(), labels, costs, kind, lambda, Mode::Train)?;
            model.store_mut().value_mut(id).data_mut()[j] = orig - step;
            let minus = loss_value(model, x.clone(), labels, costs, kind, lambda, Mode::Train)?;
            model.store_mut().value_mut(id).data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * step));
        }
        out.push((
            model.store().get(id).name.clone(),
            crate::tensor::gradcheck::relative_error(&grad, &numeric),
        ));
    }
    Ok(out)
}

/// Jointly optimizes the backbone and every exit block.
pub struct Trainer<'a, F: Float> {
    pub config: &'a TrainConfig,
    pub profile: CostProfile,
    optimizer: Optimizer<F>,
    shuffler: Shuffler,
    epoch: usize,
}

impl<'a, F: Float> Trainer<'a, F> {
    pub fn new(model: &Model<F>, train_len: usize, config: &'a TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            profile: count_model(model, config.cost_convention),
            optimizer: Optimizer::new(config.optimizer, model.store()),
            shuffler: Shuffler::new(train_len, config.seed),
            epoch: 0,
        })
    }

    /// Runs one pass over `train` and returns the mean batch loss.
    pub fn train_epoch(&mut self, model: &mut Model<F>, train: &Dataset) -> Result<f64> {
        let epoch = self.epoch;
        self.epoch += 1;
        let order = self.shuffler.epoch().to_vec();
        let mut total = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(self.config.batch_size).enumerate() {
            let (x, y) = train.batch::<F>(idx);
            let step = loss_and_grads(
                model,
                x,
                &y,
                &self.profile.relative,
                self.config.loss,
                self.config.lambda,
                Mode::Train,
            )?;
            if !step.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: b,
                });
            }
            self.optimizer.step(model.store_mut(), &step.grads, epoch);
            model.apply_bn_updates(&step.bn_updates);
            total += step.loss;
            batches += 1;
        }
        Ok(total / batches.max(1) as f64)
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }
}

/// Trains for `config.epochs`, evaluating on `eval` after every epoch.
/// `on_epoch` sees the model after each epoch, e.g. to write checkpoints.
pub fn train<F: Float>(
    model: &mut Model<F>,
    train_set: &Dataset,
    eval_set: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&Model<F>, &EpochMetrics, &ExitStats) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    let mut trainer = Trainer::new(model, train_set.len(), config)?;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let train_loss = trainer.train_epoch(model, train_set)?;
        let stats = evaluate(model, eval_set, config.threshold, &trainer.profile)?;
        let m = EpochMetrics {
            epoch,
            train_loss,
            eval_accuracy: stats.accuracy,
            eval_relative_cost: stats.mean_relative_cost,
            exit_counts: stats.counts.clone(),
        };
        on_epoch(model, &m, &stats)?;
        history.push(m);
    }
    Ok(history)
}

/// `epoch, train_loss, eval_acc, eval_relative_cost, exit_0 .. exit_N`.
pub fn write_metrics_csv(history: &[EpochMetrics], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let n_out = history.first().map_or(1, |m| m.exit_counts.len());
    let mut header = vec![
        "epoch".to_string(),
        "train_loss".into(),
        "eval_acc".into(),
        "eval_relative_cost".into(),
    ];
    header.extend((0..n_out).map(|i| format!("exit_{i}")));
    w.write_record(&header)?;
    for m in history {
        let mut row = vec![
            m.epoch.to_string(),
            format!("{:.8}", m.train_loss),
            format!("{:.6}", m.eval_accuracy),
            format!("{:.6}", m.eval_relative_cost),
        ];
        row.extend(m.exit_counts.iter().map(|c| c.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Two-column plot data: one `x y` pair per line.
pub fn write_xy(path: &Path, header: (&str, &str), points: &[(f64, f64)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# {} {}", header.0, header.1)?;
    for (x, y) in points {
        writeln!(f, "{x} {y}")?;
    }
    f.flush()?;
    Ok(())
}
