//! Early-terminating inference and exit statistics.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cost::CostProfile;
use crate::data::Dataset;
use crate::error::Result;
use crate::graph::{Mode, Model};
use crate::tensor::{Float, OpCounter, Tape, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Examples per tape during batched evaluation.
pub const EVAL_CHUNK: usize = 500;

#[derive(Clone, Debug)]
pub struct Inference<F> {
    pub probs: Vec<F>,
    pub exit: usize,
    pub relative_cost: f64,
    /// Work recorded while answering this example.
    pub ops: OpCounter,
}

impl<F: Float> Inference<F> {
    pub fn label(&self) -> usize {
        argmax(&self.probs)
    }
}

pub fn argmax<F: Float>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Runs one example `[1, c, h, w]` stage by stage and stops at the first exit
/// whose confidence reaches `threshold`.
pub fn infer_one<F: Float>(
    model: &Model<F>,
    x: &Tensor<F>,
    threshold: f64,
    profile: &CostProfile,
) -> Result<Inference<F>> {
    let mut tape = Tape::inference();
    let t = F::from_f64(threshold);
    let input = tape.constant(x.clone());
    let mut pass = model.pass(&mut tape, Mode::Eval, false);
    let mut y = input;
    let mut answer = None;
    for i in 0..model.num_exits() {
        y = model.run_stage(&mut pass, i, y)?;
        let (h, p) = model.run_exit(&mut pass, i, y)?;
        if pass.tape.value(h).data()[0] >= t {
            answer = Some((i, p));
            break;
        }
    }
    let (exit, p) = match answer {
        Some(a) => a,
        None => {
            let n = model.num_exits();
            y = model.run_stage(&mut pass, n, y)?;
            (n, model.run_head(&mut pass, y)?)
        }
    };
    let probs = pass.tape.value(p).data().to_vec();
    Ok(Inference {
        probs,
        exit,
        relative_cost: profile.relative[exit],
        ops: tape.counter(),
    })
}

/// Table-shaped outcome of an evaluation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitStats {
    pub counts: Vec<usize>,
    pub correct: Vec<usize>,
    pub accuracy: f64,
    pub per_exit_accuracy: Vec<f64>,
    pub relative_costs: Vec<f64>,
    pub mean_relative_cost: f64,
    /// Median microseconds per example, when timed.
    pub wall_clock_per_example: Option<f64>,
    /// Work recorded over the whole pass.
    #[serde(skip)]
    pub ops: OpCounter,
}

impl ExitStats {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Number of exits reached by at least `fraction` of the examples.
    pub fn exits_used(&self, fraction: f64) -> usize {
        let total = self.total() as f64;
        self.counts
            .iter()
            .filter(|&&c| c as f64 >= fraction * total && c > 0)
            .count()
    }

    /// `exit_index, count, per_exit_accuracy, relative_cost`.
    pub fn write_exits_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["exit_index", "count", "per_exit_accuracy", "relative_cost"])?;
        for i in 0..self.counts.len() {
            w.write_record([
                i.to_string(),
                self.counts[i].to_string(),
                format!("{:.6}", self.per_exit_accuracy[i]),
                format!("{:.6}", self.relative_costs[i]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `accuracy, mean_relative_cost, time_us`.
    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["accuracy", "mean_relative_cost", "time_us"])?;
        w.write_record([
            format!("{:.6}", self.accuracy),
            format!("{:.6}", self.mean_relative_cost),
            self.wall_clock_per_example
                .map(|t| format!("{t:.3}"))
                .unwrap_or_default(),
        ])?;
        w.flush()?;
        Ok(())
    }
}

/// Per-example exit decisions for a chunk, computed with masking: after each
/// exit only the examples still undecided continue to the next stage.
fn evaluate_chunk<F: Float>(
    model: &Model<F>,
    x: Tensor<F>,
    threshold: F,
    exits: &mut [usize],
    labels_out: &mut [usize],
) -> Result<OpCounter> {
    let mut tape = Tape::inference();
    let input = tape.constant(x);
    let mut pass = model.pass(&mut tape, Mode::Eval, false);
    let mut alive: Vec<usize> = (0..exits.len()).collect();
    let mut y = input;
    for i in 0..model.num_exits() {
        y = model.run_stage(&mut pass, i, y)?;
        let (h, p) = model.run_exit(&mut pass, i, y)?;
        let hv = pass.tape.value(h).data();
        let pv = pass.tape.value(p);
        let mut keep = Vec::with_capacity(alive.len());
        let mut still = Vec::with_capacity(alive.len());
        for (row, &ex) in alive.iter().enumerate() {
            if hv[row] >= threshold {
                exits[ex] = i;
                labels_out[ex] = argmax(pv.row(row));
            } else {
                keep.push(row);
                still.push(ex);
            }
        }
        if still.is_empty() {
            return Ok(tape.counter());
        }
        if still.len() < alive.len() {
            let rest = pass.tape.value(y).select_rows(&keep);
            y = pass.tape.constant(rest);
        }
        alive = still;
    }
    let n = model.num_exits();
    y = model.run_stage(&mut pass, n, y)?;
    let p = model.run_head(&mut pass, y)?;
    let pv = pass.tape.value(p);
    for (row, &ex) in alive.iter().enumerate() {
        exits[ex] = n;
        labels_out[ex] = argmax(pv.row(row));
    }
    Ok(tape.counter())
}

/// Hard-exit evaluation over a whole dataset.
pub fn evaluate<F: Float>(
    model: &Model<F>,
    data: &Dataset,
    threshold: f64,
    profile: &CostProfile,
) -> Result<ExitStats> {
    let n_out = model.num_exits() + 1;
    let mut exits = vec![0; data.len()];
    let mut predicted = vec![0; data.len()];
    let mut ops = OpCounter::default();
    let t = F::from_f64(threshold);
    let all: Vec<usize> = (0..data.len()).collect();
    for (c, chunk) in all.chunks(EVAL_CHUNK).enumerate() {
        let (x, _) = data.batch::<F>(chunk);
        let range = c * EVAL_CHUNK..c * EVAL_CHUNK + chunk.len();
        let counted = evaluate_chunk(
            model,
            x,
            t,
            &mut exits[range.clone()],
            &mut predicted[range],
        )?;
        ops.macs += counted.macs;
        ops.flops += counted.flops;
        ops.conv_calls += counted.conv_calls;
        ops.linear_calls += counted.linear_calls;
    }

    let mut counts = vec![0; n_out];
    let mut correct = vec![0; n_out];
    for ((&e, &p), &y) in exits.iter().zip(&predicted).zip(&data.labels) {
        counts[e] += 1;
        if p == y {
            correct[e] += 1;
        }
    }
    let total = data.len().max(1) as f64;
    let mean_relative_cost = counts
        .iter()
        .zip(&profile.relative)
        .map(|(&c, &r)| c as f64 * r)
        .sum::<f64>()
        / total;
    Ok(ExitStats {
        accuracy: correct.iter().sum::<usize>() as f64 / total,
        per_exit_accuracy: counts
            .iter()
            .zip(&correct)
            .map(|(&n, &k)| if n == 0 { 0.0 } else { k as f64 / n as f64 })
            .collect(),
        relative_costs: profile.relative.clone(),
        mean_relative_cost,
        counts,
        correct,
        wall_clock_per_example: None,
        ops,
    })
}

/// [`evaluate`] with timing: one warm-up pass, then the median of three.
pub fn evaluate_timed<F: Float>(
    model: &Model<F>,
    data: &Dataset,
    threshold: f64,
    profile: &CostProfile,
) -> Result<ExitStats> {
    let mut stats = evaluate(model, data, threshold, profile)?;
    let mut times = Vec::with_capacity(3);
    for _ in 0..3 {
        let start = Instant::now();
        let again = evaluate(model, data, threshold, profile)?;
        times.push(start.elapsed().as_secs_f64());
        debug_assert_eq!(again.counts, stats.counts);
    }
    times.sort_by(f64::total_cmp);
    stats.wall_clock_per_example = Some(times[1] * 1e6 / data.len().max(1) as f64);
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{count_model, Convention};
    use crate::data::{synthetic, Split};
    use crate::graph::{build_model, ExitKind, ResNetTopology, UnitPlan};

    fn small() -> (Model<f64>, Dataset) {
        let t = ResNetTopology::custom_small(
            [1, 8, 8],
            UnitPlan {
                channels: 4,
                stride: 1,
            },
            vec![
                UnitPlan {
                    channels: 4,
                    stride: 2,
                },
                UnitPlan {
                    channels: 8,
                    stride: 1,
                },
                UnitPlan {
                    channels: 8,
                    stride: 1,
                },
            ],
        );
        let m = build_model(&t, &[0, 1], ExitKind::Pool, 3, 5).unwrap();
        let d = synthetic(40, 3, [1, 8, 8], 0.2, 5, Split::Test).unwrap();
        (m, d)
    }

    fn zero_heads(m: &mut Model<f64>) {
        let ids: Vec<_> = m
            .store()
            .iter()
            .filter(|(_, p)| p.name.starts_with("exit"))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            m.store_mut().value_mut(id).data_mut().fill(0.0);
        }
    }

    #[test]
    fn zero_heads_exit_at_first_block() {
        let (mut m, d) = small();
        zero_heads(&mut m);
        let p = count_model(&m, Convention::Mac);
        let s = evaluate(&m, &d, 0.5, &p).unwrap();
        assert_eq!(s.counts, vec![40, 0, 0]);
        assert!((s.mean_relative_cost - p.relative[0]).abs() < 1e-15);
        let (x, _) = d.batch(&[0]);
        let one = infer_one(&m, &x, 0.5, &p).unwrap();
        assert_eq!(one.exit, 0);
        assert_eq!(one.ops.macs, p.flops_at_exit[0]);
    }

    #[test]
    fn unreachable_threshold_falls_through() {
        let (m, d) = small();
        let p = count_model(&m, Convention::Mac);
        let s = evaluate(&m, &d, 1.5, &p).unwrap();
        assert_eq!(s.counts, vec![0, 0, 40]);
        assert_eq!(s.mean_relative_cost, 1.0);
    }

    #[test]
    fn batched_matches_one_at_a_time() {
        let (m, d) = small();
        let p = count_model(&m, Convention::Flop);
        for t in [0.3, 0.5, 0.55, 0.7] {
            let s = evaluate(&m, &d, t, &p).unwrap();
            let mut counts = vec![0; 3];
            let mut correct = 0;
            let mut flops = 0;
            for i in 0..d.len() {
                let (x, y) = d.batch(&[i]);
                let r = infer_one(&m, &x, t, &p).unwrap();
                counts[r.exit] += 1;
                correct += usize::from(r.label() == y[0]);
                assert_eq!(r.ops.flops, p.flops_at_exit[r.exit]);
                flops += r.ops.flops;
            }
            assert_eq!(s.counts, counts);
            assert_eq!(s.correct.iter().sum::<usize>(), correct);
            assert_eq!(s.ops.flops, flops);
        }
    }

    #[test]
    fn label_matches_full_forward_row() {
        let (m, d) = small();
        let p = count_model(&m, Convention::Mac);
        let (x, _) = d.batch(&(0..d.len()).collect::<Vec<_>>());
        let all = m.predict_all(&x, Mode::Eval).unwrap();
        for i in 0..d.len() {
            let (xi, _) = d.batch(&[i]);
            let r = infer_one(&m, &xi, 0.5, &p).unwrap();
            assert_eq!(r.label(), argmax(all.probs[r.exit].row(i)));
        }
    }
}
