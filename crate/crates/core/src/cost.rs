//! Static operation counts per stage and per exit.
//!
//! Counts are per example and follow the tape's own [`OpCounter`] rules, so a
//! hard-exit inference pass over `n` examples records exactly `n` times the
//! static count of the stages and heads it ran.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{BasicBlock, ConvBn, Dense, ExitBlock, ExitKind, FinalHead, Model, Unit};
use crate::tensor::{Float, OpCounter};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Convention {
    /// Multiply-accumulates of convolutions and fully connected layers.
    #[default]
    Mac,
    /// `2 * MAC` plus bias adds, batchnorm, activations, pooling and adds.
    Flop,
}

impl Convention {
    pub fn pick(self, c: &OpCounter) -> u64 {
        match self {
            Convention::Mac => c.macs,
            Convention::Flop => c.flops,
        }
    }
}

impl std::str::FromStr for Convention {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mac" | "macs" => Ok(Self::Mac),
            "flop" | "flops" => Ok(Self::Flop),
            other => Err(crate::Error::Config(format!(
                "unknown cost convention {other:?}"
            ))),
        }
    }
}

fn add(a: &mut OpCounter, b: OpCounter) {
    a.macs += b.macs;
    a.flops += b.flops;
    a.conv_calls += b.conv_calls;
    a.linear_calls += b.linear_calls;
}

fn elementwise(numel: usize, per_elem: u64) -> OpCounter {
    OpCounter {
        flops: per_elem * numel as u64,
        ..OpCounter::default()
    }
}

fn conv_bn(cb: &ConvBn, out: [usize; 3]) -> OpCounter {
    let c = &cb.conv;
    let macs = (out[0] * out[1] * out[2] * c.in_channels * c.kernel * c.kernel) as u64;
    let mut count = OpCounter {
        macs,
        flops: 2 * macs,
        conv_calls: 1,
        linear_calls: 0,
    };
    add(&mut count, elementwise(out.iter().product(), 2));
    count
}

fn dense(d: &Dense) -> OpCounter {
    let macs = (d.in_features * d.out_features) as u64;
    OpCounter {
        macs,
        flops: 2 * macs + d.out_features as u64,
        conv_calls: 0,
        linear_calls: 1,
    }
}

fn block(b: &BasicBlock, out: [usize; 3]) -> OpCounter {
    let numel: usize = out.iter().product();
    let mut count = conv_bn(&b.conv1, out);
    add(&mut count, elementwise(numel, 1));
    add(&mut count, conv_bn(&b.conv2, out));
    if let Some(s) = &b.shortcut {
        add(&mut count, conv_bn(s, out));
    }
    add(&mut count, elementwise(numel, 2));
    count
}

fn unit(u: &Unit, out: [usize; 3]) -> OpCounter {
    match u {
        Unit::Stem(cb) => {
            let mut count = conv_bn(cb, out);
            add(&mut count, elementwise(out.iter().product(), 1));
            count
        }
        Unit::Block(b) => block(b, out),
    }
}

/// Per-example count of one exit block, both heads included.
pub fn exit_block_ops(e: &ExitBlock) -> OpCounter {
    let s = e.spec;
    let numel = s.in_channels * s.in_spatial.0 * s.in_spatial.1;
    let mut count = match s.kind {
        ExitKind::Plain => OpCounter::default(),
        ExitKind::Pool => elementwise(numel, 1),
        // batchnorm (2), relu (1), pooling (1)
        ExitKind::Bnpool => elementwise(numel, 4),
    };
    add(&mut count, dense(&e.classifier));
    add(&mut count, elementwise(s.num_classes, 1));
    add(&mut count, dense(&e.confidence));
    add(&mut count, elementwise(1, 1));
    count
}

fn final_head(h: &FinalHead, input: [usize; 3]) -> OpCounter {
    let mut count = elementwise(input.iter().product(), 1);
    add(&mut count, dense(&h.dense));
    add(&mut count, elementwise(h.dense.out_features, 1));
    count
}

/// Per-example counts of a model, split the way inference executes it.
#[derive(Clone, Debug, PartialEq)]
pub struct CostProfile {
    pub convention: Convention,
    /// Backbone stages only, `N + 1` entries.
    pub stage_ops: Vec<OpCounter>,
    /// Exit block `i` (both heads), `N` entries.
    pub exit_ops: Vec<OpCounter>,
    pub head_ops: OpCounter,
    /// Cumulative cost of stopping at exit `i`: stages `0..=i` and exit
    /// heads `0..=i`; the last entry adds the final stage and head.
    pub flops_at_exit: Vec<u64>,
    /// `flops_at_exit[i] / flops_at_exit[N]`.
    pub relative: Vec<f64>,
    /// Cost of each exit block under the chosen convention.
    pub exit_overhead: Vec<u64>,
}

impl CostProfile {
    pub fn num_exits(&self) -> usize {
        self.exit_ops.len()
    }

    /// Cost under the convention of segment `i`: stage `i` plus the head
    /// read after it. Segments sum to `flops_at_exit[N]`.
    pub fn segment(&self, i: usize) -> u64 {
        let head = if i < self.exit_ops.len() {
            &self.exit_ops[i]
        } else {
            &self.head_ops
        };
        self.convention.pick(&self.stage_ops[i]) + self.convention.pick(head)
    }

    pub fn total(&self) -> u64 {
        *self.flops_at_exit.last().expect("at least the final exit")
    }

    /// The cost report: `exit_index, absolute_ops, relative_cost, overhead_ops`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "exit_index",
            "absolute_ops",
            "relative_cost",
            "overhead_ops",
        ])?;
        let head = self.convention.pick(&self.head_ops);
        for i in 0..self.flops_at_exit.len() {
            let overhead = self.exit_overhead.get(i).copied().unwrap_or(head);
            w.write_record([
                i.to_string(),
                self.flops_at_exit[i].to_string(),
                format!("{:.6}", self.relative[i]),
                overhead.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary(&self, mut out: impl Write) -> Result<()> {
        for i in 0..self.flops_at_exit.len() {
            let label = if i == self.num_exits() {
                "final".to_string()
            } else {
                format!("exit {i}")
            };
            writeln!(
                out,
                "{label:>8}  {:>14}  {:.4}",
                self.flops_at_exit[i], self.relative[i]
            )?;
        }
        Ok(())
    }
}

/// Per-example counts of each backbone unit (stem first).
pub fn unit_ops<F: Float>(model: &Model<F>) -> Vec<OpCounter> {
    model
        .units()
        .iter()
        .zip(model.unit_shapes())
        .map(|(u, &out)| unit(u, out))
        .collect()
}

pub fn count_model<F: Float>(model: &Model<F>, convention: Convention) -> CostProfile {
    let units = unit_ops(model);
    let stage_ops: Vec<OpCounter> = model
        .stages()
        .iter()
        .map(|r| {
            let mut c = OpCounter::default();
            for u in &units[r.clone()] {
                add(&mut c, *u);
            }
            c
        })
        .collect();
    let exit_ops: Vec<OpCounter> = model.exits().iter().map(exit_block_ops).collect();
    let last_shape = *model.unit_shapes().last().expect("model has units");
    let head_ops = final_head(model.head(), last_shape);

    let mut profile = CostProfile {
        convention,
        exit_overhead: exit_ops.iter().map(|c| convention.pick(c)).collect(),
        stage_ops,
        exit_ops,
        head_ops,
        flops_at_exit: Vec::new(),
        relative: Vec::new(),
    };
    let mut acc = 0;
    for i in 0..profile.stage_ops.len() {
        acc += profile.segment(i);
        profile.flops_at_exit.push(acc);
    }
    let total = acc as f64;
    profile.relative = profile
        .flops_at_exit
        .iter()
        .map(|&v| v as f64 / total)
        .collect();
    *profile
        .relative
        .last_mut()
        .expect("at least the final exit") = 1.0;
    profile
}

/// Relative `c_0 .. c_N`.
pub fn exit_costs(profile: &CostProfile) -> Vec<f64> {
    profile.relative.clone()
}

/// Cumulative backbone cost after each block boundary, as a fraction of the
/// whole backbone plus final head. Exit heads are not included.
pub fn boundary_fractions<F: Float>(model: &Model<F>, convention: Convention) -> Vec<f64> {
    let units = unit_ops(model);
    let last_shape = *model.unit_shapes().last().expect("model has units");
    let total: u64 = units.iter().map(|c| convention.pick(c)).sum::<u64>()
        + convention.pick(&final_head(model.head(), last_shape));
    let mut acc = 0;
    let mut out = Vec::with_capacity(model.topology().num_boundaries());
    // Boundary b sits after unit b + 1 (unit 0 is the stem).
    for (j, u) in units.iter().enumerate().take(units.len() - 1) {
        acc += convention.pick(u);
        if j >= 1 {
            out.push(acc as f64 / total as f64);
        }
    }
    out
}
