//! Early-exit network construction and the all-exits forward pass.
//!
//! A [`Model`] is a residual backbone cut into `N + 1` stages. Exit block `i`
//! reads the feature map produced by stage `i`; the final Pool-style head
//! reads the output of the last stage. Exit blocks hang off the main path and
//! never feed back into it.

mod checkpoint;
mod layers;
mod params;
mod topology;

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use layers::{
    BasicBlock, BatchNorm, BnUpdate, Conv, ConvBn, Dense, ExitBlock, ExitBlockSpec, ExitKind,
    FinalHead, Pass, Unit,
};
pub use params::{Binding, Param, ParamId, ParamStore};
pub use topology::{Family, ResNetTopology, UnitPlan};

use crate::error::{Error, Result};
use crate::tensor::{conv_output_extent, Float, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Everything produced by [`Model::forward_all_exits`].
pub struct ExitOutputs<F> {
    /// `h_i` as `[n]`, one per early exit.
    pub confidences: Vec<Var>,
    /// `ŷ_0 .. ŷ_N` as `[n, k]`; the last entry is the final head.
    pub probs: Vec<Var>,
    /// Which tape leaf holds each parameter, for reading gradients.
    pub binding: Binding,
    pub bn_updates: Vec<BnUpdate<F>>,
}

/// Plain values of every exit for a batch.
#[derive(Clone, Debug)]
pub struct ExitValues<F> {
    pub confidences: Vec<Vec<F>>,
    pub probs: Vec<Tensor<F>>,
}

#[derive(Clone, Debug)]
pub struct Model<F> {
    topology: ResNetTopology,
    placements: Vec<usize>,
    exit_kind: ExitKind,
    num_classes: usize,
    store: ParamStore<F>,
    units: Vec<Unit>,
    /// Output `[c, h, w]` of each unit.
    unit_shapes: Vec<[usize; 3]>,
    stages: Vec<Range<usize>>,
    exits: Vec<ExitBlock>,
    head: FinalHead,
}

/// Builds an early-exit network. `placements` are boundary indices (exit
/// after block `b`), strictly increasing; an empty list gives a plain CNN.
pub fn build_model<F: Float>(
    topology: &ResNetTopology,
    placements: &[usize],
    exit_kind: ExitKind,
    num_classes: usize,
    seed: u64,
) -> Result<Model<F>> {
    topology.validate()?;
    if num_classes == 0 {
        return Err(Error::Construction("num_classes must be positive".into()));
    }
    if placements.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Construction(format!(
            "placements must be strictly increasing, got {placements:?}"
        )));
    }
    if let Some(&bad) = placements.iter().find(|&&b| b >= topology.num_boundaries()) {
        return Err(Error::Construction(format!(
            "placement {bad} is beyond the last boundary ({} available)",
            topology.num_boundaries()
        )));
    }

    let mut store = ParamStore::new();
    let mut units = Vec::with_capacity(topology.blocks.len() + 1);
    let mut unit_shapes = Vec::with_capacity(topology.blocks.len() + 1);
    let [c0, h0, w0] = topology.input;

    let advance = |h: usize, w: usize, stride: usize| -> Result<(usize, usize)> {
        match (
            conv_output_extent(h, 3, stride, 1),
            conv_output_extent(w, 3, stride, 1),
        ) {
            (Some(h), Some(w)) => Ok((h, w)),
            _ => Err(Error::Construction(format!(
                "a stride-{stride} 3x3 convolution does not fit a {h}x{w} map"
            ))),
        }
    };

    let (mut h, mut w) = advance(h0, w0, topology.stem.stride)?;
    units.push(Unit::Stem(ConvBn::new(
        &mut store,
        "stem",
        c0,
        topology.stem.channels,
        3,
        topology.stem.stride,
        seed,
    )));
    let mut channels = topology.stem.channels;
    unit_shapes.push([channels, h, w]);
    for (j, plan) in topology.blocks.iter().enumerate() {
        (h, w) = advance(h, w, plan.stride)?;
        units.push(Unit::Block(BasicBlock::new(
            &mut store,
            &format!("block{j}"),
            channels,
            plan.channels,
            plan.stride,
            seed,
        )));
        channels = plan.channels;
        unit_shapes.push([channels, h, w]);
    }

    // Boundary b sits after block b, i.e. after unit b + 1.
    let mut stages = Vec::with_capacity(placements.len() + 1);
    let mut start = 0;
    for &b in placements {
        stages.push(start..b + 2);
        start = b + 2;
    }
    stages.push(start..units.len());

    let exits = placements
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            let [c, h, w] = unit_shapes[b + 1];
            let spec = ExitBlockSpec {
                kind: exit_kind,
                in_channels: c,
                in_spatial: (h, w),
                num_classes,
            };
            ExitBlock::new(&mut store, &format!("exit{i}"), spec, seed)
        })
        .collect();
    let head = FinalHead {
        dense: Dense::new(&mut store, "head", channels, num_classes, seed),
    };

    Ok(Model {
        topology: topology.clone(),
        placements: placements.to_vec(),
        exit_kind,
        num_classes,
        store,
        units,
        unit_shapes,
        stages,
        exits,
        head,
    })
}

impl<F: Float> Model<F> {
    pub fn topology(&self) -> &ResNetTopology {
        &self.topology
    }

    pub fn placements(&self) -> &[usize] {
        &self.placements
    }

    pub fn exit_kind(&self) -> ExitKind {
        self.exit_kind
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Number of early exits `N`.
    pub fn num_exits(&self) -> usize {
        self.exits.len()
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn unit_shapes(&self) -> &[[usize; 3]] {
        &self.unit_shapes
    }

    /// Unit index ranges of the `N + 1` stages.
    pub fn stages(&self) -> &[Range<usize>] {
        &self.stages
    }

    pub fn exits(&self) -> &[ExitBlock] {
        &self.exits
    }

    pub fn head(&self) -> &FinalHead {
        &self.head
    }

    /// Convolutions on the main path (shortcut projections included).
    pub fn conv_count(&self) -> usize {
        self.units
            .iter()
            .map(|u| match u {
                Unit::Stem(_) => 1,
                Unit::Block(b) => 2 + usize::from(b.shortcut.is_some()),
            })
            .sum()
    }

    /// `[n, c, h, w]` for a batch of `n`.
    pub fn input_shape(&self, n: usize) -> Vec<usize> {
        let [c, h, w] = self.topology.input;
        vec![n, c, h, w]
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.topology.input {
            return Err(Error::Shape(format!(
                "model expects input [n, {:?}], got {shape:?}",
                self.topology.input
            )));
        }
        Ok(())
    }

    pub fn pass<'a>(&'a self, tape: &'a mut Tape<F>, mode: Mode, trainable: bool) -> Pass<'a, F> {
        Pass::new(tape, &self.store, mode, trainable)
    }

    /// Runs `CNN_Layers_i`.
    pub fn run_stage(&self, pass: &mut Pass<'_, F>, stage: usize, x: Var) -> Result<Var> {
        let mut y = x;
        for unit in &self.units[self.stages[stage].clone()] {
            y = unit.forward(pass, y)?;
        }
        if !pass.tape.value(y).all_finite() {
            return Err(Error::NonFiniteActivation { stage });
        }
        Ok(y)
    }

    /// Runs exit block `i`, returning `(h_i, ŷ_i)`.
    pub fn run_exit(&self, pass: &mut Pass<'_, F>, exit: usize, x: Var) -> Result<(Var, Var)> {
        self.exits[exit].forward(pass, x)
    }

    pub fn run_head(&self, pass: &mut Pass<'_, F>, x: Var) -> Result<Var> {
        self.head.forward(pass, x)
    }

    /// Executes every stage once and every exit head, regardless of the
    /// confidence values. Parameters become leaves that require gradients.
    pub fn forward_all_exits(
        &self,
        tape: &mut Tape<F>,
        x: Var,
        mode: Mode,
    ) -> Result<ExitOutputs<F>> {
        self.check_input(tape.shape(x))?;
        let mut pass = self.pass(tape, mode, true);
        let mut confidences = Vec::with_capacity(self.exits.len());
        let mut probs = Vec::with_capacity(self.exits.len() + 1);
        let mut y = x;
        for i in 0..self.exits.len() {
            y = self.run_stage(&mut pass, i, y)?;
            let (h, p) = self.run_exit(&mut pass, i, y)?;
            confidences.push(h);
            probs.push(p);
        }
        y = self.run_stage(&mut pass, self.exits.len(), y)?;
        probs.push(self.run_head(&mut pass, y)?);
        Ok(ExitOutputs {
            confidences,
            probs,
            binding: pass.binding,
            bn_updates: pass.updates,
        })
    }

    /// Values of every exit for `x`, on a throwaway inference tape.
    pub fn predict_all(&self, x: &Tensor<F>, mode: Mode) -> Result<ExitValues<F>> {
        let mut tape = Tape::inference();
        let input = tape.constant(x.clone());
        let out = self.forward_all_exits(&mut tape, input, mode)?;
        Ok(ExitValues {
            confidences: out
                .confidences
                .iter()
                .map(|&h| tape.value(h).data().to_vec())
                .collect(),
            probs: out.probs.iter().map(|&p| tape.value(p).clone()).collect(),
        })
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<F>]) {
        for u in updates {
            let mut mean = self.store.value(u.mean).clone();
            let mut var = self.store.value(u.var).clone();
            u.stats.update_running(mean.data_mut(), var.data_mut());
            *self.store.value_mut(u.mean) = mean;
            *self.store.value_mut(u.var) = var;
        }
    }

    /// Trainable parameter count of the whole network.
    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Copies every tensor whose name also exists in `other`.
    pub fn copy_shared_params(&mut self, other: &Model<F>) -> Result<usize> {
        let mut copied = 0;
        for (_, p) in other.store.iter() {
            if let Some(id) = self.store.find(&p.name) {
                if self.store.value(id).shape() != p.value.shape() {
                    return Err(Error::Shape(format!(
                        "parameter {} differs in shape",
                        p.name
                    )));
                }
                *self.store.value_mut(id) = p.value.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eenet8(n_exits: usize, kind: ExitKind) -> Model<f64> {
        let placements: Vec<usize> = (0..n_exits).collect();
        build_model(&ResNetTopology::eenet8(), &placements, kind, 10, 3).unwrap()
    }

    #[test]
    fn stage_ranges_cover_units() {
        let m = eenet8(2, ExitKind::Pool);
        assert_eq!(m.stages(), &[0..2, 2..3, 3..4]);
        assert_eq!(
            m.unit_shapes(),
            &[[4, 14, 14], [4, 7, 7], [8, 7, 7], [16, 7, 7]]
        );
        let m = eenet8(0, ExitKind::Pool);
        assert_eq!(m.stages().len(), 1);
        assert_eq!(m.stages()[0], 0..4);
    }

    #[test]
    fn rejects_bad_placements() {
        let t = ResNetTopology::eenet8();
        assert!(build_model::<f64>(&t, &[1, 0], ExitKind::Pool, 10, 0).is_err());
        assert!(build_model::<f64>(&t, &[1, 1], ExitKind::Pool, 10, 0).is_err());
        assert!(matches!(
            build_model::<f64>(&t, &[2], ExitKind::Pool, 10, 0),
            Err(Error::Construction(_))
        ));
    }

    #[test]
    fn pool_exit_param_count_closed_form() {
        let spec = ExitBlockSpec {
            kind: ExitKind::Pool,
            in_channels: 64,
            in_spatial: (8, 8),
            num_classes: 10,
        };
        assert_eq!(spec.head_param_count(), 65 * 10 + 65);
        let plain = ExitBlockSpec {
            kind: ExitKind::Plain,
            ..spec
        };
        assert_eq!(plain.head_param_count(), (64 * 8 * 8 + 1) * 11);
    }

    #[test]
    fn exit_param_counts_match_store() {
        for kind in [ExitKind::Plain, ExitKind::Pool, ExitKind::Bnpool] {
            let with = eenet8(2, kind);
            let without = eenet8(0, kind);
            let exits: usize = with.exits().iter().map(|e| e.param_count()).sum();
            assert_eq!(with.param_count(), without.param_count() + exits);
        }
    }

    #[test]
    fn forward_emits_n_confidences_and_n_plus_one_distributions() {
        let m = eenet8(2, ExitKind::Pool);
        let x = Tensor::full(m.input_shape(1), 0.3);
        let out = m.predict_all(&x, Mode::Eval).unwrap();
        assert_eq!(out.confidences.len(), 2);
        assert_eq!(out.probs.len(), 3);
        for p in &out.probs {
            let s: f64 = p.data().iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn plain_cnn_has_only_final_output() {
        let t = ResNetTopology::six_n_plus_two(20, [3, 8, 8]).unwrap();
        let m: Model<f64> = build_model(&t, &[], ExitKind::Pool, 10, 1).unwrap();
        let x = Tensor::full(m.input_shape(2), 0.1);
        let out = m.predict_all(&x, Mode::Eval).unwrap();
        assert!(out.confidences.is_empty());
        assert_eq!(out.probs.len(), 1);
        assert_eq!(out.probs[0].shape(), [2, 10]);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let m = eenet8(1, ExitKind::Pool);
        let x = Tensor::zeros(vec![1, 1, 14, 14]);
        assert!(matches!(
            m.predict_all(&x, Mode::Eval),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn non_finite_input_names_the_stage() {
        let m = eenet8(1, ExitKind::Pool);
        let mut x = Tensor::zeros(m.input_shape(1));
        x.data_mut()[5] = f64::NAN;
        assert!(matches!(
            m.predict_all(&x, Mode::Eval),
            Err(Error::NonFiniteActivation { stage: 0 })
        ));
    }

    #[test]
    fn init_is_independent_of_exit_layout() {
        let a = eenet8(2, ExitKind::Pool);
        let b = eenet8(0, ExitKind::Pool);
        for (_, p) in b.store().iter() {
            let id = a.store().find(&p.name).unwrap();
            assert_eq!(a.store().value(id), &p.value, "{}", p.name);
        }
    }
}
