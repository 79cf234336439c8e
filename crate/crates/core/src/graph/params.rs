use rand_distr::{Distribution, StandardNormal};

use crate::seed;
use crate::tensor::{Float, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    /// Running statistics are stored here too but are not optimized.
    pub trainable: bool,
}

/// Flat, ordered storage of every named tensor in a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    fn push(&mut self, name: String, value: Tensor<F>, trainable: bool) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    /// He-style normal weights, `std = sqrt(2 / fan_in)`. Each tensor draws
    /// from its own stream keyed by name, so a parameter's initial value does
    /// not depend on which other layers exist.
    pub fn he_normal(
        &mut self,
        name: String,
        shape: Vec<usize>,
        fan_in: usize,
        seed: u64,
    ) -> ParamId {
        let mut rng = seed::rng(seed, &name);
        let std = (2.0 / fan_in as f64).sqrt();
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                F::from_f64(z * std)
            })
            .collect();
        let value = Tensor::new(shape, data).expect("shape and data agree");
        self.push(name, value, true)
    }

    pub fn filled(
        &mut self,
        name: String,
        shape: Vec<usize>,
        value: f64,
        trainable: bool,
    ) -> ParamId {
        self.push(name, Tensor::full(shape, F::from_f64(value)), trainable)
    }
}

/// Lazily places parameters on a tape, one leaf per parameter per pass.
#[derive(Debug)]
pub struct Binding {
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl Binding {
    /// `trainable` marks the leaves as requiring gradients.
    pub fn new<F: Float>(store: &ParamStore<F>, trainable: bool) -> Self {
        Self {
            vars: vec![None; store.len()],
            trainable,
        }
    }

    pub fn var<F: Float>(&mut self, tape: &mut Tape<F>, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let p = store.get(id);
        let v = tape.leaf(p.value.clone(), self.trainable && p.trainable);
        self.vars[id.0] = Some(v);
        v
    }

    /// Parameters that were placed on the tape during this pass.
    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }
}
