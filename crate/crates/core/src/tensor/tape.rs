use super::kernels::{self, ConvGeom, BN_MOMENTUM, LOG_FLOOR};
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batchnorm statistic source.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, F> {
    /// Normalize with batch statistics and report them for the running update.
    Train,
    /// Normalize with the given running mean and variance.
    Eval { mean: &'a [F], var: &'a [F] },
}

/// Batch statistics observed by a training-mode batchnorm.
#[derive(Clone, Debug)]
pub struct BnStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

impl<F: Float> BnStats<F> {
    /// Fold these statistics into running estimates.
    pub fn update_running(&self, running_mean: &mut [F], running_var: &mut [F]) {
        let m = F::from_f64(BN_MOMENTUM);
        let keep = F::ONE - m;
        for (r, &b) in running_mean.iter_mut().zip(&self.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in running_var.iter_mut().zip(&self.var) {
            *r = keep * *r + m * b;
        }
    }
}

/// Work done by model primitives recorded on a tape, summed over the batch.
///
/// `macs` counts multiply-accumulates of convolutions and fully connected
/// layers. `flops` counts `2 * macs` plus bias adds and one operation per
/// element for activations, pooling and residual adds (two for batchnorm).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    pub macs: u64,
    pub flops: u64,
    pub conv_calls: u64,
    pub linear_calls: u64,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<F>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        train: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    GlobalAvgPool(Var),
    Add(Var, Var),
    Scale(Var, F),
    Reshape(Var),
    Mean(Var),
    /// `h * a + (1 - h) * b` with `h` broadcast over trailing dimensions.
    Blend {
        h: Var,
        a: Var,
        b: Var,
    },
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    requires_grad: bool,
    op: Op<F>,
}

/// Ordered record of executed primitives. Nodes are appended as ops run, so
/// every op's inputs precede it.
#[derive(Debug)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
    grad_enabled: bool,
    counter: OpCounter,
    backward_visits: usize,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            counter: OpCounter::default(),
            backward_visits: 0,
        }
    }

    /// A tape that keeps no backward caches; every node is treated as
    /// not requiring a gradient.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn counter(&self) -> OpCounter {
        self.counter
    }

    pub fn reset_counter(&mut self) {
        self.counter = OpCounter::default();
    }

    /// Number of op nodes processed by the most recent [`Tape::backward`].
    pub fn backward_visits(&self) -> usize {
        self.backward_visits
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient from the last backward pass. Present iff the node requires
    /// a gradient and a backward pass has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<F>, requires_grad: bool, op: Op<F>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects 4-d input and weight, got {xs:?} and {ws:?}"
            )));
        }
        if xs[1] != ws[1] {
            return Err(Error::Shape(format!(
                "conv2d input has {} channels but weight expects {}",
                xs[1], ws[1]
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::Shape(format!(
                    "conv2d bias {:?} does not match {} output channels",
                    self.shape(b),
                    ws[0]
                )));
            }
        }
        let (ho, wo) = match (
            kernels::conv_output_extent(xs[2], ws[2], stride, pad),
            kernels::conv_output_extent(xs[3], ws[3], stride, pad),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(Error::Shape(format!(
                    "conv2d kernel {}x{} (stride {stride}, pad {pad}) does not fit input {}x{}",
                    ws[2], ws[3], xs[2], xs[3]
                )))
            }
        };
        let geom = ConvGeom {
            n: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            ho,
            wo,
        };
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let bias = b.map(|b| self.value(b).data());
        let out = kernels::conv_forward(&cols, self.value(w).data(), bias, &geom);

        let per_example = geom.macs_per_example();
        let n = geom.n as u64;
        self.counter.conv_calls += 1;
        self.counter.macs += per_example * n;
        let bias_adds = if b.is_some() {
            (geom.c_out * geom.out_plane()) as u64
        } else {
            0
        };
        self.counter.flops += (2 * per_example + bias_adds) * n;

        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.any_grad(&inputs);
        let value = Tensor::new(vec![geom.n, geom.c_out, ho, wo], out)?;
        let cols = if rg { cols } else { Vec::new() };
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
        ))
    }

    /// `x[n, d] * w[d, k] + b[k]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::Shape(format!(
                "linear cannot multiply {xs:?} by {ws:?}"
            )));
        }
        let (n, d, k) = (xs[0], xs[1], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [k] {
                return Err(Error::Shape(format!(
                    "linear bias {:?} does not match {k} outputs",
                    self.shape(b)
                )));
            }
        }
        let out = kernels::linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            n,
            d,
            k,
        );
        self.counter.linear_calls += 1;
        self.counter.macs += (d * k * n) as u64;
        let bias_adds = if b.is_some() { k } else { 0 };
        self.counter.flops += ((2 * d * k + bias_adds) * n) as u64;

        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.any_grad(&inputs);
        Ok(self.push(Tensor::new(vec![n, k], out)?, rg, Op::Linear { x, w, b }))
    }

    /// Per-channel normalization of `[n, c, h, w]` (or `[n, c]`) activations.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, F>,
    ) -> Result<(Var, Option<BnStats<F>>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::Shape(format!(
                "batchnorm needs [n, c, ...], got {xs:?}"
            )));
        }
        let (n, c) = (xs[0], xs[1]);
        let plane: usize = xs[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!(
                "batchnorm affine parameters must have shape [{c}]"
            )));
        }
        let running = match mode {
            BnMode::Train => {
                if n * plane < 2 {
                    return Err(Error::InvalidInput(format!(
                        "training-mode batchnorm needs at least 2 values per channel, got {}",
                        n * plane
                    )));
                }
                None
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Shape(format!(
                        "batchnorm running statistics must have {c} entries"
                    )));
                }
                Some((mean, var))
            }
        };
        let fwd = kernels::batchnorm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            n,
            c,
            plane,
            running,
        );
        self.counter.flops += 2 * (n * c * plane) as u64;
        let stats = fwd.batch_stats.map(|(mean, var)| BnStats { mean, var });
        let rg = self.any_grad(&[x, gamma, beta]);
        let (xhat, inv_std) = if rg {
            (fwd.xhat, fwd.inv_std)
        } else {
            (Vec::new(), Vec::new())
        };
        let v = self.push(
            Tensor::new(xs, fwd.y)?,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: matches!(mode, BnMode::Train),
            },
        );
        Ok((v, stats))
    }

    fn unary(&mut self, x: Var, op: Op<F>, f: impl Fn(F) -> F, flops_per_elem: u64) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let shape = src.shape().to_vec();
        self.counter.flops += flops_per_elem * src.numel() as u64;
        let rg = self.any_grad(&[x]);
        self.push(Tensor { shape, data }, rg, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // Written so that NaN passes through rather than being clipped.
        self.unary(x, Op::Relu(x), |v| if v < F::ZERO { F::ZERO } else { v }, 1)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), kernels::sigmoid, 1)
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Var {
        self.unary(x, Op::Scale(x, factor), |v| v * factor, 0)
    }

    /// Softmax over the last dimension, stabilized by subtracting the row max.
    pub fn softmax(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let shape = src.shape().to_vec();
        let k = *shape.last().expect("softmax on a scalar");
        let data = kernels::softmax_rows(src.data(), k);
        self.counter.flops += src.numel() as u64;
        let rg = self.any_grad(&[x]);
        self.push(Tensor { shape, data }, rg, Op::Softmax(x))
    }

    /// Mean over the spatial extent: `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] == 0 || xs[3] == 0 {
            return Err(Error::Shape(format!(
                "global average pooling needs [n, c, h>=1, w>=1], got {xs:?}"
            )));
        }
        let plane = xs[2] * xs[3];
        let inv = F::from_f64(1.0 / plane as f64);
        let data = self
            .value(x)
            .data()
            .chunks_exact(plane)
            .map(|p| p.iter().copied().sum::<F>() * inv)
            .collect();
        self.counter.flops += self.value(x).numel() as u64;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![xs[0], xs[1]], data)?,
            rg,
            Op::GlobalAvgPool(x),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "cannot add {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.counter.flops += self.value(a).numel() as u64;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape, data }, rg, Op::Add(a, b)))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let m = src.data().iter().copied().sum::<F>() / F::from_f64(src.numel() as f64);
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(m), rg, Op::Mean(x))
    }

    /// `h * a + (1 - h) * b` where `h` is `[n]` and `a`, `b` share a shape
    /// whose leading extent is `n`.
    pub fn blend(&mut self, h: Var, a: Var, b: Var) -> Result<Var> {
        let hs = self.shape(h);
        let as_ = self.shape(a);
        if hs.len() != 1 || as_.is_empty() || as_[0] != hs[0] || as_ != self.shape(b) {
            return Err(Error::Shape(format!(
                "blend needs h [n] and matching a, b [n, ...]; got {:?}, {:?}, {:?}",
                hs,
                as_,
                self.shape(b)
            )));
        }
        let shape = as_.to_vec();
        let row: usize = shape[1..].iter().product();
        let hv = self.value(h).data();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut data = Vec::with_capacity(av.len());
        for (i, &hi) in hv.iter().enumerate() {
            for j in i * row..(i + 1) * row {
                data.push(hi * av[j] + (F::ONE - hi) * bv[j]);
            }
        }
        let rg = self.any_grad(&[h, a, b]);
        Ok(self.push(Tensor { shape, data }, rg, Op::Blend { h, a, b }))
    }

    /// Batch mean of `-ln(max(p[i, y_i], floor))` for probability rows `p`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let ps = self.shape(probs);
        if ps.len() != 2 || ps[0] != labels.len() {
            return Err(Error::Shape(format!(
                "cross entropy needs [n, k] probabilities for {} labels, got {ps:?}",
                labels.len()
            )));
        }
        let k = ps[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::InvalidInput(format!(
                "class index {bad} out of range for {k} classes"
            )));
        }
        let floor = F::from_f64(LOG_FLOOR);
        let p = self.value(probs).data();
        let total: F = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| -p[i * k + y].max(floor).ln())
            .sum();
        let loss = total / F::from_f64(labels.len() as f64);
        let rg = self.any_grad(&[probs]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a single-element `loss`, seeding its gradient with 1.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a single-element loss, got {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.backward_visits = 0;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let seed_shape = self.shape(loss).to_vec();
        self.grads[loss.0] = Some(Tensor::full(seed_shape, F::ONE));

        for idx in (0..=loss.0).rev() {
            let Some(dy) = self.grads[idx].take() else {
                continue;
            };
            self.backward_visits += 1;
            self.backward_node(idx, &dy);
            self.grads[idx] = Some(dy);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<F>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, d) in g.data_mut().iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor { shape, data: delta });
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&mut self, idx: usize, dy: &Tensor<F>) {
        let dy = dy.data();
        // Each arm computes the input gradients while `self.nodes` is borrowed,
        // then accumulates them.
        let mut pending: Vec<(Var, Vec<F>)> = Vec::with_capacity(3);
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let (dx, dw, db) = kernels::conv_backward(
                    cols,
                    self.nodes[w.0].value.data(),
                    dy,
                    geom,
                    self.wants(*x),
                );
                if let Some(dx) = dx {
                    pending.push((*x, dx));
                }
                pending.push((*w, dw));
                if let Some(b) = b {
                    pending.push((*b, db));
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.nodes[x.0].value.shape();
                let (n, d) = (xs[0], xs[1]);
                let k = self.nodes[w.0].value.shape()[1];
                let (dx, dw, db) = kernels::linear_backward(
                    self.nodes[x.0].value.data(),
                    self.nodes[w.0].value.data(),
                    dy,
                    n,
                    d,
                    k,
                );
                pending.push((*x, dx));
                pending.push((*w, dw));
                if let Some(b) = b {
                    pending.push((*b, db));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let xs = self.nodes[x.0].value.shape();
                let (n, c) = (xs[0], xs[1]);
                let plane: usize = xs[2..].iter().product();
                let (dx, dg, db) = kernels::batchnorm_backward(
                    dy,
                    xhat,
                    inv_std,
                    self.nodes[gamma.0].value.data(),
                    n,
                    c,
                    plane,
                    *train,
                );
                pending.push((*x, dx));
                pending.push((*gamma, dg));
                pending.push((*beta, db));
            }
            Op::Relu(x) => {
                let xv = self.nodes[x.0].value.data();
                let dx = xv
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v > F::ZERO { g } else { F::ZERO })
                    .collect();
                pending.push((*x, dx));
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[idx].value.data();
                let dx = y
                    .iter()
                    .zip(dy)
                    .map(|(&s, &g)| g * s * (F::ONE - s))
                    .collect();
                pending.push((*x, dx));
            }
            Op::Softmax(x) => {
                let y = self.nodes[idx].value.data();
                let k = *self.nodes[idx].value.shape().last().unwrap();
                let mut dx = vec![F::ZERO; y.len()];
                for ((yr, gr), dr) in y
                    .chunks_exact(k)
                    .zip(dy.chunks_exact(k))
                    .zip(dx.chunks_exact_mut(k))
                {
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                pending.push((*x, dx));
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.nodes[x.0].value.shape();
                let plane = xs[2] * xs[3];
                let inv = F::from_f64(1.0 / plane as f64);
                let mut dx = Vec::with_capacity(dy.len() * plane);
                for &g in dy {
                    dx.extend(std::iter::repeat_n(g * inv, plane));
                }
                pending.push((*x, dx));
            }
            Op::Add(a, b) => {
                pending.push((*a, dy.to_vec()));
                pending.push((*b, dy.to_vec()));
            }
            Op::Scale(x, f) => {
                pending.push((*x, dy.iter().map(|&g| g * *f).collect()));
            }
            Op::Reshape(x) => pending.push((*x, dy.to_vec())),
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                let g = dy[0] / F::from_f64(n as f64);
                pending.push((*x, vec![g; n]));
            }
            Op::Blend { h, a, b } => {
                let hv = self.nodes[h.0].value.data();
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let row = av.len() / hv.len().max(1);
                let mut dh = vec![F::ZERO; hv.len()];
                let mut da = vec![F::ZERO; av.len()];
                let mut db = vec![F::ZERO; bv.len()];
                for (i, &hi) in hv.iter().enumerate() {
                    for j in i * row..(i + 1) * row {
                        dh[i] += dy[j] * (av[j] - bv[j]);
                        da[j] = dy[j] * hi;
                        db[j] = dy[j] * (F::ONE - hi);
                    }
                }
                pending.push((*h, dh));
                pending.push((*a, da));
                pending.push((*b, db));
            }
            Op::CrossEntropy { probs, labels } => {
                let p = self.nodes[probs.0].value.data();
                let k = self.nodes[probs.0].value.shape()[1];
                let floor = F::from_f64(LOG_FLOOR);
                let scale = dy[0] / F::from_f64(labels.len() as f64);
                let mut dp = vec![F::ZERO; p.len()];
                for (i, &y) in labels.iter().enumerate() {
                    let v = p[i * k + y];
                    // The clamp is flat below the floor.
                    if v > floor {
                        dp[i * k + y] = -scale / v;
                    }
                }
                pending.push((*probs, dp));
            }
        }
        for (v, g) in pending {
            self.accumulate(v, g);
        }
    }
}
