use serde::{Deserialize, Serialize};

use super::params::{Binding, ParamId, ParamStore};
use super::Mode;
use crate::error::Result;
use crate::tensor::{BnMode, BnStats, Float, Tape, Var};

/// Running-statistic update produced by a training-mode batchnorm.
#[derive(Clone, Debug)]
pub struct BnUpdate<F> {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BnStats<F>,
}

/// State threaded through one forward pass.
pub struct Pass<'a, F: Float> {
    pub tape: &'a mut Tape<F>,
    pub store: &'a ParamStore<F>,
    pub binding: Binding,
    pub mode: Mode,
    pub updates: Vec<BnUpdate<F>>,
}

impl<'a, F: Float> Pass<'a, F> {
    pub fn new(
        tape: &'a mut Tape<F>,
        store: &'a ParamStore<F>,
        mode: Mode,
        trainable: bool,
    ) -> Self {
        Self {
            binding: Binding::new(store, trainable),
            tape,
            store,
            mode,
            updates: Vec::new(),
        }
    }

    fn var(&mut self, id: ParamId) -> Var {
        self.binding.var(self.tape, self.store, id)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// Bias-free convolution (a batchnorm always follows).
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        seed: u64,
    ) -> Self {
        let weight = store.he_normal(
            format!("{name}.weight"),
            vec![out_channels, in_channels, kernel, kernel],
            in_channels * kernel * kernel,
            seed,
        );
        Self {
            weight,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward<F: Float>(&self, pass: &mut Pass<'_, F>, x: Var) -> Result<Var> {
        let w = pass.var(self.weight);
        pass.tape.conv2d(x, w, None, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new<F: Float>(store: &mut ParamStore<F>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.filled(format!("{name}.gamma"), vec![channels], 1.0, true),
            beta: store.filled(format!("{name}.beta"), vec![channels], 0.0, true),
            running_mean: store.filled(format!("{name}.running_mean"), vec![channels], 0.0, false),
            running_var: store.filled(format!("{name}.running_var"), vec![channels], 1.0, false),
            channels,
        }
    }

    pub fn forward<F: Float>(&self, pass: &mut Pass<'_, F>, x: Var) -> Result<Var> {
        let gamma = pass.var(self.gamma);
        let beta = pass.var(self.beta);
        let mode = match pass.mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval {
                mean: pass.store.value(self.running_mean).data(),
                var: pass.store.value(self.running_var).data(),
            },
        };
        let (y, stats) = pass.tape.batch_norm(x, gamma, beta, mode)?;
        if let Some(stats) = stats {
            pass.updates.push(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                stats,
            });
        }
        Ok(y)
    }
}

/// Fully connected layer `x[n, d] * w[d, k] + b[k]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Dense {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        in_features: usize,
        out_features: usize,
        seed: u64,
    ) -> Self {
        Self {
            weight: store.he_normal(
                format!("{name}.weight"),
                vec![in_features, out_features],
                in_features,
                seed,
            ),
            bias: store.filled(format!("{name}.bias"), vec![out_features], 0.0, true),
            in_features,
            out_features,
        }
    }

    pub fn forward<F: Float>(&self, pass: &mut Pass<'_, F>, x: Var) -> Result<Var> {
        let w = pass.var(self.weight);
        let b = pass.var(self.bias);
        pass.tape.linear(x, w, Some(b))
    }

    pub fn param_count(&self) -> usize {
        (self.in_features + 1) * self.out_features
    }
}

#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        seed: u64,
    ) -> Self {
        let pad = kernel / 2;
        Self {
            conv: Conv::new(
                store,
                &format!("{name}.conv"),
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
                seed,
            ),
            bn: BatchNorm::new(store, &format!("{name}.bn"), out_channels),
        }
    }

    pub fn forward<F: Float>(&self, pass: &mut Pass<'_, F>, x: Var) -> Result<Var> {
        let y = self.conv.forward(pass, x)?;
        self.bn.forward(pass, y)
    }
}

/// `relu(bn(conv(relu(bn(conv(x))))) + shortcut(x))`, where the shortcut is
/// a 1x1 conv-BN projection whenever the shape changes.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub shortcut: Option<ConvBn>,
}

impl BasicBlock {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        seed: u64,
    ) -> Self {
        let conv1 = ConvBn::new(
            store,
            &format!("{name}.conv1"),
            in_channels,
            out_channels,
            3,
            stride,
            seed,
        );
        let conv2 = ConvBn::new(
            store,
            &format!("{name}.conv2"),
            out_channels,
            out_channels,
            3,
            1,
            seed,
        );
        let shortcut = (stride != 1 || in_channels != out_channels).then(|| {
            ConvBn::new(
                store,
                &format!("{name}.shortcut"),
                in_channels,
                out_channels,
                1,
                stride,
                seed,
            )
        });
        Self {
            conv1,
            conv2,
            shortcut,
        }
    }

    pub fn forward<F: Float>(&self, pass: &mut Pass<'_, F>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(pass, x)?;
        let y = pass.tape.relu(y);
        let y = self.conv2.forward(pass, y)?;
        let skip = match &self.shortcut {
            Some(proj) => proj.forward(pass, x)?,
            None => x,
        };
        let sum = pass.tape.add(y, skip)?;
        Ok(pass.tape.relu(sum))
    }
}

/// Backbone unit: the stem or a residual block.
#[derive(Clone, Debug)]
pub enum Unit {
    Stem(ConvBn),
    Block(BasicBlock),
}

impl Unit {
    pub fn forward<F: Float>(&self, pass: &mut Pass<'_, F>, x: Var) -> Result<Var> {
        match self {
            Unit::Stem(c) => {
                let y = c.forward(pass, x)?;
                Ok(pass.tape.relu(y))
            }
            Unit::Block(b) => b.forward(pass, x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExitKind {
    /// Both heads read the flattened `c * h * w` feature map (channel-major).
    Plain,
    /// Global average pooling, then both heads.
    Pool,
    /// Batchnorm, ReLU and global average pooling, then both heads.
    Bnpool,
}

impl std::str::FromStr for ExitKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "plain" => Ok(Self::Plain),
            "pool" => Ok(Self::Pool),
            "bnpool" => Ok(Self::Bnpool),
            other => Err(crate::Error::Config(format!("unknown exit kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitBlockSpec {
    pub kind: ExitKind,
    pub in_channels: usize,
    pub in_spatial: (usize, usize),
    pub num_classes: usize,
}

impl ExitBlockSpec {
    /// Width of the features both heads read.
    pub fn feature_dim(&self) -> usize {
        match self.kind {
            ExitKind::Plain => self.in_channels * self.in_spatial.0 * self.in_spatial.1,
            ExitKind::Pool | ExitKind::Bnpool => self.in_channels,
        }
    }

    /// Parameters of the two fully connected heads: `(d + 1) * (k + 1)`.
    pub fn head_param_count(&self) -> usize {
        (self.feature_dim() + 1) * (self.num_classes + 1)
    }
}

/// Classification head plus sigmoid confidence head.
#[derive(Clone, Debug)]
pub struct ExitBlock {
    pub spec: ExitBlockSpec,
    pub bn: Option<BatchNorm>,
    pub classifier: Dense,
    pub confidence: Dense,
}

impl ExitBlock {
    pub fn new<F: Float>(
        store: &mut ParamStore<F>,
        name: &str,
        spec: ExitBlockSpec,
        seed: u64,
    ) -> Self {
        let bn = (spec.kind == ExitKind::Bnpool)
            .then(|| BatchNorm::new(store, &format!("{name}.bn"), spec.in_channels));
        let d = spec.feature_dim();
        Self {
            spec,
            bn,
            classifier: Dense::new(
                store,
                &format!("{name}.classifier"),
                d,
                spec.num_classes,
                seed,
            ),
            confidence: Dense::new(store, &format!("{name}.confidence"), d, 1, seed),
        }
    }

    /// Returns the confidence `h` as `[n]` and class probabilities `[n, k]`.
    pub fn forward<F: Float>(&self, pass: &mut Pass<'_, F>, x: Var) -> Result<(Var, Var)> {
        let n = pass.tape.shape(x)[0];
        let features = match self.spec.kind {
            ExitKind::Plain => pass.tape.reshape(x, vec![n, self.spec.feature_dim()])?,
            ExitKind::Pool => pass.tape.global_avg_pool(x)?,
            ExitKind::Bnpool => {
                let bn = self.bn.as_ref().expect("bnpool exit has a batchnorm");
                let y = bn.forward(pass, x)?;
                let y = pass.tape.relu(y);
                pass.tape.global_avg_pool(y)?
            }
        };
        let logits = self.classifier.forward(pass, features)?;
        let probs = pass.tape.softmax(logits);
        let score = self.confidence.forward(pass, features)?;
        let h = pass.tape.sigmoid(score);
        let h = pass.tape.reshape(h, vec![n])?;
        Ok((h, probs))
    }

    /// All trainable parameters, including a Bnpool exit's affine batchnorm.
    pub fn param_count(&self) -> usize {
        self.spec.head_param_count() + self.bn.as_ref().map_or(0, |bn| 2 * bn.channels)
    }
}

/// Final Pool-style classifier: global average pooling, FC, softmax.
#[derive(Clone, Debug)]
pub struct FinalHead {
    pub dense: Dense,
}

impl FinalHead {
    pub fn forward<F: Float>(&self, pass: &mut Pass<'_, F>, x: Var) -> Result<Var> {
        let z = pass.tape.global_avg_pool(x)?;
        let logits = self.dense.forward(pass, z)?;
        Ok(pass.tape.softmax(logits))
    }
}
