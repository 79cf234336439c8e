use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One 3x3 convolution unit of the backbone plan.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitPlan {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Three stages of `n` basic blocks, `depth = 6n + 2`.
    SixNPlusTwo,
    /// Explicit small plan, e.g. the 8-layer MNIST network.
    CustomSmall,
}

/// Backbone layout: a 3x3 conv-BN-ReLU stem followed by basic residual
/// blocks, each block a pair of 3x3 convolutions with a shortcut.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResNetTopology {
    pub family: Family,
    pub depth: usize,
    /// Input `[channels, height, width]`.
    pub input: [usize; 3],
    pub stem: UnitPlan,
    pub blocks: Vec<UnitPlan>,
}

impl ResNetTopology {
    /// The CIFAR-style ResNet of the given depth (20, 32, 44 or 110).
    pub fn six_n_plus_two(depth: usize, input: [usize; 3]) -> Result<Self> {
        if ![20, 32, 44, 110].contains(&depth) {
            return Err(Error::Construction(format!(
                "6n+2 depth must be one of 20, 32, 44, 110; got {depth}"
            )));
        }
        let n = (depth - 2) / 6;
        let mut blocks = Vec::with_capacity(3 * n);
        for (stage, channels) in [16, 32, 64].into_iter().enumerate() {
            for i in 0..n {
                let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                blocks.push(UnitPlan { channels, stride });
            }
        }
        Ok(Self {
            family: Family::SixNPlusTwo,
            depth,
            input,
            stem: UnitPlan {
                channels: 16,
                stride: 1,
            },
            blocks,
        })
    }

    /// The 8-layer MNIST network: a 4-filter stride-2 stem, then blocks of
    /// 4 (stride 2), 8 and 16 channels.
    pub fn eenet8() -> Self {
        Self::custom_small(
            [1, 28, 28],
            UnitPlan {
                channels: 4,
                stride: 2,
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
                    channels: 16,
                    stride: 1,
                },
            ],
        )
    }

    pub fn custom_small(input: [usize; 3], stem: UnitPlan, blocks: Vec<UnitPlan>) -> Self {
        Self {
            family: Family::CustomSmall,
            depth: 2 + 2 * blocks.len(),
            input,
            stem,
            blocks,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.contains(&0) {
            return Err(Error::Construction(format!(
                "empty input shape {:?}",
                self.input
            )));
        }
        if self.blocks.is_empty() {
            return Err(Error::Construction(
                "topology needs at least one block".into(),
            ));
        }
        let units = std::iter::once(&self.stem).chain(&self.blocks);
        if units.clone().any(|u| u.channels == 0 || u.stride == 0) {
            return Err(Error::Construction(
                "channels and strides must be positive".into(),
            ));
        }
        if self.depth != 2 + 2 * self.blocks.len() {
            return Err(Error::Construction(format!(
                "depth {} inconsistent with {} blocks",
                self.depth,
                self.blocks.len()
            )));
        }
        Ok(())
    }

    /// Boundaries where an exit may attach: after each block except the last.
    pub fn num_boundaries(&self) -> usize {
        self.blocks.len().saturating_sub(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_n_plus_two_layouts() {
        for (depth, n) in [(20, 3), (32, 5), (44, 7), (110, 18)] {
            let t = ResNetTopology::six_n_plus_two(depth, [3, 32, 32]).unwrap();
            assert_eq!(t.blocks.len(), 3 * n);
            assert_eq!(t.depth, 6 * n + 2);
            t.validate().unwrap();
            let strides: Vec<_> = t.blocks.iter().map(|b| b.stride).collect();
            assert_eq!(strides.iter().filter(|&&s| s == 2).count(), 2);
            assert_eq!(strides[n], 2);
            assert_eq!(strides[2 * n], 2);
        }
        assert!(ResNetTopology::six_n_plus_two(26, [3, 32, 32]).is_err());
    }

    #[test]
    fn eenet8_is_eight_layers() {
        let t = ResNetTopology::eenet8();
        t.validate().unwrap();
        assert_eq!(t.depth, 8);
        assert_eq!(t.num_boundaries(), 2);
    }
}
