use rand::Rng;

use crate::error::{config, Result};
use crate::tensor::Tensor;

/// Block-diagonal weight with `groups` independent `(in/groups) x (out/groups)`
/// blocks, stored as a `[groups, in/groups, out/groups]` tensor.
///
/// Input channel group `i` only feeds output channel group `i`, so the number
/// of stored floats is `in * out / groups`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedWeight {
    blocks: Tensor,
}

impl GroupedWeight {
    /// Glorot-uniform initialization, fan sizes taken per block.
    pub fn glorot<R: Rng + ?Sized>(groups: usize, in_dim: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        check_grouping(groups, in_dim, out_dim)?;
        let (cg, dg) = (in_dim / groups, out_dim / groups);
        let limit = (6.0 / (cg + dg) as f64).sqrt();
        Ok(Self {
            blocks: Tensor::uniform(&[groups, cg, dg], -limit, limit, rng),
        })
    }

    pub fn from_blocks(blocks: Tensor) -> Result<Self> {
        blocks.expect_rank(3, "grouped weight")?;
        if blocks.shape()[0] == 0 {
            return Err(config("grouped weight needs at least one group"));
        }
        Ok(Self { blocks })
    }

    /// Single-group weight from a dense `[in, out]` matrix.
    pub fn from_dense(dense: &Tensor) -> Result<Self> {
        dense.expect_rank(2, "grouped weight")?;
        let shape = dense.shape();
        Self::from_blocks(dense.clone().reshaped(&[1, shape[0], shape[1]])?)
    }

    /// Every block set to the identity.
    pub fn identity(groups: usize, dim: usize) -> Result<Self> {
        check_grouping(groups, dim, dim)?;
        let b = dim / groups;
        let mut blocks = Tensor::zeros(&[groups, b, b]);
        for g in 0..groups {
            for i in 0..b {
                blocks.data_mut()[g * b * b + i * b + i] = 1.0;
            }
        }
        Ok(Self { blocks })
    }

    pub fn groups(&self) -> usize {
        self.blocks.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.blocks.shape()[0] * self.blocks.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.blocks.shape()[0] * self.blocks.shape()[2]
    }

    pub fn param_count(&self) -> usize {
        self.blocks.numel()
    }

    pub fn blocks(&self) -> &Tensor {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut Tensor {
        &mut self.blocks
    }

    /// Expands to the equivalent dense `[in, out]` matrix.
    pub fn to_dense(&self) -> Tensor {
        let (g, cg, dg) = (self.groups(), self.blocks.shape()[1], self.blocks.shape()[2]);
        let (c, d) = (g * cg, g * dg);
        let mut dense = Tensor::zeros(&[c, d]);
        for grp in 0..g {
            for k in 0..cg {
                for o in 0..dg {
                    dense.data_mut()[(grp * cg + k) * d + grp * dg + o] = self.blocks.data()[(grp * cg + k) * dg + o];
                }
            }
        }
        dense
    }
}

pub(crate) fn check_grouping(groups: usize, in_dim: usize, out_dim: usize) -> Result<()> {
    if groups == 0 || !in_dim.is_multiple_of(groups) || !out_dim.is_multiple_of(groups) {
        return Err(config(format!(
            "{groups} groups must divide both input ({in_dim}) and output ({out_dim}) channels"
        )));
    }
    Ok(())
}

/// Fully connected layer with bias, `x W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim).max(1) as f64).sqrt();
        Self {
            weight: Tensor::uniform(&[in_dim, out_dim], -limit, limit, rng),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}
