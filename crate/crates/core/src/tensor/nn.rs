use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::{Error, Result};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

impl Tensor {
    /// Softmax along `axis`, shifted by the (constant) maximum for stability.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let max = self.max_keepdim(axis)?;
        let e = self.sub(&max.expand(self.shape())?)?.exp();
        let s = e.sum_keepdim(&[axis])?;
        e.div(&s.expand(self.shape())?)
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        let max = self.max_keepdim(axis)?;
        let shifted = self.sub(&max.expand(self.shape())?)?;
        let lse = shifted.exp().sum_keepdim(&[axis])?.log()?;
        shifted.sub(&lse.expand(self.shape())?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Per-channel running mean and (unbiased) variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    pub fn new(channels: usize) -> RunningStats {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

/// Batch normalization over every axis except axis 1 (channels).
///
/// Train mode normalizes with the batch statistics and folds them into
/// `stats` with momentum [`BN_MOMENTUM`]; eval mode uses `stats` as constants.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut RunningStats,
    mode: BatchNormMode,
) -> Result<Tensor> {
    let c = x.dim(1)?;
    if gamma.numel() != c || beta.numel() != c || stats.mean.len() != c {
        return Err(Error::shape("batch_norm", x.shape(), gamma.shape()));
    }
    let mut chan = vec![1usize; x.rank()];
    chan[1] = c;
    let axes: Vec<usize> = (0..x.rank()).filter(|&a| a != 1).collect();
    let gamma = gamma.reshape(&chan)?.expand(x.shape())?;
    let beta = beta.reshape(&chan)?.expand(x.shape())?;
    let normalized = match mode {
        BatchNormMode::Train => {
            let n = x.numel() / c;
            let mean = x.mean_keepdim(&axes)?;
            let centered = x.sub(&mean.expand(x.shape())?)?;
            let var = centered.square().mean_keepdim(&axes)?;
            let std = var.add_scalar(BN_EPS).sqrt()?;
            let bessel = if n > 1 { n as f32 / (n - 1) as f32 } else { 1.0 };
            for i in 0..c {
                stats.mean[i] = (1.0 - BN_MOMENTUM) * stats.mean[i] + BN_MOMENTUM * mean.data()[i];
                stats.var[i] = (1.0 - BN_MOMENTUM) * stats.var[i] + BN_MOMENTUM * var.data()[i] * bessel;
            }
            centered.div(&std.expand(x.shape())?)?
        }
        BatchNormMode::Eval => {
            let mean = Tensor::new(stats.mean.clone(), &chan)?.expand(x.shape())?;
            let std: Vec<f32> = stats.var.iter().map(|v| (v + BN_EPS).sqrt()).collect();
            let std = Tensor::new(std, &chan)?.expand(x.shape())?;
            x.sub(&mean)?.div(&std)?
        }
    };
    normalized.mul(&gamma)?.add(&beta)
}
