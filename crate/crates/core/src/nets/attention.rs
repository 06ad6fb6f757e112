use crate::tensor::Tensor;
use crate::{Error, Result};

use super::Param;

/// Indices of one attention layer's parameters in the owning network.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub query_w: usize,
    pub query_b: usize,
    pub key_w: usize,
    pub key_b: usize,
    pub value_w: usize,
    pub value_b: usize,
    pub gamma: usize,
}

/// The tensors of one attention layer.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub query_w: Tensor,
    pub query_b: Tensor,
    pub key_w: Tensor,
    pub key_b: Tensor,
    pub value_w: Tensor,
    pub value_b: Tensor,
    pub gamma: Tensor,
}

impl AttentionParams {
    pub(crate) fn resolve(&self, params: &[Param]) -> AttentionWeights {
        let p = |i: usize| params[i].value.clone();
        AttentionWeights {
            query_w: p(self.query_w),
            query_b: p(self.query_b),
            key_w: p(self.key_w),
            key_b: p(self.key_b),
            value_w: p(self.value_w),
            value_b: p(self.value_b),
            gamma: p(self.gamma),
        }
    }
}

pub(crate) fn param_count(c: usize) -> usize {
    let c8 = c / 8;
    2 * (c8 * c + c8) + c * c + c + 1
}

/// 1×1 convolution flattened to [B, O, H·W].
fn project(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let y = x.conv2d(w, 1, 0)?;
    let o = w.shape()[0];
    let y = y.add(&b.reshape(&[1, o, 1, 1])?.expand(y.shape())?)?;
    let s = y.shape();
    y.reshape(&[s[0], o, s[2] * s[3]])
}

fn check_channels(x: &Tensor) -> Result<()> {
    if x.rank() != 4 {
        return Err(Error::geometry("self_attention", format!("expected B×C×H×W, got {:?}", x.shape())));
    }
    if x.shape()[1] < 8 {
        return Err(Error::geometry("self_attention", format!("needs C >= 8, got {}", x.shape()[1])));
    }
    Ok(())
}

/// Attention weights [B, N, N]: row i is the softmax over positions j of
/// query_iᵀ key_j.
pub fn attention_weights(x: &Tensor, p: &AttentionWeights) -> Result<Tensor> {
    check_channels(x)?;
    let q = project(x, &p.query_w, &p.query_b)?;
    let k = project(x, &p.key_w, &p.key_b)?;
    q.permute(&[0, 2, 1])?.matmul(&k)?.softmax(2)
}

/// `x + gamma * (values · attentionᵀ)`, reshaped back to B×C×H×W.
pub fn self_attention(x: &Tensor, p: &AttentionWeights) -> Result<Tensor> {
    let attn = attention_weights(x, p)?;
    let v = project(x, &p.value_w, &p.value_b)?;
    let o = v.matmul(&attn.permute(&[0, 2, 1])?)?.reshape(x.shape())?;
    let g = p.gamma.reshape(&[1, 1, 1, 1])?.expand(x.shape())?;
    x.add(&o.mul(&g)?)
}
