use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Pixel-wise distillation settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PixelWise {
    pub temperature: f32,
    /// Use KL(q_t ‖ q_s) instead of KL(q_s ‖ q_t).
    pub reverse: bool,
}

impl Default for PixelWise {
    fn default() -> Self {
        PixelWise {
            temperature: 1.0,
            reverse: false,
        }
    }
}

/// Mean over batch and pixels of KL(q_s ‖ q_t), with q = softmax(logits / T)
/// over the class axis. The teacher side is always treated as a constant.
pub fn pixel_wise_loss(student_logits: &Tensor, teacher_logits: &Tensor, opts: PixelWise) -> Result<Tensor> {
    if student_logits.shape() != teacher_logits.shape() || student_logits.rank() != 4 {
        return Err(Error::shape("pixel_wise_loss", student_logits.shape(), teacher_logits.shape()));
    }
    if !(opts.temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {}", opts.temperature)));
    }
    let inv_t = 1.0 / opts.temperature;
    let log_s = student_logits.scale(inv_t).log_softmax(1)?;
    let log_t = teacher_logits.detach().scale(inv_t).log_softmax(1)?;
    let (log_p, log_q) = if opts.reverse { (&log_t, &log_s) } else { (&log_s, &log_t) };
    let kl = log_p.exp().mul(&log_p.sub(log_q)?)?;
    let s = student_logits.shape();
    Ok(kl.sum_all().scale(1.0 / (s[0] * s[2] * s[3]) as f32))
}
