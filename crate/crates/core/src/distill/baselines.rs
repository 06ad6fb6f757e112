//! Comparison distillation losses on intermediate features.

use rand::Rng;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// 1×1 convolution mapping student channels onto teacher channels.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub w: Tensor,
    pub b: Tensor,
}

impl Adapter {
    pub fn new<R: Rng>(student_channels: usize, teacher_channels: usize, rng: &mut R) -> Adapter {
        let bound = (6.0 / student_channels as f64).sqrt() as f32;
        let w = (0..student_channels * teacher_channels).map(|_| rng.gen_range(-bound..bound)).collect();
        Adapter {
            w: Tensor::var(w, &[teacher_channels, student_channels, 1, 1]).expect("adapter shape"),
            b: Tensor::zeros(&[teacher_channels]).detach_var(),
        }
    }

    pub fn identity(channels: usize) -> Adapter {
        let mut w = vec![0.0; channels * channels];
        for c in 0..channels {
            w[c * channels + c] = 1.0;
        }
        Adapter {
            w: Tensor::var(w, &[channels, channels, 1, 1]).expect("adapter shape"),
            b: Tensor::zeros(&[channels]).detach_var(),
        }
    }

    pub fn params(&self) -> [&Tensor; 2] {
        [&self.w, &self.b]
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.w, 1, 0)?;
        y.add(&self.b.reshape(&[1, self.b.numel(), 1, 1])?.expand(y.shape())?)
    }
}

/// Mean squared error between adapted student features and teacher features.
pub fn mimic_loss(student: &Tensor, teacher: &Tensor, adapter: &Adapter) -> Result<Tensor> {
    let a = adapter.apply(student)?;
    if a.shape() != teacher.shape() {
        return Err(Error::shape("mimic_loss", a.shape(), teacher.shape()));
    }
    Ok(a.sub(&teacher.detach())?.square().mean_all())
}

/// Channel-wise sum of squares, L2-normalised over space: [B, H·W].
pub fn attention_map(f: &Tensor) -> Result<Tensor> {
    if f.rank() != 4 {
        return Err(Error::geometry("attention_map", format!("expected B×C×H×W, got {:?}", f.shape())));
    }
    let s = f.shape();
    let (b, hw) = (s[0], s[2] * s[3]);
    let a = f.square().sum_keepdim(&[1])?.reshape(&[b, hw])?;
    let n2 = a.square().sum_keepdim(&[1])?;
    if n2.data().contains(&0.0) {
        return Err(Error::Domain {
            op: "attention_map",
            msg: "all-zero feature map has no normalised attention".into(),
        });
    }
    a.div(&n2.sqrt()?.expand(a.shape())?)
}

/// MSE between student and teacher attention maps.
pub fn attention_transfer_loss(student: &Tensor, teacher: &Tensor) -> Result<Tensor> {
    if student.rank() != 4 || teacher.rank() != 4 || student.shape()[0] != teacher.shape()[0] || student.shape()[2..] != teacher.shape()[2..] {
        return Err(Error::shape("attention_transfer_loss", student.shape(), teacher.shape()));
    }
    let a_s = attention_map(student)?;
    let a_t = attention_map(&teacher.detach())?;
    Ok(a_s.sub(&a_t)?.square().mean_all())
}
