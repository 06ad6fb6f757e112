//! Declarative network specs, deterministic builders and forward passes.

mod attention;
pub mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{batch_norm, no_grad, BatchNormMode, RunningStats, Tensor};
use crate::{Error, Result};

pub use attention::{attention_weights, self_attention, AttentionParams, AttentionWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
    Discriminator,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Block {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    BatchNorm,
    SelfAttention,
    AvgPool {
        k: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    /// 1×1 convolution to `classes` score channels.
    SegmentationClassifier { classes: usize },
    /// Global average of the final single-channel embedding.
    ScorePool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub role: Role,
    pub in_channels: usize,
    pub blocks: Vec<Block>,
    pub head: Head,
}

fn conv_bn_relu(out_channels: usize, stride: usize) -> [Block; 3] {
    [
        Block::Conv {
            out_channels,
            kernel: 3,
            stride,
        },
        Block::BatchNorm,
        Block::Relu,
    ]
}

fn dense_spec(role: Role, widths: &[usize], strided: usize, classes: usize) -> NetworkSpec {
    let blocks = widths
        .iter()
        .enumerate()
        .flat_map(|(i, &c)| conv_bn_relu(c, if i < strided { 2 } else { 1 }))
        .collect();
    NetworkSpec {
        role,
        in_channels: 3,
        blocks,
        head: Head::SegmentationClassifier { classes },
    }
}

pub const TEACHER_WIDTHS: [usize; 6] = [32, 64, 64, 64, 64, 64];
pub const STUDENT_WIDTHS: [usize; 4] = [8, 16, 16, 16];
pub const DISCRIMINATOR_WIDTHS: [usize; 4] = [16, 32, 64, 64];

impl NetworkSpec {
    pub fn teacher(classes: usize) -> NetworkSpec {
        dense_spec(Role::Teacher, &TEACHER_WIDTHS, 2, classes)
    }

    pub fn student(classes: usize) -> NetworkSpec {
        dense_spec(Role::Student, &STUDENT_WIDTHS, 2, classes)
    }

    /// The AnLm discriminator: input batch norm, `m` stride-2 conv blocks
    /// with BN and ReLU, `n` self-attention layers after the last `n` of
    /// them, then a plain output convolution to one channel.
    pub fn discriminator(n: usize, m: usize, in_channels: usize) -> Result<NetworkSpec> {
        Self::discriminator_with_widths(n, in_channels, &DISCRIMINATOR_WIDTHS[..m.min(4)], m)
    }

    pub fn discriminator_with_widths(n: usize, in_channels: usize, widths: &[usize], m: usize) -> Result<NetworkSpec> {
        if n > 2 {
            return Err(Error::InvalidSpec(format!("A{n}L{m}: at most 2 self-attention layers fit between the final three blocks")));
        }
        if widths.len() != m || m == 0 {
            return Err(Error::InvalidSpec(format!("A{n}L{m} needs {m} block widths, got {}", widths.len())));
        }
        let mut blocks = vec![Block::BatchNorm];
        for (i, &c) in widths.iter().enumerate() {
            blocks.extend(conv_bn_relu(c, 2));
            if i + n >= m {
                blocks.push(Block::SelfAttention);
            }
        }
        blocks.push(Block::Conv {
            out_channels: 1,
            kernel: 3,
            stride: 1,
        });
        let spec = NetworkSpec {
            role: Role::Discriminator,
            in_channels,
            blocks,
            head: Head::ScorePool,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Product of all conv strides and pooling factors.
    pub fn total_stride(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| match b {
                Block::Conv { stride, .. } => *stride,
                Block::AvgPool { k } => *k,
                _ => 1,
            })
            .product()
    }

    /// Channel count after the blocks (the feature map width).
    pub fn feature_channels(&self) -> usize {
        self.blocks.iter().fold(self.in_channels, |c, b| match b {
            Block::Conv { out_channels, .. } => *out_channels,
            _ => c,
        })
    }

    pub fn classes(&self) -> Option<usize> {
        match self.head {
            Head::SegmentationClassifier { classes } => Some(classes),
            Head::ScorePool => None,
        }
    }

    /// Parameter count implied by the spec alone.
    pub fn param_count(&self) -> usize {
        let mut c = self.in_channels;
        let mut total = 0;
        for b in &self.blocks {
            match b {
                Block::Conv {
                    out_channels,
                    kernel,
                    ..
                } => {
                    total += out_channels * c * kernel * kernel + out_channels;
                    c = *out_channels;
                }
                Block::BatchNorm => total += 2 * c,
                Block::SelfAttention => total += attention::param_count(c),
                Block::Relu | Block::AvgPool { .. } => {}
            }
        }
        if let Head::SegmentationClassifier { classes } = self.head {
            total += classes * c + classes;
        }
        total
    }

    /// The (n, m) of an AnLm discriminator, if the blocks follow that pattern.
    pub fn anlm(&self) -> Option<(usize, usize)> {
        let rest = self.blocks.strip_prefix(&[Block::BatchNorm])?;
        // Units: a conv, optionally BN+ReLU, optionally followed by attention.
        let mut units: Vec<(bool, bool)> = Vec::new();
        let mut i = 0;
        while i < rest.len() {
            if !matches!(rest[i], Block::Conv { .. }) {
                return None;
            }
            i += 1;
            let bn = rest.get(i..i + 2) == Some(&[Block::BatchNorm, Block::Relu][..]);
            if bn {
                i += 2;
            }
            let attn = rest.get(i) == Some(&Block::SelfAttention);
            if attn {
                i += 1;
            }
            units.push((bn, attn));
        }
        let (&(last_bn, last_attn), body) = units.split_last()?;
        if last_bn || last_attn || body.iter().any(|u| !u.0) {
            return None;
        }
        let n = body.iter().filter(|u| u.1).count();
        // Attention may only sit between the final three blocks.
        let first_allowed = units.len().saturating_sub(3);
        if body.iter().enumerate().any(|(k, u)| u.1 && k < first_allowed) {
            return None;
        }
        Some((n, body.len()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() || self.in_channels == 0 {
            return Err(Error::InvalidSpec("a network needs input channels and at least one block".into()));
        }
        let mut c = self.in_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            match b {
                Block::Conv {
                    out_channels,
                    kernel,
                    stride,
                } => {
                    if *out_channels == 0 || *stride == 0 || kernel % 2 == 0 {
                        return Err(Error::InvalidSpec(format!(
                            "block {i}: conv needs out_channels > 0, stride > 0 and an odd kernel"
                        )));
                    }
                    c = *out_channels;
                }
                Block::SelfAttention if c < 8 => {
                    return Err(Error::InvalidSpec(format!("block {i}: self-attention needs at least 8 channels, got {c}")));
                }
                Block::AvgPool { k: 0 } => return Err(Error::InvalidSpec(format!("block {i}: pooling factor 0"))),
                _ => {}
            }
        }
        match (self.role, &self.head) {
            (Role::Discriminator, Head::ScorePool) => match self.anlm() {
                Some((n, _)) if n <= 2 => {}
                Some((n, m)) => {
                    return Err(Error::InvalidSpec(format!("A{n}L{m}: at most 2 self-attention layers fit between the final three blocks")))
                }
                None => {
                    return Err(Error::InvalidSpec(
                        "discriminator blocks must follow the AnLm pattern: input BN, conv+BN+ReLU blocks, attention only between the final three blocks, a plain output conv".into(),
                    ))
                }
            },
            (Role::Discriminator, _) => return Err(Error::InvalidSpec("a discriminator ends in a score pool".into())),
            (_, Head::SegmentationClassifier { classes }) if *classes >= 1 => {}
            _ => return Err(Error::InvalidSpec("dense networks end in a classifier with at least one class".into())),
        }
        if self.role == Role::Discriminator && self.feature_channels() != 1 {
            return Err(Error::InvalidSpec("the discriminator output conv must have one channel".into()));
        }
        Ok(())
    }
}

/// Errors unless the teacher strictly out-sizes the student.
pub fn check_capacity(teacher: &NetworkSpec, student: &NetworkSpec) -> Result<()> {
    let (t, s) = (teacher.param_count(), student.param_count());
    if t <= s {
        return Err(Error::InvalidSpec(format!(
            "teacher capacity ({t} parameters) must exceed student capacity ({s})"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug)]
enum Layer {
    Conv { w: usize, b: usize, stride: usize, pad: usize },
    Relu,
    BatchNorm { gamma: usize, beta: usize, stats: usize },
    Attention(AttentionParams),
    AvgPool(usize),
}

#[derive(Clone, Debug)]
pub struct DenseOutput {
    /// Pre-classifier feature map F.
    pub features: Tensor,
    /// Score map Q before upsampling.
    pub logits: Tensor,
    /// Q bilinearly resized to the input resolution.
    pub upsampled_logits: Tensor,
}

#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    seed: u64,
    params: Vec<Param>,
    stats: Vec<(String, RunningStats)>,
    layers: Vec<Layer>,
    head: Option<(usize, usize)>,
    frozen: bool,
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::var(data, shape).expect("shape matches data")
}

impl Network {
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Network> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<Param> = Vec::new();
        let mut stats = Vec::new();
        fn push(params: &mut Vec<Param>, name: String, value: Tensor) -> usize {
            params.push(Param { name, value });
            params.len() - 1
        }
        let mut layers = Vec::new();
        let mut c = spec.in_channels;
        for (i, b) in spec.blocks.iter().enumerate() {
            let layer = match b {
                Block::Conv {
                    out_channels,
                    kernel,
                    stride,
                } => {
                    let w = push(&mut params, format!("b{i}.conv.w"), kaiming_uniform(&mut rng, &[*out_channels, c, *kernel, *kernel]));
                    let b = push(&mut params, format!("b{i}.conv.b"), Tensor::zeros(&[*out_channels]).detach_var());
                    c = *out_channels;
                    Layer::Conv {
                        w,
                        b,
                        stride: *stride,
                        pad: kernel / 2,
                    }
                }
                Block::Relu => Layer::Relu,
                Block::BatchNorm => {
                    let gamma = push(&mut params, format!("b{i}.bn.gamma"), Tensor::ones(&[c]).detach_var());
                    let beta = push(&mut params, format!("b{i}.bn.beta"), Tensor::zeros(&[c]).detach_var());
                    stats.push((format!("b{i}.bn"), RunningStats::new(c)));
                    Layer::BatchNorm {
                        gamma,
                        beta,
                        stats: stats.len() - 1,
                    }
                }
                Block::SelfAttention => {
                    let c8 = c / 8;
                    let mut idx = |name: &str, t: Tensor| push(&mut params, format!("b{i}.attn.{name}"), t);
                    let query_w = idx("query.w", kaiming_uniform(&mut rng, &[c8, c, 1, 1]));
                    let query_b = idx("query.b", Tensor::zeros(&[c8]).detach_var());
                    let key_w = idx("key.w", kaiming_uniform(&mut rng, &[c8, c, 1, 1]));
                    let key_b = idx("key.b", Tensor::zeros(&[c8]).detach_var());
                    let value_w = idx("value.w", kaiming_uniform(&mut rng, &[c, c, 1, 1]));
                    let value_b = idx("value.b", Tensor::zeros(&[c]).detach_var());
                    let gamma = idx("gamma", Tensor::zeros(&[1]).detach_var());
                    Layer::Attention(AttentionParams {
                        query_w,
                        query_b,
                        key_w,
                        key_b,
                        value_w,
                        value_b,
                        gamma,
                    })
                }
                Block::AvgPool { k } => Layer::AvgPool(*k),
            };
            layers.push(layer);
        }
        let head = match spec.head {
            Head::SegmentationClassifier { classes } => {
                let w = push(&mut params, "head.w".into(), kaiming_uniform(&mut rng, &[classes, c, 1, 1]));
                let b = push(&mut params, "head.b".into(), Tensor::zeros(&[classes]).detach_var());
                Some((w, b))
            }
            Head::ScorePool => None,
        };
        Ok(Network {
            spec: spec.clone(),
            seed,
            params,
            stats,
            layers,
            head,
            frozen: false,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param_tensors(&self) -> Vec<&Tensor> {
        self.params.iter().map(|p| &p.value).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    /// Replaces parameter `idx` with new values of the same shape.
    pub fn set_param(&mut self, idx: usize, data: Vec<f32>) -> Result<()> {
        if self.frozen {
            return Err(Error::InvalidArgument(format!("{} is frozen", self.params[idx].name)));
        }
        let shape = self.params[idx].value.shape().to_vec();
        self.params[idx].value = Tensor::var(data, &shape)?;
        Ok(())
    }

    /// Installs `value` as parameter `idx` as is, keeping its tracking state.
    pub fn set_param_tensor(&mut self, idx: usize, value: Tensor) -> Result<()> {
        if self.frozen {
            return Err(Error::InvalidArgument(format!("{} is frozen", self.params[idx].name)));
        }
        if value.shape() != self.params[idx].value.shape() {
            return Err(Error::shape("set_param_tensor", self.params[idx].value.shape(), value.shape()));
        }
        self.params[idx].value = value;
        Ok(())
    }

    pub fn stats(&self) -> &[(String, RunningStats)] {
        &self.stats
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Turns every parameter into a constant; the network is never updated again.
    pub fn freeze(&mut self) {
        for p in &mut self.params {
            p.value = p.value.detach();
        }
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        for p in &mut self.params {
            p.value = p.value.detach_var();
        }
        self.frozen = false;
    }

    fn p(&self, idx: usize) -> &Tensor {
        &self.params[idx].value
    }

    fn conv(&self, x: &Tensor, w: usize, b: usize, stride: usize, pad: usize) -> Result<Tensor> {
        let y = x.conv2d(self.p(w), stride, pad)?;
        let o = self.p(b).numel();
        y.add(&self.p(b).reshape(&[1, o, 1, 1])?.expand(y.shape())?)
    }

    fn run_blocks(&mut self, x: &Tensor, mode: BatchNormMode) -> Result<Tensor> {
        let mut h = x.clone();
        for li in 0..self.layers.len() {
            h = match self.layers[li].clone() {
                Layer::Conv { w, b, stride, pad } => self.conv(&h, w, b, stride, pad)?,
                Layer::Relu => h.relu(),
                Layer::BatchNorm { gamma, beta, stats } => {
                    let (g, bt) = (self.p(gamma).clone(), self.p(beta).clone());
                    batch_norm(&h, &g, &bt, &mut self.stats[stats].1, mode)?
                }
                Layer::Attention(ap) => self_attention(&h, &ap.resolve(&self.params))?,
                Layer::AvgPool(k) => h.avg_pool(k)?,
            };
        }
        Ok(h)
    }

    /// Features, score map and upsampled score map for a teacher or student.
    pub fn forward_dense(&mut self, image: &Tensor, mode: BatchNormMode) -> Result<DenseOutput> {
        let Some((hw, hb)) = self.head else {
            return Err(Error::InvalidArgument("forward_dense needs a teacher or student network".into()));
        };
        let (h, w) = self.check_input(image)?;
        let frozen = self.frozen;
        let run = |net: &mut Network| -> Result<DenseOutput> {
            let features = net.run_blocks(image, mode)?;
            let logits = net.conv(&features, hw, hb, 1, 0)?;
            let upsampled_logits = logits.upsample_bilinear(h, w)?;
            Ok(DenseOutput {
                features,
                logits,
                upsampled_logits,
            })
        };
        if frozen {
            no_grad(|| run(self))
        } else {
            run(self)
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize)> {
        if x.rank() != 4 || x.shape()[1] != self.spec.in_channels {
            return Err(Error::geometry(
                "forward",
                format!("expected B×{}×H×W input, got {:?}", self.spec.in_channels, x.shape()),
            ));
        }
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let s = self.spec.total_stride();
        if h % s != 0 || w % s != 0 {
            return Err(Error::geometry("forward", format!("input {h}×{w} is not divisible by total stride {s}")));
        }
        Ok((h, w))
    }

    /// One holistic score per batch element for the pair (q, image).
    pub fn forward_discriminator(&mut self, q: &Tensor, image: &Tensor, mode: BatchNormMode) -> Result<Tensor> {
        if self.spec.role != Role::Discriminator {
            return Err(Error::InvalidArgument("forward_discriminator needs a discriminator".into()));
        }
        if q.rank() != 4 || image.rank() != 4 || q.shape()[0] != image.shape()[0] || q.shape()[2..] != image.shape()[2..] {
            return Err(Error::shape("forward_discriminator", q.shape(), image.shape()));
        }
        let x = Tensor::concat(&[q, image], 1)?;
        self.check_input(&x)?;
        let b = x.shape()[0];
        let frozen = self.frozen;
        let run = |net: &mut Network| -> Result<Tensor> {
            let e = net.run_blocks(&x, mode)?;
            e.mean_keepdim(&[1, 2, 3])?.reshape(&[b])
        };
        if frozen {
            no_grad(|| run(self))
        } else {
            run(self)
        }
    }
}

#[cfg(test)]
mod tests;
