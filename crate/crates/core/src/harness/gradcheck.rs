//! Registered miniature instances for finite-difference gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distill::{
    attention_transfer_loss, gradient_penalty, holistic_d_loss, holistic_s_term, local_pairwise_loss, mimic_loss,
    pair_wise_distill, pixel_wise_loss, Adapter, Alpha, PixelWise,
};
use crate::gradcheck::{check, FdReport};
use crate::nets::{self_attention, AttentionWeights, Block, Head, Network, NetworkSpec, Role};
use crate::tensor::{BatchNormMode, Tensor};
use crate::{Error, Result};

/// Largest acceptable max relative error.
pub const TOLERANCE: f64 = 1e-3;

/// Coordinates probed per input tensor.
const PROBES: usize = 12;

/// Central-difference step. Composite losses through a discriminator lose
/// too many f32 digits at 1e-3 for the tolerance to be meaningful.
pub const REGISTRY_EPS: f32 = 1e-2;

pub const COMPONENTS: &[&str] = &[
    "pixel_wise",
    "pixel_wise_reverse",
    "pair_wise_full",
    "pair_wise_9",
    "pair_wise_pooled",
    "local_pairwise",
    "holistic_s_term",
    "holistic_d_loss",
    "holistic_gp",
    "mimic",
    "attention_transfer",
    "self_attention",
    "student",
];

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.gen_range(lo..hi)).collect(), shape).expect("shape matches data")
}

/// A small A2L3 discriminator over 16×16 maps with live attention gates.
fn mini_discriminator(in_channels: usize, seed: u64) -> Result<Network> {
    let mut d = Network::build(&NetworkSpec::discriminator_with_widths(2, in_channels, &[8, 8, 8], 3)?, seed)?;
    let gates: Vec<usize> = (0..d.params().len()).filter(|&i| d.params()[i].name.ends_with("attn.gamma")).collect();
    for (k, i) in gates.into_iter().enumerate() {
        d.set_param(i, vec![0.5 + 0.25 * k as f32])?;
    }
    Ok(d)
}

fn with_params(base: &Network, values: &[Tensor]) -> Result<Network> {
    let mut d = base.clone();
    for (i, v) in values.iter().enumerate() {
        d.set_param_tensor(i, v.clone())?;
    }
    Ok(d)
}

fn toy_student(classes: usize) -> NetworkSpec {
    NetworkSpec {
        role: Role::Student,
        in_channels: 3,
        blocks: vec![
            Block::Conv {
                out_channels: 4,
                kernel: 3,
                stride: 1,
            },
            Block::BatchNorm,
            Block::Relu,
        ],
        head: Head::SegmentationClassifier { classes },
    }
}

/// Checks one registered component on the instance drawn from `seed`.
pub fn gradcheck(component: &str, seed: u64) -> Result<FdReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut probe = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let p = &mut probe;
    match component {
        "pixel_wise" | "pixel_wise_reverse" => {
            let s = rand_t(r, &[2, 4, 3, 3], -2.0, 2.0);
            let t = rand_t(r, &[2, 4, 3, 3], -2.0, 2.0);
            let opts = PixelWise {
                temperature: 1.0,
                reverse: component == "pixel_wise_reverse",
            };
            check(&[s], |v| pixel_wise_loss(&v[0], &t, opts), REGISTRY_EPS, PROBES, p)
        }
        "pair_wise_full" | "pair_wise_9" | "pair_wise_pooled" => {
            let (alpha, beta) = match component {
                "pair_wise_full" => (Alpha::Full, 1),
                "pair_wise_9" => (Alpha::Nearest(9), 1),
                _ => (Alpha::Full, 4),
            };
            let s = rand_t(r, &[2, 5, 4, 4], -1.0, 1.0);
            let t = rand_t(r, &[2, 7, 4, 4], -1.0, 1.0);
            check(&[s], |v| pair_wise_distill(&v[0], &t, alpha, beta), REGISTRY_EPS, PROBES, p)
        }
        "local_pairwise" => {
            let s = rand_t(r, &[2, 5, 4, 4], -1.0, 1.0);
            let t = rand_t(r, &[2, 7, 4, 4], -1.0, 1.0);
            check(&[s], |v| local_pairwise_loss(&v[0], &t), REGISTRY_EPS, PROBES, p)
        }
        "holistic_s_term" => {
            let d = mini_discriminator(5, seed)?;
            let q = rand_t(r, &[3, 2, 16, 16], -2.0, 2.0);
            let img = rand_t(r, &[3, 3, 16, 16], 0.0, 1.0);
            check(&[q], |v| holistic_s_term(&mut d.clone(), &v[0], &img), REGISTRY_EPS, PROBES, p)
        }
        "holistic_d_loss" | "holistic_gp" => {
            let d = mini_discriminator(5, seed)?;
            let q_s = rand_t(r, &[3, 2, 16, 16], -2.0, 2.0);
            let q_t = rand_t(r, &[3, 2, 16, 16], -2.0, 2.0);
            let img = rand_t(r, &[3, 3, 16, 16], 0.0, 1.0);
            let u: Vec<f32> = (0..3).map(|_| r.gen()).collect();
            let params: Vec<Tensor> = d.params().iter().map(|p| p.value.detach()).collect();
            let gp_only = component == "holistic_gp";
            check(
                &params,
                |v| {
                    let mut dv = with_params(&d, v)?;
                    if gp_only {
                        gradient_penalty(|x| dv.forward_discriminator(x, &img, BatchNormMode::Train), &q_t, &q_s, &u)
                    } else {
                        let mut gp_rng = ChaCha8Rng::seed_from_u64(seed);
                        Ok(holistic_d_loss(&mut dv, &q_s, &q_t, &img, 10.0, &mut gp_rng)?.loss)
                    }
                },
                REGISTRY_EPS,
                4,
                p,
            )
        }
        "mimic" => {
            let s = rand_t(r, &[2, 3, 3, 3], -1.0, 1.0);
            let t = rand_t(r, &[2, 5, 3, 3], -1.0, 1.0);
            let a = Adapter::new(3, 5, r);
            let inputs = [s, a.w.detach(), rand_t(r, &[5], -0.5, 0.5)];
            check(
                &inputs,
                |v| {
                    let a = Adapter {
                        w: v[1].clone(),
                        b: v[2].clone(),
                    };
                    mimic_loss(&v[0], &t, &a)
                },
                REGISTRY_EPS,
                PROBES,
                p,
            )
        }
        "attention_transfer" => {
            let s = rand_t(r, &[2, 3, 4, 4], -1.0, 1.0);
            let t = rand_t(r, &[2, 6, 4, 4], -1.0, 1.0);
            check(&[s], |v| attention_transfer_loss(&v[0], &t), REGISTRY_EPS, PROBES, p)
        }
        "self_attention" => {
            let c = 8;
            let q = 1;
            let inputs = [
                rand_t(r, &[2, c, 3, 3], -1.0, 1.0),
                rand_t(r, &[q, c, 1, 1], -0.5, 0.5),
                rand_t(r, &[q], -0.1, 0.1),
                rand_t(r, &[q, c, 1, 1], -0.5, 0.5),
                rand_t(r, &[q], -0.1, 0.1),
                rand_t(r, &[c, c, 1, 1], -0.5, 0.5),
                rand_t(r, &[c], -0.1, 0.1),
                Tensor::new(vec![0.7], &[1])?,
            ];
            check(
                &inputs,
                |v| {
                    let w = AttentionWeights {
                        query_w: v[1].clone(),
                        query_b: v[2].clone(),
                        key_w: v[3].clone(),
                        key_b: v[4].clone(),
                        value_w: v[5].clone(),
                        value_b: v[6].clone(),
                        gamma: v[7].clone(),
                    };
                    Ok(self_attention(&v[0], &w)?.square().sum_all())
                },
                REGISTRY_EPS,
                PROBES,
                p,
            )
        }
        "student" => {
            let spec = toy_student(3);
            let net = Network::build(&spec, seed)?;
            let x = rand_t(r, &[2, 3, 4, 4], 0.0, 1.0);
            let labels: Vec<usize> = (0..2 * 16).map(|_| r.gen_range(0..3)).collect();
            let mut onehot = vec![0f32; 2 * 3 * 16];
            for (i, &k) in labels.iter().enumerate() {
                onehot[((i / 16) * 3 + k) * 16 + i % 16] = 1.0;
            }
            let onehot = Tensor::new(onehot, &[2, 3, 4, 4])?;
            let params: Vec<Tensor> = net.params().iter().map(|p| p.value.detach()).collect();
            check(
                &params,
                |v| {
                    let mut n = with_params(&net, v)?;
                    let out = n.forward_dense(&x, BatchNormMode::Train)?;
                    Ok(out.upsampled_logits.log_softmax(1)?.mul(&onehot)?.sum_all().scale(-1.0 / 32.0))
                },
                REGISTRY_EPS,
                PROBES,
                p,
            )
        }
        other => Err(Error::InvalidArgument(format!(
            "unknown gradcheck component {other:?}; known: {}",
            COMPONENTS.join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_component_passes_on_one_seed() {
        for c in COMPONENTS {
            let r = gradcheck(c, 1).unwrap();
            assert!(r.max_rel_error < TOLERANCE, "{c}: {r:?}");
            assert!(r.checked > 0, "{c}: {r:?}");
        }
    }

    #[test]
    fn unknown_component_is_an_error() {
        assert!(matches!(gradcheck("nope", 0), Err(Error::InvalidArgument(_))));
    }
}
