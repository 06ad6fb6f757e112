use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{check, FD_EPS};

fn image(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.gen_range(0.0f32..1.0)).collect(), shape).unwrap()
}

fn a2l4(classes: usize) -> NetworkSpec {
    NetworkSpec::discriminator(2, 4, classes + 3).unwrap()
}

#[test]
fn build_is_seed_deterministic() {
    let spec = NetworkSpec::student(6);
    let a = Network::build(&spec, 7).unwrap();
    let b = Network::build(&spec, 7).unwrap();
    let c = Network::build(&spec, 8).unwrap();
    for ((pa, pb), pc) in a.params().iter().zip(b.params()).zip(c.params()) {
        assert_eq!(pa.name, pb.name);
        assert_eq!(pa.value.data(), pb.value.data());
        if pa.name.ends_with(".w") {
            assert_ne!(pa.value.data(), pc.value.data());
        }
    }
}

#[test]
fn golden_parameter_counts() {
    // conv: out·in·k² + out, BN: 2·c, head: C·c + C.
    let teacher = 896 + 64 + 18496 + 128 + 4 * (36928 + 128) + 390;
    let student = 224 + 16 + 1168 + 32 + 2 * (2320 + 32) + 102;
    assert_eq!(NetworkSpec::teacher(6).param_count(), teacher);
    assert_eq!(NetworkSpec::student(6).param_count(), student);
    assert_eq!(Network::build(&NetworkSpec::teacher(6), 0).unwrap().param_count(), teacher);
    assert_eq!(Network::build(&NetworkSpec::student(6), 0).unwrap().param_count(), student);
    assert!(student < teacher);
    check_capacity(&NetworkSpec::teacher(6), &NetworkSpec::student(6)).unwrap();
    assert!(check_capacity(&NetworkSpec::student(6), &NetworkSpec::teacher(6)).is_err());
}

#[test]
fn parameter_names_are_unique() {
    let net = Network::build(&a2l4(6), 0).unwrap();
    let mut names: Vec<&str> = net.params().iter().map(|p| p.name.as_str()).collect();
    let n = names.len();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), n);
}

#[test]
fn a2l4_has_two_attention_layers_and_four_bn_blocks() {
    let spec = a2l4(6);
    assert_eq!(spec.anlm(), Some((2, 4)));
    let attn = spec.blocks.iter().filter(|b| **b == Block::SelfAttention).count();
    let bn_convs = spec
        .blocks
        .windows(2)
        .filter(|w| matches!(w[0], Block::Conv { .. }) && w[1] == Block::BatchNorm)
        .count();
    assert_eq!((attn, bn_convs), (2, 4));
    let net = Network::build(&spec, 0).unwrap();
    assert_eq!(net.params().iter().filter(|p| p.name.ends_with("attn.gamma")).count(), 2);
}

#[test]
fn a0l4_differs_by_exactly_the_attention_parameters() {
    let with = Network::build(&a2l4(6), 0).unwrap().param_count();
    let without = Network::build(&NetworkSpec::discriminator(0, 4, 9).unwrap(), 0).unwrap().param_count();
    // Both layers sit on 64 channels: 2·(2·(8·64 + 8) + 64·64 + 64 + 1).
    assert_eq!(with - without, 2 * (2 * (8 * 64 + 8) + 64 * 64 + 64 + 1));
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(matches!(NetworkSpec::discriminator(3, 4, 9), Err(Error::InvalidSpec(_))));
    let mut s = a2l4(6);
    s.blocks.insert(2, Block::SelfAttention);
    assert!(matches!(s.validate(), Err(Error::InvalidSpec(_))));
    let mut s = NetworkSpec::student(6);
    s.blocks.insert(0, Block::SelfAttention);
    let e = s.validate().unwrap_err().to_string();
    assert!(e.contains("8 channels"), "{e}");
    let mut s = NetworkSpec::student(6);
    s.blocks[0] = Block::Conv {
        out_channels: 8,
        kernel: 4,
        stride: 2,
    };
    assert!(Network::build(&s, 0).is_err());
    let mut s = NetworkSpec::student(6);
    s.head = Head::ScorePool;
    assert!(s.validate().is_err());
}

#[test]
fn student_stride_arithmetic() {
    let mut net = Network::build(&NetworkSpec::student(6), 1).unwrap();
    assert_eq!(net.spec().total_stride(), 4);
    let out = net.forward_dense(&image(0, &[2, 3, 32, 32]), BatchNormMode::Train).unwrap();
    assert_eq!(out.logits.shape(), &[2, 6, 8, 8]);
    assert_eq!(out.features.shape(), &[2, 16, 8, 8]);
    assert_eq!(out.upsampled_logits.shape(), &[2, 6, 32, 32]);
    let e = net.forward_dense(&image(0, &[1, 3, 30, 32]), BatchNormMode::Train).unwrap_err();
    assert!(matches!(e, Error::Geometry { .. }));
}

#[test]
fn frozen_teacher_receives_no_gradient() {
    let mut teacher = Network::build(&NetworkSpec::teacher(4), 2).unwrap();
    teacher.freeze();
    let mut student = Network::build(&NetworkSpec::student(4), 3).unwrap();
    let x = image(1, &[2, 3, 16, 16]);
    let t = teacher.forward_dense(&x, BatchNormMode::Eval).unwrap();
    let s = student.forward_dense(&x, BatchNormMode::Train).unwrap();
    let loss = s.logits.sub(&t.logits).unwrap().square().sum_all();
    let g = loss.backward().unwrap();
    assert!(teacher.params().iter().all(|p| g.get(&p.value).is_none()));
    assert!(student.params().iter().all(|p| g.get(&p.value).is_some()));
    assert!(!t.logits.requires_grad());
    assert!(teacher.set_param(0, vec![0.0; teacher.params()[0].value.numel()]).is_err());
}

#[test]
fn forward_dense_is_batch_permutation_equivariant() {
    let mut net = Network::build(&NetworkSpec::student(5), 4).unwrap();
    let x = image(2, &[3, 3, 16, 16]);
    let per = 3 * 16 * 16;
    let mut swapped = x.to_vec();
    let (a, b) = swapped.split_at_mut(per);
    a.swap_with_slice(&mut b[per..2 * per]);
    let xs = Tensor::new(swapped, &[3, 3, 16, 16]).unwrap();
    for mode in [BatchNormMode::Eval, BatchNormMode::Train] {
        let y = net.forward_dense(&x, mode).unwrap().logits;
        let ys = net.forward_dense(&xs, mode).unwrap().logits;
        let n = y.numel() / 3;
        let (y, ys) = (y.data(), ys.data());
        for (i, j) in [(0, 2), (1, 1), (2, 0)] {
            for k in 0..n {
                assert!((y[i * n + k] - ys[j * n + k]).abs() < 1e-5);
            }
        }
    }
}

fn attention_layer(c: usize, seed: u64) -> (Network, AttentionWeights) {
    let spec = NetworkSpec::discriminator_with_widths(1, 3, &[c], 1).unwrap();
    let net = Network::build(&spec, seed).unwrap();
    let ap = net
        .layers
        .iter()
        .find_map(|l| match l {
            Layer::Attention(ap) => Some(*ap),
            _ => None,
        })
        .unwrap();
    let w = ap.resolve(&net.params);
    (net, w)
}

#[test]
fn zero_gate_attention_is_exact_identity() {
    let (_, w) = attention_layer(16, 5);
    let x = image(3, &[2, 16, 4, 4]).scale(7.0).add_scalar(-3.0);
    let y = self_attention(&x, &w).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn attention_rows_sum_to_one() {
    let (_, w) = attention_layer(8, 6);
    let a = attention_weights(&image(4, &[2, 8, 3, 5]), &w).unwrap();
    assert_eq!(a.shape(), &[2, 15, 15]);
    for row in a.data().chunks(15) {
        let s: f64 = row.iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn attention_needs_eight_channels() {
    let (_, w) = attention_layer(8, 0);
    assert!(matches!(self_attention(&image(0, &[1, 4, 2, 2]), &w), Err(Error::Geometry { .. })));
}

#[test]
fn attention_gate_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let (_, w) = attention_layer(8, seed);
        let x = image(seed, &[1, 8, 3, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gamma = Tensor::new(vec![0.3], &[1]).unwrap();
        let r = check(
            &[gamma],
            |v| {
                let mut ws = w.clone();
                ws.gamma = v[0].clone();
                Ok(self_attention(&x, &ws)?.sum_all())
            },
            FD_EPS,
            1,
            &mut rng,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-3, "seed {seed}: {r:?}");
    }
}

#[test]
fn discriminator_scores() {
    let mut d = Network::build(&a2l4(4), 9).unwrap();
    let q = image(5, &[1, 4, 32, 32]);
    let img = image(6, &[1, 3, 32, 32]);
    let q2 = Tensor::concat(&[&q, &q], 0).unwrap();
    let i2 = Tensor::concat(&[&img, &img], 0).unwrap();
    let s = d.forward_discriminator(&q2, &i2, BatchNormMode::Train).unwrap();
    assert_eq!(s.shape(), &[2]);
    assert_eq!(s.data()[0], s.data()[1]);

    // Eval-mode scores do not depend on the rest of the batch.
    let other_q = image(7, &[1, 4, 32, 32]);
    let other_i = image(8, &[1, 3, 32, 32]);
    let alone = d.forward_discriminator(&q, &img, BatchNormMode::Eval).unwrap();
    let mixed = d
        .forward_discriminator(
            &Tensor::concat(&[&other_q, &q], 0).unwrap(),
            &Tensor::concat(&[&other_i, &img], 0).unwrap(),
            BatchNormMode::Eval,
        )
        .unwrap();
    assert!((alone.data()[0] - mixed.data()[1]).abs() < 1e-6);

    let bad = image(0, &[1, 4, 16, 16]);
    assert!(d.forward_discriminator(&bad, &img, BatchNormMode::Eval).is_err());
}

#[test]
fn spec_round_trips_through_toml() {
    let spec = a2l4(6);
    let text = toml::to_string(&spec).unwrap();
    let back: NetworkSpec = toml::from_str(&text).unwrap();
    assert_eq!(back, spec);
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut net = Network::build(&NetworkSpec::student(3), 11).unwrap();
    let x = image(9, &[2, 3, 16, 16]);
    net.forward_dense(&x, BatchNormMode::Train).unwrap();
    net.set_param(0, net.params()[0].value.data().iter().map(|v| v * 1.5).collect()).unwrap();
    net.freeze();
    let before = net.forward_dense(&x, BatchNormMode::Eval).unwrap().logits;
    checkpoint::save(&net, dir.path(), 42).unwrap();
    let (mut back, m) = checkpoint::load(dir.path()).unwrap();
    assert_eq!(m.iteration, 42);
    assert!(back.is_frozen());
    assert_eq!(back.stats(), net.stats());
    assert_eq!(back.forward_dense(&x, BatchNormMode::Eval).unwrap().logits.data(), before.data());

    let f = dir.path().join(&m.params[0].file);
    let mut bytes = std::fs::read(&f).unwrap();
    bytes[10] ^= 1;
    std::fs::write(&f, bytes).unwrap();
    assert!(matches!(checkpoint::load(dir.path()), Err(Error::Format(_))));
}

#[test]
fn checkpoint_keeps_seeds_above_the_toml_integer_range() {
    let dir = tempfile::tempdir().unwrap();
    let net = Network::build(&NetworkSpec::student(3), u64::MAX - 3).unwrap();
    checkpoint::save(&net, dir.path(), 0).unwrap();
    assert_eq!(checkpoint::load(dir.path()).unwrap().1.seed, u64::MAX - 3);
}
