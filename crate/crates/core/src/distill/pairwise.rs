use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Connection range: every node, or the `n` nearest nodes (self included).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "AlphaRepr", into = "AlphaRepr")]
pub enum Alpha {
    Full,
    Nearest(usize),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum AlphaRepr {
    Count(usize),
    Name(String),
}

impl TryFrom<AlphaRepr> for Alpha {
    type Error = String;

    fn try_from(r: AlphaRepr) -> std::result::Result<Alpha, String> {
        match r {
            AlphaRepr::Count(n) => Ok(Alpha::Nearest(n)),
            AlphaRepr::Name(s) => s.parse(),
        }
    }
}

impl From<Alpha> for AlphaRepr {
    fn from(a: Alpha) -> AlphaRepr {
        match a {
            Alpha::Full => AlphaRepr::Name("full".into()),
            Alpha::Nearest(n) => AlphaRepr::Count(n),
        }
    }
}

impl FromStr for Alpha {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Alpha, String> {
        if s == "full" {
            return Ok(Alpha::Full);
        }
        s.parse().map(Alpha::Nearest).map_err(|_| format!("alpha must be \"full\" or a count, got {s:?}"))
    }
}

impl fmt::Display for Alpha {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Alpha::Full => f.write_str("full"),
            Alpha::Nearest(n) => write!(f, "{n}"),
        }
    }
}

/// Static affinity graph over β-pooled nodes of a feature map.
#[derive(Clone, Debug)]
pub struct AffinityGraph {
    /// [B, R', C_f] node features.
    pub node_features: Tensor,
    /// Shared by every batch element.
    pub neighbors: Vec<Vec<usize>>,
    pub alpha: usize,
    pub beta: usize,
    /// Node grid (rows, cols).
    pub grid: (usize, usize),
    /// Feature map size (W', H') before pooling.
    pub map: (usize, usize),
}

impl AffinityGraph {
    pub fn nodes(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn connections(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }
}

fn patch_side(beta: usize) -> Result<usize> {
    let side = (beta as f64).sqrt().round() as usize;
    if beta == 0 || side * side != beta {
        return Err(Error::InvalidArgument(format!("beta must be a perfect square, got {beta}")));
    }
    Ok(side)
}

/// The `alpha` nearest nodes of each node under Chebyshev distance on a
/// `rows × cols` grid, ties broken by row-major index.
pub fn chebyshev_neighbors(rows: usize, cols: usize, alpha: usize) -> Vec<Vec<usize>> {
    let n = rows * cols;
    (0..n)
        .map(|i| {
            let (ri, ci) = (i / cols, i % cols);
            let mut order: Vec<(usize, usize)> = (0..n)
                .map(|j| {
                    let (rj, cj) = (j / cols, j % cols);
                    (ri.abs_diff(rj).max(ci.abs_diff(cj)), j)
                })
                .collect();
            order.sort_unstable();
            order.into_iter().take(alpha).map(|(_, j)| j).collect()
        })
        .collect()
}

pub fn build_affinity_graph(features: &Tensor, alpha: Alpha, beta: usize) -> Result<AffinityGraph> {
    if features.rank() != 4 {
        return Err(Error::geometry("build_affinity_graph", format!("expected B×C×W'×H', got {:?}", features.shape())));
    }
    let side = patch_side(beta)?;
    let s = features.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h % side != 0 || w % side != 0 {
        return Err(Error::geometry(
            "build_affinity_graph",
            format!("patch side {side} does not divide the {h}×{w} feature map"),
        ));
    }
    let grid = (h / side, w / side);
    let nodes = grid.0 * grid.1;
    let alpha = match alpha {
        Alpha::Full => nodes,
        Alpha::Nearest(a) if a >= 1 && a <= nodes => a,
        Alpha::Nearest(a) => {
            return Err(Error::InvalidArgument(format!("alpha {a} outside 1..={nodes} for a graph of {nodes} nodes")))
        }
    };
    let pooled = if side > 1 { features.avg_pool(side)? } else { features.clone() };
    let node_features = pooled.reshape(&[b, c, nodes])?.permute(&[0, 2, 1])?;
    Ok(AffinityGraph {
        node_features,
        neighbors: chebyshev_neighbors(grid.0, grid.1, alpha),
        alpha,
        beta,
        grid,
        map: (h, w),
    })
}

/// Cosine similarity with zero vectors similar to nothing.
pub fn node_similarity(fi: &[f32], fj: &[f32]) -> f32 {
    let dot: f64 = fi.iter().zip(fj).map(|(&a, &b)| a as f64 * b as f64).sum();
    let ni: f64 = fi.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    let nj: f64 = fj.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    if ni == 0.0 || nj == 0.0 {
        return 0.0;
    }
    (dot / (ni * nj)) as f32
}

const NORM_EPS: f32 = 1e-12;

/// [B, R', R'] cosine similarities between all node pairs.
pub fn similarity_matrix(nodes: &Tensor) -> Result<Tensor> {
    let norm = nodes.square().sum_keepdim(&[2])?.add_scalar(NORM_EPS).sqrt()?;
    let unit = nodes.div(&norm.expand(nodes.shape())?)?;
    unit.matmul(&unit.permute(&[0, 2, 1])?)
}

fn neighbor_mask(g: &AffinityGraph) -> Tensor {
    let n = g.nodes();
    let mut m = vec![0.0f32; n * n];
    for (i, nb) in g.neighbors.iter().enumerate() {
        for &j in nb {
            m[i * n + j] = 1.0;
        }
    }
    Tensor::new(m, &[1, n, n]).expect("mask shape")
}

/// β/(W'·H'·α) Σ_i Σ_{j∈N(i)} (a^s_ij − a^t_ij)², averaged over the batch.
pub fn pair_wise_loss(gs: &AffinityGraph, gt: &AffinityGraph) -> Result<Tensor> {
    let (bs, bt) = (gs.node_features.shape()[0], gt.node_features.shape()[0]);
    if gs.alpha != gt.alpha || gs.beta != gt.beta || gs.grid != gt.grid || gs.map != gt.map || bs != bt {
        return Err(Error::shape(
            "pair_wise_loss",
            &[bs, gs.nodes(), gs.alpha, gs.beta],
            &[bt, gt.nodes(), gt.alpha, gt.beta],
        ));
    }
    let a_s = similarity_matrix(&gs.node_features)?;
    let a_t = similarity_matrix(&gt.node_features.detach())?;
    let mask = neighbor_mask(gs).expand(a_s.shape())?;
    let sq = a_s.sub(&a_t)?.square().mul(&mask)?;
    let norm = gs.beta as f32 / (gs.map.0 * gs.map.1 * gs.alpha) as f32;
    Ok(sq.sum_all().scale(norm / bs as f32))
}

/// Pair-wise loss on graphs built from both feature maps.
pub fn pair_wise_distill(student: &Tensor, teacher: &Tensor, alpha: Alpha, beta: usize) -> Result<Tensor> {
    let gs = build_affinity_graph(student, alpha, beta)?;
    let gt = build_affinity_graph(teacher, alpha, beta)?;
    pair_wise_loss(&gs, &gt)
}

/// Pair-wise loss over each pixel's 8-neighbourhood and itself.
pub fn local_pairwise_loss(student: &Tensor, teacher: &Tensor) -> Result<Tensor> {
    if student.rank() != 4 || teacher.rank() != 4 || student.shape()[2..] != teacher.shape()[2..] {
        return Err(Error::shape("local_pairwise_loss", student.shape(), teacher.shape()));
    }
    pair_wise_distill(student, teacher, Alpha::Nearest(9), 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_map(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new((0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect(), shape).unwrap()
    }

    fn pixel(t: &Tensor, b: usize, i: usize) -> Vec<f32> {
        let s = t.shape();
        let hw = s[2] * s[3];
        (0..s[1]).map(|c| t.data()[(b * s[1] + c) * hw + i]).collect()
    }

    #[test]
    fn similarity_examples() {
        assert!((node_similarity(&[0.3, -2.0], &[0.3, -2.0]) - 1.0).abs() < 1e-7);
        assert_eq!(node_similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((node_similarity(&[1.0, 1.0], &[1.0, 0.0]) - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-7);
        assert_eq!(node_similarity(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(node_similarity(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn similarity_matrix_handles_zero_vectors() {
        let nodes = Tensor::new(vec![0.0, 0.0, 1.0, 1.0, 1.0, 0.0], &[1, 3, 2]).unwrap();
        let a = similarity_matrix(&nodes).unwrap();
        assert!(a.data().iter().all(|v| v.is_finite()));
        assert_eq!(&a.data()[..3], &[0.0, 0.0, 0.0]);
        assert!((a.data()[5] - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-6);
    }

    #[test]
    fn full_graph_accounting() {
        let g = build_affinity_graph(&Tensor::ones(&[1, 3, 4, 4]), Alpha::Full, 1).unwrap();
        assert_eq!(g.nodes(), 16);
        assert!(g.neighbors.iter().all(|n| n.len() == 16));
        assert_eq!(g.connections(), 256);
    }

    #[test]
    fn pooled_full_graph_accounting() {
        let (w, h) = (8usize, 8usize);
        let g = build_affinity_graph(&Tensor::ones(&[1, 2, h, w]), Alpha::Full, 4).unwrap();
        assert_eq!(g.connections(), (w * h).pow(2) / 16);
        let pooled = g.node_features.to_vec();
        assert!(pooled.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn nine_nearest_is_the_chebyshev_ball() {
        let nb = chebyshev_neighbors(5, 5, 9);
        let center = 2 * 5 + 2;
        let mut expect: Vec<usize> = (1..4).flat_map(|r| (1..4).map(move |c| r * 5 + c)).collect();
        expect.sort();
        let mut got = nb[center].clone();
        got.sort();
        assert_eq!(got, expect);
        // A corner has 4 nodes within distance 1; the rest come from ring 2 in row-major order.
        assert_eq!(nb[0], vec![0, 1, 5, 6, 2, 7, 10, 11, 12]);
        let on3 = chebyshev_neighbors(3, 3, 9);
        assert!(on3.iter().all(|n| n.len() == 9));
    }

    #[test]
    fn graph_errors() {
        let f = Tensor::ones(&[1, 2, 6, 6]);
        assert!(build_affinity_graph(&f, Alpha::Full, 2).is_err());
        assert!(build_affinity_graph(&f, Alpha::Full, 16).is_err());
        assert!(build_affinity_graph(&f, Alpha::Nearest(37), 1).is_err());
        assert!(build_affinity_graph(&f, Alpha::Nearest(0), 1).is_err());
        assert!(build_affinity_graph(&f, Alpha::Full, 9).is_ok());
    }

    #[test]
    fn identical_maps_give_zero() {
        let f = rand_map(0, &[2, 4, 6, 6]);
        assert_eq!(pair_wise_distill(&f, &f, Alpha::Full, 1).unwrap().item().unwrap(), 0.0);
        assert_eq!(local_pairwise_loss(&f, &f).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn normalization_closed_form() {
        // Student nodes are parallel (a = 1), teacher nodes orthogonal (a = I).
        let s = Tensor::new(vec![1.0, 1.0, 0.0, 0.0], &[1, 2, 1, 2]).unwrap();
        let t = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[1, 2, 1, 2]).unwrap();
        let l = pair_wise_distill(&s, &t, Alpha::Full, 1).unwrap().item().unwrap();
        // β/(W'H'α) · [(1-1)² + (1-0)² + (1-0)² + (1-1)²] = 1/(2·2) · 2
        assert!((l - 0.5).abs() < 1e-6);
    }

    #[test]
    fn all_ones_against_all_zeros_is_one() {
        // Parallel nodes have similarity 1 everywhere, zero nodes 0 everywhere.
        let g = |v: f32| AffinityGraph {
            node_features: Tensor::full(&[1, 2, 1], v),
            neighbors: chebyshev_neighbors(1, 2, 2),
            alpha: 2,
            beta: 1,
            grid: (1, 2),
            map: (1, 2),
        };
        let l = pair_wise_loss(&g(1.0), &g(0.0)).unwrap().item().unwrap();
        assert!((l - 1.0).abs() < 1e-6, "{l}");
    }

    #[test]
    fn matches_brute_force_all_pairs() {
        for seed in 0..5 {
            let s = rand_map(seed, &[2, 8, 6, 6]);
            let t = rand_map(seed + 100, &[2, 8, 6, 6]);
            let got = pair_wise_distill(&s, &t, Alpha::Full, 1).unwrap().item().unwrap() as f64;
            let mut total = 0.0f64;
            for b in 0..2 {
                for i in 0..36 {
                    for j in 0..36 {
                        let d = node_similarity(&pixel(&s, b, i), &pixel(&s, b, j)) as f64
                            - node_similarity(&pixel(&t, b, i), &pixel(&t, b, j)) as f64;
                        total += d * d;
                    }
                }
            }
            let want = total / (36.0 * 36.0) / 2.0;
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn local_equals_alpha_nine() {
        let s = rand_map(1, &[1, 4, 5, 5]);
        let t = rand_map(2, &[1, 6, 5, 5]);
        let a = local_pairwise_loss(&s, &t).unwrap().item().unwrap();
        let b = pair_wise_distill(&s, &t, Alpha::Nearest(9), 1).unwrap().item().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn alpha_parses_and_serializes() {
        assert_eq!("full".parse::<Alpha>().unwrap(), Alpha::Full);
        assert_eq!("9".parse::<Alpha>().unwrap(), Alpha::Nearest(9));
        assert!("nine".parse::<Alpha>().is_err());
        #[derive(Serialize, Deserialize, PartialEq, Debug)]
        struct W {
            a: Alpha,
            b: Alpha,
        }
        let w = W {
            a: Alpha::Full,
            b: Alpha::Nearest(9),
        };
        let text = toml::to_string(&w).unwrap();
        assert_eq!(toml::from_str::<W>(&text).unwrap(), w);
    }

    proptest! {
        #[test]
        fn invariant_to_positive_student_scaling(k in 0.01f32..100.0, seed in 0u64..50) {
            let s = rand_map(seed, &[1, 3, 4, 4]);
            let t = rand_map(seed + 1, &[1, 3, 4, 4]);
            let a = pair_wise_distill(&s, &t, Alpha::Full, 1).unwrap().item().unwrap();
            let b = pair_wise_distill(&s.scale(k), &t, Alpha::Full, 1).unwrap().item().unwrap();
            prop_assert!((a - b).abs() < 1e-5);
        }

        #[test]
        fn neighbour_lists_have_alpha_entries(rows in 1usize..6, cols in 1usize..6, frac in 0.0f64..1.0) {
            let n = rows * cols;
            let alpha = 1 + ((n - 1) as f64 * frac) as usize;
            let nb = chebyshev_neighbors(rows, cols, alpha);
            prop_assert_eq!(nb.len(), n);
            for (i, list) in nb.iter().enumerate() {
                prop_assert_eq!(list.len(), alpha);
                prop_assert_eq!(list[0], i);
            }
        }
    }
}
