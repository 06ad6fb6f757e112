//! Distillation losses: pixel-wise, pair-wise, holistic and the baselines.

mod baselines;
mod holistic;
mod pairwise;
mod pixel;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

pub use baselines::{attention_map, attention_transfer_loss, mimic_loss, Adapter};
pub use holistic::{gradient_penalty, holistic_d_loss, holistic_s_term, HolisticD};
pub use pairwise::{
    build_affinity_graph, chebyshev_neighbors, local_pairwise_loss, node_similarity, pair_wise_distill, pair_wise_loss,
    similarity_matrix, AffinityGraph, Alpha,
};
pub use pixel::{pixel_wise_loss, PixelWise};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f32,
    pub lambda2: f32,
    pub gp_coeff: f32,
    pub unlabeled: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 10.0,
            lambda2: 0.1,
            gp_coeff: 10.0,
            unlabeled: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("gp_coeff", self.gp_coeff)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// task·[labeled] + λ1·(pi + pa) − λ2·ho_s.
pub fn student_objective(task: &Tensor, pi: &Tensor, pa: &Tensor, ho_s: &Tensor, w: &LossWeights) -> Result<Tensor> {
    for t in [task, pi, pa, ho_s] {
        if t.numel() != 1 {
            return Err(Error::NonScalarLoss(t.shape().to_vec()));
        }
    }
    let distill = pi.add(pa)?.scale(w.lambda1).sub(&ho_s.scale(w.lambda2))?;
    if w.unlabeled {
        return Ok(distill);
    }
    task.add(&distill)
}
