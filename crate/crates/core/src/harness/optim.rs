use crate::tensor::{GradStore, Tensor};
use crate::{Error, Result};

/// lr0·(1 − iter/max_iter)^power, with `iter` clamped to `max_iter`.
pub fn poly_lr(iter: u64, max_iter: u64, lr0: f32, power: f32) -> f32 {
    if max_iter == 0 {
        return 0.0;
    }
    let frac = iter.min(max_iter) as f64 / max_iter as f64;
    (lr0 as f64 * (1.0 - frac).powf(power as f64)) as f32
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// v ← μ·v + g + λ·p, p ← p − lr·v.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(params: usize, momentum: f32, weight_decay: f32) -> Sgd {
        Sgd {
            momentum,
            weight_decay,
            velocity: vec![Vec::new(); params],
        }
    }

    /// New values for each parameter; `None` where no gradient reached it.
    pub fn step(&mut self, params: &[&Tensor], grads: &GradStore, lr: f32) -> Result<Vec<Option<Vec<f32>>>> {
        if params.len() != self.velocity.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        let mut out = Vec::with_capacity(params.len());
        for (p, v) in params.iter().zip(&mut self.velocity) {
            let Some(g) = grads.get(p) else {
                out.push(None);
                continue;
            };
            if v.is_empty() {
                *v = vec![0.0; p.numel()];
            }
            let mut next = p.to_vec();
            for ((x, vi), &gi) in next.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *x;
                *x -= lr * *vi;
            }
            out.push(Some(next));
        }
        Ok(out)
    }
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub weight_decay: f32,
    t: Vec<i32>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

const ADAM_EPS: f32 = 1e-8;

impl Adam {
    pub fn new(params: usize, beta1: f32, beta2: f32, weight_decay: f32) -> Adam {
        Adam {
            beta1,
            beta2,
            weight_decay,
            t: vec![0; params],
            m: vec![Vec::new(); params],
            v: vec![Vec::new(); params],
        }
    }

    pub fn step(&mut self, params: &[&Tensor], grads: &GradStore, lr: f32) -> Result<Vec<Option<Vec<f32>>>> {
        if params.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        let (b1, b2) = (self.beta1, self.beta2);
        let mut out = Vec::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            let Some(g) = grads.get(p) else {
                out.push(None);
                continue;
            };
            if self.m[i].is_empty() {
                self.m[i] = vec![0.0; p.numel()];
                self.v[i] = vec![0.0; p.numel()];
            }
            self.t[i] += 1;
            let c1 = 1.0 - b1.powi(self.t[i]);
            let c2 = 1.0 - b2.powi(self.t[i]);
            let mut next = p.to_vec();
            for (((x, m), v), &gi) in next.iter_mut().zip(&mut self.m[i]).zip(&mut self.v[i]).zip(g.data()) {
                let gi = gi + self.weight_decay * *x;
                *m = b1 * *m + (1.0 - b1) * gi;
                *v = b2 * *v + (1.0 - b2) * gi * gi;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            }
            out.push(Some(next));
        }
        Ok(out)
    }
}

/// Either optimizer behind one step interface.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn step(&mut self, params: &[&Tensor], grads: &GradStore, lr: f32) -> Result<Vec<Option<Vec<f32>>>> {
        match self {
            Optimizer::Sgd(o) => o.step(params, grads, lr),
            Optimizer::Adam(o) => o.step(params, grads, lr),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule_examples() {
        assert_eq!(poly_lr(0, 100, 0.01, 0.9), 0.01);
        assert_eq!(poly_lr(100, 100, 0.01, 0.9), 0.0);
        let half = poly_lr(50, 100, 1.0, 0.9) as f64;
        assert!((half - 0.5f64.powf(0.9)).abs() < 1e-6);
        assert!((half - 0.5359).abs() < 1e-4);
        assert_eq!(poly_lr(150, 100, 1.0, 0.9), 0.0);
    }

    #[test]
    fn momentum_and_decay_follow_the_recurrence() {
        let p = Tensor::var(vec![1.0, -2.0], &[2]).unwrap();
        let mut opt = Sgd::new(1, 0.9, 0.1);
        let loss = p.square().sum_all();
        let g = loss.backward().unwrap();
        let first = opt.step(&[&p], &g, 0.5).unwrap().remove(0).unwrap();
        // v = 2p + 0.1p = 2.1p; p − 0.5·v = −0.05p
        assert!((first[0] + 0.05).abs() < 1e-6 && (first[1] - 0.1).abs() < 1e-6);
        let p2 = Tensor::var(first, &[2]).unwrap();
        let g2 = p2.square().sum_all().backward().unwrap();
        let second = opt.step(&[&p2], &g2, 0.5).unwrap().remove(0).unwrap();
        // v = 0.9·2.1 + 2.1·(−0.05) = 1.785 per unit of the original p
        assert!((second[0] - (-0.05 - 0.5 * 1.785)).abs() < 1e-5);
    }

    #[test]
    fn untouched_parameters_are_left_alone() {
        let a = Tensor::var(vec![1.0], &[1]).unwrap();
        let b = Tensor::var(vec![1.0], &[1]).unwrap();
        let g = a.square().sum_all().backward().unwrap();
        let mut opt = Sgd::new(2, 0.9, 0.1);
        let out = opt.step(&[&a, &b], &g, 0.1).unwrap();
        assert!(out[0].is_some() && out[1].is_none());
        assert!(opt.step(&[&a], &g, 0.1).is_err());
    }

    #[test]
    fn adam_first_step_moves_each_coordinate_by_lr() {
        let p = Tensor::var(vec![3.0, -0.01], &[2]).unwrap();
        let g = p.square().sum_all().backward().unwrap();
        let mut opt = Adam::new(1, 0.9, 0.999, 0.0);
        let next = opt.step(&[&p], &g, 0.1).unwrap().remove(0).unwrap();
        assert!((next[0] - 2.9).abs() < 1e-5 && (next[1] - 0.09).abs() < 1e-5, "{next:?}");
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut p = Tensor::var(vec![2.0, -1.5, 0.5], &[3]).unwrap();
        let mut opt = Optimizer::Adam(Adam::new(1, 0.9, 0.99, 0.0));
        for _ in 0..500 {
            let g = p.square().sum_all().backward().unwrap();
            p = Tensor::var(opt.step(&[&p], &g, 0.05).unwrap().remove(0).unwrap(), &[3]).unwrap();
        }
        assert!(p.data().iter().all(|v| v.abs() < 1e-2), "{:?}", p.data());
    }
}
