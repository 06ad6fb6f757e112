use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use super::kernels::{BilinearMap, ConvGeom};
use super::{no_grad, with_grad, Tensor, TensorId};
use crate::{Error, Result};

/// A recorded differentiable operation and its inputs.
pub(crate) enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Scale(Tensor, f32),
    AddScalar(Tensor),
    Relu(Tensor),
    Exp(Tensor),
    Log(Tensor),
    Sqrt(Tensor),
    Expand(Tensor),
    SumTo(Tensor),
    Reshape(Tensor),
    Permute(Tensor, Vec<usize>),
    MatMul(Tensor, Tensor),
    Conv2d(Tensor, Tensor, ConvGeom),
    ConvInputGrad(Tensor, Tensor, ConvGeom),
    ConvWeightGrad(Tensor, Tensor, ConvGeom),
    AvgPool(Tensor, usize),
    AvgPoolAdjoint(Tensor, usize),
    Resample(Tensor, Arc<BilinearMap>, bool),
    Concat(Vec<Tensor>, usize),
    Narrow(Tensor, usize, usize),
    Pad(Tensor, usize, usize),
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<&Tensor> {
        use Op::*;
        match self {
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![a, b],
            Conv2d(a, b, _) | ConvInputGrad(a, b, _) | ConvWeightGrad(a, b, _) => vec![a, b],
            Scale(a, _) | AddScalar(a) | Relu(a) | Exp(a) | Log(a) | Sqrt(a) => vec![a],
            Expand(a) | SumTo(a) | Reshape(a) | Permute(a, _) => vec![a],
            AvgPool(a, _) | AvgPoolAdjoint(a, _) | Resample(a, _, _) => vec![a],
            Narrow(a, _, _) | Pad(a, _, _) => vec![a],
            Concat(parts, _) => parts.iter().collect(),
        }
    }

    /// Gradient flowing to input `idx` given the output `out` and its gradient `g`.
    fn backward_input(&self, idx: usize, out: &Tensor, g: &Tensor) -> Result<Tensor> {
        use Op::*;
        Ok(match self {
            Add(..) => g.clone(),
            Sub(..) => {
                if idx == 0 {
                    g.clone()
                } else {
                    g.neg()
                }
            }
            Mul(a, b) => {
                if idx == 0 {
                    g.mul(b)?
                } else {
                    g.mul(a)?
                }
            }
            Div(_, b) => {
                if idx == 0 {
                    g.div(b)?
                } else {
                    g.mul(out)?.div(b)?.neg()
                }
            }
            Scale(_, f) => g.scale(*f),
            AddScalar(..) => g.clone(),
            Relu(a) => {
                let mask: Vec<f32> = a.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
                g.mul(&Tensor::from_parts(mask, a.shape().to_vec()))?
            }
            Exp(_) => g.mul(out)?,
            Log(a) => g.div(a)?,
            Sqrt(_) => g.div(out)?.scale(0.5),
            Expand(a) => g.sum_to(a.shape())?,
            SumTo(a) => g.expand(a.shape())?,
            Reshape(a) => g.reshape(a.shape())?,
            Permute(_, perm) => {
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                g.permute(&inv)?
            }
            MatMul(a, b) => {
                if idx == 0 {
                    g.matmul(&b.transpose()?)?
                } else {
                    a.transpose()?.matmul(g)?
                }
            }
            Conv2d(x, w, geom) => {
                if idx == 0 {
                    Tensor::conv2d_input_grad(g, w, *geom)
                } else {
                    Tensor::conv2d_weight_grad(x, g, *geom)
                }
            }
            ConvInputGrad(gy, w, geom) => {
                if idx == 0 {
                    g.conv2d_geom(w, *geom)
                } else {
                    Tensor::conv2d_weight_grad(g, gy, *geom)
                }
            }
            ConvWeightGrad(x, gy, geom) => {
                if idx == 0 {
                    Tensor::conv2d_input_grad(gy, g, *geom)
                } else {
                    x.conv2d_geom(g, *geom)
                }
            }
            AvgPool(_, k) => g.avg_pool_adjoint(*k),
            AvgPoolAdjoint(_, k) => g.avg_pool(*k)?,
            Resample(_, map, adjoint) => g.resample(map.clone(), !adjoint),
            Concat(parts, axis) => {
                let start: usize = parts[..idx].iter().map(|p| p.shape()[*axis]).sum();
                g.narrow(*axis, start, parts[idx].shape()[*axis])?
            }
            Narrow(a, axis, start) => g.pad_axis(*axis, *start, a.shape()[*axis]),
            Pad(a, axis, start) => g.narrow(*axis, *start, a.shape()[*axis])?,
        })
    }
}

/// The recorded operations reachable from a loss, in topological order
/// (every operation's inputs precede it).
pub struct Tape {
    nodes: Vec<Tensor>,
}

impl Tape {
    /// Collects the tracked subgraph that produced `root`.
    pub fn record(root: &Tensor) -> Tape {
        let mut nodes = Vec::new();
        let mut seen: HashSet<TensorId> = HashSet::new();
        // Iterative post-order DFS; deep graphs would overflow a recursive walk.
        let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                nodes.push(t);
                continue;
            }
            if !t.requires_grad() || !seen.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(op) = t.op() {
                for inp in op.inputs().into_iter().rev() {
                    if inp.requires_grad() && !seen.contains(&inp.id()) {
                        stack.push((inp.clone(), false));
                    }
                }
            }
        }
        Tape { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.iter().filter(|t| t.op().is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn nodes(&self) -> &[Tensor] {
        &self.nodes
    }

    /// Replays the tape backwards. `needed` restricts propagation to nodes
    /// that lead to a target; `None` propagates everywhere.
    fn replay(&self, seed: Tensor, needed: Option<&HashSet<TensorId>>) -> Result<GradStore> {
        let mut grads: HashMap<TensorId, Tensor> = HashMap::new();
        let root = self.nodes.last().expect("tape always holds its root");
        grads.insert(root.id(), seed);
        for node in self.nodes.iter().rev() {
            let Some(op) = node.op() else { continue };
            let Some(g) = grads.get(&node.id()).cloned() else { continue };
            for (i, inp) in op.inputs().into_iter().enumerate() {
                if !inp.requires_grad() || needed.is_some_and(|n| !n.contains(&inp.id())) {
                    continue;
                }
                let gi = op.backward_input(i, node, &g)?;
                let acc = match grads.remove(&inp.id()) {
                    Some(prev) => prev.add(&gi)?,
                    None => gi,
                };
                grads.insert(inp.id(), acc);
            }
        }
        Ok(GradStore { grads })
    }

    /// Ids of tape nodes that depend on any of `targets`.
    fn dependents(&self, targets: &[&Tensor]) -> HashSet<TensorId> {
        let mut set: HashSet<TensorId> = targets.iter().map(|t| t.id()).collect();
        for node in &self.nodes {
            if let Some(op) = node.op() {
                if op.inputs().iter().any(|i| set.contains(&i.id())) {
                    set.insert(node.id());
                }
            }
        }
        set
    }
}

/// Gradients keyed by tensor; tensors the loss does not reach have none.
pub struct GradStore {
    grads: HashMap<TensorId, Tensor>,
}

impl GradStore {
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        self.grads.get(&t.id())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Tensor {
    fn check_scalar_loss(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        Ok(())
    }

    /// Gradients of this scalar with respect to every tracked tensor it depends on.
    pub fn backward(&self) -> Result<GradStore> {
        self.check_scalar_loss()?;
        if !self.requires_grad() {
            return Ok(GradStore { grads: HashMap::new() });
        }
        let tape = Tape::record(self);
        no_grad(|| tape.replay(Tensor::ones(self.shape()), None))
    }

    /// Gradients restricted to the paths that reach `targets`.
    pub fn backward_wrt(&self, targets: &[&Tensor]) -> Result<GradStore> {
        self.check_scalar_loss()?;
        if !self.requires_grad() {
            return Ok(GradStore { grads: HashMap::new() });
        }
        let tape = Tape::record(self);
        let needed = tape.dependents(targets);
        no_grad(|| tape.replay(Tensor::ones(self.shape()), Some(&needed)))
    }

    /// Gradients with respect to `targets`, themselves recorded on a tape so
    /// they can be differentiated again.
    pub fn grad_with_graph(&self, targets: &[&Tensor]) -> Result<Vec<Option<Tensor>>> {
        self.check_scalar_loss()?;
        if !self.requires_grad() {
            return Ok(vec![None; targets.len()]);
        }
        let tape = Tape::record(self);
        let needed = tape.dependents(targets);
        let store = with_grad(|| tape.replay(Tensor::ones(self.shape()), Some(&needed)))?;
        Ok(targets.iter().map(|t| store.get(t).cloned()).collect())
    }
}
