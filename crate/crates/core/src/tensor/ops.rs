use std::sync::Arc;

use super::kernels::{self, BilinearMap, ConvGeom};
use super::{grad_enabled, numel, record_kinks, Op, Tensor};
use crate::{Error, Result};

/// Elementwise operation kinds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Scale(f32),
    Relu,
    Exp,
    Log,
    Sqrt,
}

/// Applies an elementwise kind to one or two inputs.
pub fn elementwise(kind: Elementwise, inputs: &[&Tensor]) -> Result<Tensor> {
    let arity = match kind {
        Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
        _ => 1,
    };
    if inputs.len() != arity {
        return Err(Error::InvalidArgument(format!(
            "{kind:?} takes {arity} input(s), got {}",
            inputs.len()
        )));
    }
    match kind {
        Elementwise::Add => inputs[0].add(inputs[1]),
        Elementwise::Sub => inputs[0].sub(inputs[1]),
        Elementwise::Mul => inputs[0].mul(inputs[1]),
        Elementwise::Scale(f) => Ok(inputs[0].scale(f)),
        Elementwise::Relu => Ok(inputs[0].relu()),
        Elementwise::Exp => Ok(inputs[0].exp()),
        Elementwise::Log => inputs[0].log(),
        Elementwise::Sqrt => inputs[0].sqrt(),
    }
}

fn all_finite(d: &[f32]) -> bool {
    d.iter().all(|v| v.is_finite())
}

/// Wraps a freshly computed buffer, attaching `op` when any input is tracked.
pub(super) fn emit(shape: Vec<usize>, data: Vec<f32>, inputs: &[&Tensor], op: impl FnOnce() -> Op) -> Tensor {
    debug_assert!(
        !inputs.iter().all(|t| all_finite(t.data())) || all_finite(&data),
        "non-finite result from finite inputs"
    );
    let track = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
    let op = if track { Some(op()) } else { None };
    Tensor::build(shape, data.into(), op, track)
}

impl Tensor {
    fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
        self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect()
    }

    fn map(&self, f: impl Fn(f32) -> f32) -> Vec<f32> {
        self.data().iter().map(|&a| f(a)).collect()
    }

    /// Aligns a binary operand pair: identical shapes, or one side a single element.
    fn align(&self, other: &Tensor, op: &'static str) -> Result<(Tensor, Tensor)> {
        if self.shape() == other.shape() {
            return Ok((self.clone(), other.clone()));
        }
        if other.numel() == 1 {
            return Ok((self.clone(), other.expand(self.shape())?));
        }
        if self.numel() == 1 {
            return Ok((self.expand(other.shape())?, other.clone()));
        }
        Err(Error::shape(op, self.shape(), other.shape()))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = self.align(other, "add")?;
        let data = a.zip_map(&b, |x, y| x + y);
        Ok(emit(a.shape().to_vec(), data, &[&a, &b], || Op::Add(a.clone(), b.clone())))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = self.align(other, "sub")?;
        let data = a.zip_map(&b, |x, y| x - y);
        Ok(emit(a.shape().to_vec(), data, &[&a, &b], || Op::Sub(a.clone(), b.clone())))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = self.align(other, "mul")?;
        let data = a.zip_map(&b, |x, y| x * y);
        Ok(emit(a.shape().to_vec(), data, &[&a, &b], || Op::Mul(a.clone(), b.clone())))
    }

    /// Elementwise quotient; the divisor must be nonzero everywhere.
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = self.align(other, "div")?;
        if b.data().contains(&0.0) {
            return Err(Error::Domain {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        let data = a.zip_map(&b, |x, y| x / y);
        Ok(emit(a.shape().to_vec(), data, &[&a, &b], || Op::Div(a.clone(), b.clone())))
    }

    pub fn scale(&self, f: f32) -> Tensor {
        let data = self.map(|x| x * f);
        emit(self.shape().to_vec(), data, &[self], || Op::Scale(self.clone(), f))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f32) -> Tensor {
        let data = self.map(|x| x + c);
        emit(self.shape().to_vec(), data, &[self], || Op::AddScalar(self.clone()))
    }

    pub fn relu(&self) -> Tensor {
        record_kinks(self.data());
        let data = self.map(|x| if x > 0.0 { x } else { 0.0 });
        emit(self.shape().to_vec(), data, &[self], || Op::Relu(self.clone()))
    }

    pub fn exp(&self) -> Tensor {
        let data = self.map(f32::exp);
        emit(self.shape().to_vec(), data, &[self], || Op::Exp(self.clone()))
    }

    /// Natural logarithm; every element must be strictly positive.
    pub fn log(&self) -> Result<Tensor> {
        if let Some(v) = self.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                msg: format!("input {v} is not strictly positive"),
            });
        }
        let data = self.map(f32::ln);
        Ok(emit(self.shape().to_vec(), data, &[self], || Op::Log(self.clone())))
    }

    /// Square root; every element must be strictly positive.
    pub fn sqrt(&self) -> Result<Tensor> {
        if let Some(v) = self.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain {
                op: "sqrt",
                msg: format!("input {v} is not strictly positive"),
            });
        }
        let data = self.map(f32::sqrt);
        Ok(emit(self.shape().to_vec(), data, &[self], || Op::Sqrt(self.clone())))
    }

    pub fn square(&self) -> Tensor {
        self.mul(self).expect("identical shapes")
    }

    // ── shape ops ──────────────────────────────────────────────────

    /// Explicit broadcast of size-1 axes (or a single element) to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let ok = self.numel() == 1
            || (self.rank() == shape.len()
                && self.shape().iter().zip(shape).all(|(&s, &b)| s == b || s == 1));
        if !ok {
            return Err(Error::shape("expand", self.shape(), shape));
        }
        let data = kernels::expand(self.data(), self.shape(), shape);
        Ok(emit(shape.to_vec(), data, &[self], || Op::Expand(self.clone())))
    }

    /// Sums over the axes where `shape` has size 1 (or everything, for a scalar target).
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let ok = numel(shape) == 1
            || (self.rank() == shape.len()
                && self.shape().iter().zip(shape).all(|(&b, &s)| s == b || s == 1));
        if !ok {
            return Err(Error::shape("sum_to", self.shape(), shape));
        }
        let data = kernels::sum_to(self.data(), self.shape(), shape);
        Ok(emit(shape.to_vec(), data, &[self], || Op::SumTo(self.clone())))
    }

    pub fn sum_all(&self) -> Tensor {
        self.sum_to(&[]).expect("scalar target always valid")
    }

    pub fn mean_all(&self) -> Tensor {
        self.sum_all().scale(1.0 / self.numel() as f32)
    }

    pub(crate) fn keep_shape(&self, axes: &[usize]) -> Result<Vec<usize>> {
        let mut s = self.shape().to_vec();
        for &a in axes {
            if a >= s.len() {
                return Err(Error::Axis { axis: a, rank: s.len() });
            }
            s[a] = 1;
        }
        Ok(s)
    }

    /// Sum over `axes`, keeping them as size-1 axes.
    pub fn sum_keepdim(&self, axes: &[usize]) -> Result<Tensor> {
        let s = self.keep_shape(axes)?;
        self.sum_to(&s)
    }

    pub fn mean_keepdim(&self, axes: &[usize]) -> Result<Tensor> {
        let s = self.keep_shape(axes)?;
        let n = self.numel() / numel(&s);
        Ok(self.sum_to(&s)?.scale(1.0 / n as f32))
    }

    /// Maximum along `axis` (size-1 axis kept); a constant, never tracked.
    pub fn max_keepdim(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        let len = self.dim(axis)?;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![f32::NEG_INFINITY; outer * inner];
        let d = self.data();
        for o in 0..outer {
            for a in 0..len {
                let row = &d[(o * len + a) * inner..][..inner];
                for (m, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    if v > *m {
                        *m = v;
                    }
                }
            }
        }
        let mut s = shape;
        s[axis] = 1;
        Ok(Tensor::from_parts(out, s))
    }

    /// Index of the maximum along `axis` (first on ties), shape with `axis` removed.
    pub fn argmax(&self, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape();
        let len = self.dim(axis)?;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let d = self.data();
        let mut out = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = f32::NEG_INFINITY;
                for a in 0..len {
                    let v = d[(o * len + a) * inner + i];
                    if v > best {
                        best = v;
                        out[o * inner + i] = a;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let track = grad_enabled() && self.requires_grad();
        let op = if track { Some(Op::Reshape(self.clone())) } else { None };
        Ok(Tensor::build(shape.to_vec(), self.0.data.clone(), op, track))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let mut seen = vec![false; self.rank()];
        if perm.len() != self.rank() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument(format!(
                "{perm:?} is not a permutation of rank {}",
                self.rank()
            )));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let data = kernels::permute(self.data(), self.shape(), perm);
        Ok(emit(shape, data, &[self], || Op::Permute(self.clone(), perm.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::Axis { axis: 1, rank: r });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    // ── products ───────────────────────────────────────────────────

    /// Matrix product of [M×K]·[K×N], or batched [B×M×K]·[B×K×N].
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        let (batch, m, k, n) = match (a.len(), b.len()) {
            (2, 2) if a[1] == b[0] => (1, a[0], a[1], b[1]),
            (3, 3) if a[0] == b[0] && a[2] == b[1] => (a[0], a[1], a[2], b[2]),
            _ => return Err(Error::shape("matmul", a, b)),
        };
        let mut out = vec![0f32; batch * m * n];
        for bi in 0..batch {
            kernels::gemm_nn(
                m,
                k,
                n,
                &self.data()[bi * m * k..(bi + 1) * m * k],
                &other.data()[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let shape = if a.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        Ok(emit(shape, out, &[self, other], || Op::MatMul(self.clone(), other.clone())))
    }

    /// 2-D convolution of x [B×C×H×W] with w [O×C×k×k] (k odd).
    pub fn conv2d(&self, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let g = conv_geom(self.shape(), w.shape(), stride, pad)?;
        let data = kernels::conv2d(self.data(), w.data(), &g);
        Ok(emit(g.y_shape(), data, &[self, w], || Op::Conv2d(self.clone(), w.clone(), g)))
    }

    pub(crate) fn conv2d_geom(&self, w: &Tensor, g: ConvGeom) -> Tensor {
        let data = kernels::conv2d(self.data(), w.data(), &g);
        emit(g.y_shape(), data, &[self, w], || Op::Conv2d(self.clone(), w.clone(), g))
    }

    pub(crate) fn conv2d_input_grad(gy: &Tensor, w: &Tensor, g: ConvGeom) -> Tensor {
        let data = kernels::conv2d_input_grad(gy.data(), w.data(), &g);
        emit(g.x_shape(), data, &[gy, w], || Op::ConvInputGrad(gy.clone(), w.clone(), g))
    }

    pub(crate) fn conv2d_weight_grad(x: &Tensor, gy: &Tensor, g: ConvGeom) -> Tensor {
        let data = kernels::conv2d_weight_grad(x.data(), gy.data(), &g);
        emit(g.w_shape(), data, &[x, gy], || Op::ConvWeightGrad(x.clone(), gy.clone(), g))
    }

    // ── spatial ────────────────────────────────────────────────────

    fn planes_hw(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(Error::geometry(op, format!("needs at least 2 axes, got {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        Ok((self.numel() / (h * w), h, w))
    }

    /// Mean over non-overlapping k×k windows of the last two axes.
    pub fn avg_pool(&self, k: usize) -> Result<Tensor> {
        let (planes, h, w) = self.planes_hw("avg_pool")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::geometry(
                "avg_pool",
                format!("window {k} does not divide spatial size {h}×{w}"),
            ));
        }
        let data = kernels::avg_pool(self.data(), planes, h, w, k);
        let mut shape = self.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = h / k;
        shape[r - 1] = w / k;
        Ok(emit(shape, data, &[self], || Op::AvgPool(self.clone(), k)))
    }

    pub(crate) fn avg_pool_adjoint(&self, k: usize) -> Tensor {
        let (planes, oh, ow) = self.planes_hw("avg_pool").expect("pooled tensor has spatial axes");
        let data = kernels::avg_pool_adjoint(self.data(), planes, oh, ow, k);
        let mut shape = self.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = oh * k;
        shape[r - 1] = ow * k;
        emit(shape, data, &[self], || Op::AvgPoolAdjoint(self.clone(), k))
    }

    /// Bilinear resize of the last two axes, align-corners false.
    pub fn upsample_bilinear(&self, oh: usize, ow: usize) -> Result<Tensor> {
        let (_, h, w) = self.planes_hw("upsample_bilinear")?;
        if (h, w) == (oh, ow) {
            return Ok(self.clone());
        }
        Ok(self.resample(Arc::new(BilinearMap::new(h, w, oh, ow)), false))
    }

    pub(crate) fn resample(&self, map: Arc<BilinearMap>, adjoint: bool) -> Tensor {
        let (planes, _, _) = self.planes_hw("resample").expect("spatial axes");
        let (data, (h, w)) = if adjoint {
            (map.apply_adjoint(self.data(), planes), map.src_hw())
        } else {
            (map.apply(self.data(), planes), map.dst_hw())
        };
        let mut shape = self.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = h;
        shape[r - 1] = w;
        emit(shape, data, &[self], || Op::Resample(self.clone(), map, adjoint))
    }

    // ── slicing ────────────────────────────────────────────────────

    /// Joins tensors along `axis`; all other axes must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::Axis { axis, rank });
        }
        for p in parts {
            let ok = p.rank() == rank
                && (0..rank).all(|a| a == axis || p.shape()[a] == first.shape()[a]);
            if !ok {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let total_axis: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape()[axis] * inner;
                out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total_axis;
        let owned: Vec<Tensor> = parts.iter().map(|&p| p.clone()).collect();
        Ok(emit(shape, out, parts, || Op::Concat(owned, axis)))
    }

    /// The sub-range `start..start+len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let d = self.dim(axis)?;
        if len == 0 || start + len > d {
            return Err(Error::InvalidArgument(format!(
                "narrow {start}..{} out of range for axis {axis} of size {d}",
                start + len
            )));
        }
        if len == d {
            return Ok(self.clone());
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&self.data()[(o * d + start) * inner..(o * d + start + len) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(emit(shape, out, &[self], || Op::Narrow(self.clone(), axis, start)))
    }

    /// Zero-pads along `axis` so this tensor occupies `start..` of a `total`-long axis.
    pub(crate) fn pad_axis(&self, axis: usize, start: usize, total: usize) -> Tensor {
        let d = self.shape()[axis];
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut out = vec![0f32; outer * total * inner];
        for o in 0..outer {
            out[(o * total + start) * inner..(o * total + start + d) * inner]
                .copy_from_slice(&self.data()[o * d * inner..(o + 1) * d * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = total;
        emit(shape, out, &[self], || Op::Pad(self.clone(), axis, start))
    }
}

pub(crate) fn conv_geom(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    if x.len() != 4 || w.len() != 4 {
        return Err(Error::geometry("conv2d", format!("expects 4-D input and kernel, got {x:?} and {w:?}")));
    }
    if w[1] != x[1] {
        return Err(Error::shape("conv2d", x, w));
    }
    let k = w[2];
    if w[3] != k || k % 2 == 0 {
        return Err(Error::geometry("conv2d", format!("kernel must be square with odd size, got {}×{}", w[2], w[3])));
    }
    if stride == 0 {
        return Err(Error::geometry("conv2d", "stride must be positive"));
    }
    if x[2] + 2 * pad < k || x[3] + 2 * pad < k {
        return Err(Error::geometry(
            "conv2d",
            format!("padded input {}×{} smaller than kernel {k}", x[2] + 2 * pad, x[3] + 2 * pad),
        ));
    }
    Ok(ConvGeom {
        batch: x[0],
        in_c: x[1],
        in_h: x[2],
        in_w: x[3],
        out_c: w[0],
        k,
        stride,
        pad,
        out_h: (x[2] + 2 * pad - k) / stride + 1,
        out_w: (x[3] + 2 * pad - k) / stride + 1,
    })
}
