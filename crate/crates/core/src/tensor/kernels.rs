//! Raw numeric kernels over flat row-major buffers.

use std::sync::atomic::{AtomicU8, Ordering};

/// Convolution implementation selector.
///
/// `Direct` is the reference loop nest; `Im2col` lowers to matrix products
/// and must agree with it to 1e-5 absolute.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvAlgo {
    Direct,
    Im2col,
}

static CONV_ALGO: AtomicU8 = AtomicU8::new(1);

impl ConvAlgo {
    pub fn current() -> ConvAlgo {
        match CONV_ALGO.load(Ordering::Relaxed) {
            0 => ConvAlgo::Direct,
            _ => ConvAlgo::Im2col,
        }
    }

    /// Sets the process-wide convolution path.
    pub fn set(self) {
        CONV_ALGO.store(
            match self {
                ConvAlgo::Direct => 0,
                ConvAlgo::Im2col => 1,
            },
            Ordering::Relaxed,
        );
    }
}

// ── matrix products ─────────────────────────────────────────────────

/// c[m×n] += a[m×k] · b[k×n]
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m×n] += aᵀ · b with a stored as [k×m], b as [k×n]
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[p * m + i];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m×n] += a · bᵀ with a stored as [m×k], b as [n×k]
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Eight-lane dot product; the lane split fixes the summation order.
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let ac = &a[c * 8..c * 8 + 8];
        let bc = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            lanes[l] += ac[l] * bc[l];
        }
    }
    let mut tail = 0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let s = ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]));
    s + tail
}

// ── convolution ─────────────────────────────────────────────────────

/// Geometry of a square-kernel 2-D convolution over NCHW data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn x_shape(&self) -> Vec<usize> {
        vec![self.batch, self.in_c, self.in_h, self.in_w]
    }
    pub fn w_shape(&self) -> Vec<usize> {
        vec![self.out_c, self.in_c, self.k, self.k]
    }
    pub fn y_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_c, self.out_h, self.out_w]
    }
    fn cols_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }
    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }
    fn in_plane(&self) -> usize {
        self.in_h * self.in_w
    }
    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
    /// Input column `ix` touched by output column `ox` at kernel offset `kx`.
    #[inline]
    fn src(&self, o: usize, kk: usize, limit: usize) -> Option<usize> {
        let s = (o * self.stride + kk) as isize - self.pad as isize;
        if s >= 0 && (s as usize) < limit {
            Some(s as usize)
        } else {
            None
        }
    }
}

/// Reference convolution: the plain seven-deep loop nest.
pub fn conv2d_direct(x: &[f32], w: &[f32], g: &ConvGeom) -> Vec<f32> {
    let mut y = vec![0f32; g.batch * g.out_c * g.out_plane()];
    for b in 0..g.batch {
        for o in 0..g.out_c {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = 0f32;
                    for c in 0..g.in_c {
                        for ky in 0..g.k {
                            let Some(iy) = g.src(oy, ky, g.in_h) else { continue };
                            for kx in 0..g.k {
                                let Some(ix) = g.src(ox, kx, g.in_w) else { continue };
                                acc += x[((b * g.in_c + c) * g.in_h + iy) * g.in_w + ix]
                                    * w[((o * g.in_c + c) * g.k + ky) * g.k + kx];
                            }
                        }
                    }
                    y[((b * g.out_c + o) * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
    }
    y
}

/// Reference adjoint of the convolution with respect to its input.
pub fn conv2d_input_grad_direct(gy: &[f32], w: &[f32], g: &ConvGeom) -> Vec<f32> {
    let mut gx = vec![0f32; g.batch * g.in_c * g.in_plane()];
    for b in 0..g.batch {
        for o in 0..g.out_c {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let gv = gy[((b * g.out_c + o) * g.out_h + oy) * g.out_w + ox];
                    for c in 0..g.in_c {
                        for ky in 0..g.k {
                            let Some(iy) = g.src(oy, ky, g.in_h) else { continue };
                            for kx in 0..g.k {
                                let Some(ix) = g.src(ox, kx, g.in_w) else { continue };
                                gx[((b * g.in_c + c) * g.in_h + iy) * g.in_w + ix] +=
                                    gv * w[((o * g.in_c + c) * g.k + ky) * g.k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Reference adjoint of the convolution with respect to its kernel.
pub fn conv2d_weight_grad_direct(x: &[f32], gy: &[f32], g: &ConvGeom) -> Vec<f32> {
    let mut gw = vec![0f32; g.out_c * g.cols_rows()];
    for b in 0..g.batch {
        for o in 0..g.out_c {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let gv = gy[((b * g.out_c + o) * g.out_h + oy) * g.out_w + ox];
                    for c in 0..g.in_c {
                        for ky in 0..g.k {
                            let Some(iy) = g.src(oy, ky, g.in_h) else { continue };
                            for kx in 0..g.k {
                                let Some(ix) = g.src(ox, kx, g.in_w) else { continue };
                                gw[((o * g.in_c + c) * g.k + ky) * g.k + kx] +=
                                    gv * x[((b * g.in_c + c) * g.in_h + iy) * g.in_w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    gw
}

/// Row `r` of the unfolded matrix starts at `r·ld`.
fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32], ld: usize) {
    let n = g.out_plane();
    for c in 0..g.in_c {
        let plane = &x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut cols[((c * g.k + ky) * g.k + kx) * ld..][..n];
                for oy in 0..g.out_h {
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    match g.src(oy, ky, g.in_h) {
                        None => dst.fill(0.0),
                        Some(iy) => {
                            let src = &plane[iy * g.in_w..(iy + 1) * g.in_w];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = match g.src(ox, kx, g.in_w) {
                                    Some(ix) => src[ix],
                                    None => 0.0,
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &ConvGeom, x: &mut [f32], ld: usize) {
    let n = g.out_plane();
    for c in 0..g.in_c {
        let plane = &mut x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &cols[((c * g.k + ky) * g.k + kx) * ld..][..n];
                for oy in 0..g.out_h {
                    let Some(iy) = g.src(oy, ky, g.in_h) else { continue };
                    let src = &row[oy * g.out_w..(oy + 1) * g.out_w];
                    let dst = &mut plane[iy * g.in_w..(iy + 1) * g.in_w];
                    for (ox, v) in src.iter().enumerate() {
                        if let Some(ix) = g.src(ox, kx, g.in_w) {
                            dst[ix] += v;
                        }
                    }
                }
            }
        }
    }
}

/// [B, C, n] to [C, B·n].
fn batch_to_cols(x: &[f32], b: usize, c: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0f32; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            out[(ci * b + bi) * n..][..n].copy_from_slice(&x[(bi * c + ci) * n..][..n]);
        }
    }
    out
}

/// [C, B·n] to [B, C, n].
fn cols_to_batch(x: &[f32], b: usize, c: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0f32; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            out[(bi * c + ci) * n..][..n].copy_from_slice(&x[(ci * b + bi) * n..][..n]);
        }
    }
    out
}

/// The whole batch unfolded side by side: [in_c·k², B·out_plane].
fn batch_im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (r, n) = (g.cols_rows(), g.out_plane());
    let ld = g.batch * n;
    let mut cols = vec![0f32; r * ld];
    for b in 0..g.batch {
        let xb = &x[b * g.in_c * g.in_plane()..(b + 1) * g.in_c * g.in_plane()];
        im2col(xb, g, &mut cols[b * n..], ld);
    }
    cols
}

pub fn conv2d(x: &[f32], w: &[f32], g: &ConvGeom) -> Vec<f32> {
    if ConvAlgo::current() == ConvAlgo::Direct {
        return conv2d_direct(x, w, g);
    }
    let (r, n) = (g.cols_rows(), g.out_plane());
    let ld = g.batch * n;
    let cols = if g.pointwise() { batch_to_cols(x, g.batch, g.in_c, n) } else { batch_im2col(x, g) };
    let mut y = vec![0f32; g.out_c * ld];
    gemm_nn(g.out_c, r, ld, w, &cols, &mut y);
    cols_to_batch(&y, g.batch, g.out_c, n)
}

pub fn conv2d_input_grad(gy: &[f32], w: &[f32], g: &ConvGeom) -> Vec<f32> {
    if ConvAlgo::current() == ConvAlgo::Direct {
        return conv2d_input_grad_direct(gy, w, g);
    }
    let (r, n) = (g.cols_rows(), g.out_plane());
    let ld = g.batch * n;
    let gyc = batch_to_cols(gy, g.batch, g.out_c, n);
    let mut cols = vec![0f32; r * ld];
    gemm_tn(r, g.out_c, ld, w, &gyc, &mut cols);
    if g.pointwise() {
        return cols_to_batch(&cols, g.batch, g.in_c, n);
    }
    let mut gx = vec![0f32; g.batch * g.in_c * g.in_plane()];
    for b in 0..g.batch {
        let gxb = &mut gx[b * g.in_c * g.in_plane()..(b + 1) * g.in_c * g.in_plane()];
        col2im(&cols[b * n..], g, gxb, ld);
    }
    gx
}

pub fn conv2d_weight_grad(x: &[f32], gy: &[f32], g: &ConvGeom) -> Vec<f32> {
    if ConvAlgo::current() == ConvAlgo::Direct {
        return conv2d_weight_grad_direct(x, gy, g);
    }
    let (r, n) = (g.cols_rows(), g.out_plane());
    let ld = g.batch * n;
    let cols = if g.pointwise() { batch_to_cols(x, g.batch, g.in_c, n) } else { batch_im2col(x, g) };
    let gyc = batch_to_cols(gy, g.batch, g.out_c, n);
    let mut gw = vec![0f32; g.out_c * r];
    gemm_nt(g.out_c, ld, r, &gyc, &cols, &mut gw);
    gw
}

// ── pooling ─────────────────────────────────────────────────────────

/// Mean over non-overlapping k×k windows of the last two axes.
pub fn avg_pool(x: &[f32], planes: usize, h: usize, w: usize, k: usize) -> Vec<f32> {
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut y = vec![0f32; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0f64;
                for dy in 0..k {
                    let row = &src[(oy * k + dy) * w + ox * k..][..k];
                    acc += row.iter().map(|&v| v as f64).sum::<f64>();
                }
                y[(p * oh + oy) * ow + ox] = (acc * inv) as f32;
            }
        }
    }
    y
}

/// Adjoint of [`avg_pool`]: spreads each cell uniformly over its window.
pub fn avg_pool_adjoint(y: &[f32], planes: usize, oh: usize, ow: usize, k: usize) -> Vec<f32> {
    let (h, w) = (oh * k, ow * k);
    let inv = 1.0 / (k * k) as f32;
    let mut x = vec![0f32; planes * h * w];
    for p in 0..planes {
        for iy in 0..h {
            for ix in 0..w {
                x[(p * h + iy) * w + ix] = y[(p * oh + iy / k) * ow + ix / k] * inv;
            }
        }
    }
    x
}

// ── bilinear resampling ─────────────────────────────────────────────

/// Two-tap interpolation weights along one axis (align-corners false).
#[derive(Clone, Debug, PartialEq)]
pub struct AxisTaps {
    pub src_len: usize,
    pub taps: Vec<(usize, usize, f32)>,
}

impl AxisTaps {
    pub fn bilinear(src_len: usize, dst_len: usize) -> AxisTaps {
        let scale = src_len as f64 / dst_len as f64;
        let taps = (0..dst_len)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(src_len - 1);
                let i1 = (i0 + 1).min(src_len - 1);
                let frac = (s - i0 as f64) as f32;
                (i0, i1, if i0 == i1 { 0.0 } else { frac })
            })
            .collect();
        AxisTaps { src_len, taps }
    }
}

/// Separable bilinear map from (h, w) to (oh, ow) planes.
#[derive(Clone, Debug, PartialEq)]
pub struct BilinearMap {
    pub rows: AxisTaps,
    pub cols: AxisTaps,
}

impl BilinearMap {
    pub fn new(h: usize, w: usize, oh: usize, ow: usize) -> BilinearMap {
        BilinearMap {
            rows: AxisTaps::bilinear(h, oh),
            cols: AxisTaps::bilinear(w, ow),
        }
    }

    pub fn src_hw(&self) -> (usize, usize) {
        (self.rows.src_len, self.cols.src_len)
    }

    pub fn dst_hw(&self) -> (usize, usize) {
        (self.rows.taps.len(), self.cols.taps.len())
    }

    pub fn apply(&self, x: &[f32], planes: usize) -> Vec<f32> {
        let (h, w) = self.src_hw();
        let (oh, ow) = self.dst_hw();
        let mut y = vec![0f32; planes * oh * ow];
        for p in 0..planes {
            let src = &x[p * h * w..(p + 1) * h * w];
            for (oy, &(y0, y1, fy)) in self.rows.taps.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in self.cols.taps.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    y[(p * oh + oy) * ow + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        y
    }

    pub fn apply_adjoint(&self, g: &[f32], planes: usize) -> Vec<f32> {
        let (h, w) = self.src_hw();
        let (oh, ow) = self.dst_hw();
        let mut x = vec![0f32; planes * h * w];
        for p in 0..planes {
            let dst = &mut x[p * h * w..(p + 1) * h * w];
            for (oy, &(y0, y1, fy)) in self.rows.taps.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in self.cols.taps.iter().enumerate() {
                    let v = g[(p * oh + oy) * ow + ox];
                    let vt = v * (1.0 - fy);
                    let vb = v * fy;
                    dst[y0 * w + x0] += vt * (1.0 - fx);
                    dst[y0 * w + x1] += vt * fx;
                    dst[y1 * w + x0] += vb * (1.0 - fx);
                    dst[y1 * w + x1] += vb * fx;
                }
            }
        }
        x
    }
}

// ── layout helpers ──────────────────────────────────────────────────

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Axis runs of a broadcast, outermost first: (length, broadcast?, stride
/// in `small`). Adjacent axes of the same kind are merged and unit axes dropped.
fn broadcast_runs(big: &[usize], small: &[usize]) -> Vec<(usize, bool, usize)> {
    let mut runs: Vec<(usize, bool, usize)> = Vec::new();
    for (&b, &s) in big.iter().zip(small) {
        if b == 1 {
            continue;
        }
        let bc = s == 1;
        match runs.last_mut() {
            Some(r) if r.1 == bc => r.0 *= b,
            _ => runs.push((b, bc, 0)),
        }
    }
    let mut stride = 1;
    for r in runs.iter_mut().rev() {
        if !r.1 {
            r.2 = stride;
            stride *= r.0;
        }
    }
    if runs.is_empty() {
        runs.push((1, false, 1));
    }
    runs
}

fn expand_rec(x: &[f32], runs: &[(usize, bool, usize)], off: usize, out: &mut Vec<f32>) {
    let (len, bc, stride) = runs[0];
    if runs.len() == 1 {
        if bc {
            out.extend(std::iter::repeat_n(x[off], len));
        } else {
            out.extend_from_slice(&x[off..off + len]);
        }
        return;
    }
    for i in 0..len {
        expand_rec(x, &runs[1..], if bc { off } else { off + i * stride }, out);
    }
}

fn sum_rec(x: &[f32], pos: &mut usize, runs: &[(usize, bool, usize)], off: usize, acc: &mut [f64]) {
    let (len, bc, stride) = runs[0];
    if runs.len() == 1 {
        let src = &x[*pos..*pos + len];
        if bc {
            acc[off] += src.iter().map(|&v| v as f64).sum::<f64>();
        } else {
            for (a, &v) in acc[off..off + len].iter_mut().zip(src) {
                *a += v as f64;
            }
        }
        *pos += len;
        return;
    }
    for i in 0..len {
        sum_rec(x, pos, &runs[1..], if bc { off } else { off + i * stride }, acc);
    }
}

/// Sums `x` (shape `big`) into shape `small`, accumulating in f64.
pub fn sum_to(x: &[f32], big: &[usize], small: &[usize]) -> Vec<f32> {
    let n_small: usize = small.iter().product();
    if n_small == 1 {
        return vec![x.iter().map(|&v| v as f64).sum::<f64>() as f32];
    }
    let mut acc = vec![0f64; n_small];
    let mut pos = 0;
    sum_rec(x, &mut pos, &broadcast_runs(big, small), 0, &mut acc);
    acc.into_iter().map(|v| v as f32).collect()
}

pub fn expand(x: &[f32], small: &[usize], big: &[usize]) -> Vec<f32> {
    if x.len() == 1 {
        return vec![x[0]; big.iter().product()];
    }
    let mut out = Vec::with_capacity(big.iter().product());
    expand_rec(x, &broadcast_runs(big, small), 0, &mut out);
    out
}

pub fn permute(x: &[f32], shape: &[usize], perm: &[usize]) -> Vec<f32> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = x.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(x[off]);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}
