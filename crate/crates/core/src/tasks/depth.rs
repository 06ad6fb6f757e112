//! Synthetic depth scenes and log-uniform depth binning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{par_map, sample_seeds, Label, Sample};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const D_MIN: f32 = 0.5;
pub const D_MAX: f32 = 10.0;
pub const DEFAULT_BINS: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ramp {
    /// Depth varies along x when true, along y otherwise.
    pub along_x: bool,
    pub near: f32,
    pub far: f32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sphere {
    pub cx: f32,
    pub cy: f32,
    pub radius: f32,
    /// Depth of the sphere's centre plane.
    pub depth: f32,
    pub albedo: [f32; 3],
}

/// World units of depth per pixel of sphere bulge.
const BULGE: f32 = 0.12;
const LIGHT: [f32; 3] = [-0.4, -0.5, 0.77];

#[derive(Clone, Debug, PartialEq)]
pub struct DepthScene {
    pub ramp: Ramp,
    pub floor_albedo: [f32; 3],
    pub spheres: Vec<Sphere>,
}

impl DepthScene {
    pub fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> DepthScene {
        let near = rng.gen_range(1.0..3.0);
        let ramp = Ramp {
            along_x: rng.gen_bool(0.5),
            near,
            far: rng.gen_range(near + 2.0..D_MAX),
        };
        let n = rng.gen_range(1..=3);
        let s = h.min(w) as f32 / 32.0;
        let spheres = (0..n)
            .map(|_| Sphere {
                cx: rng.gen_range(0.0..w as f32),
                cy: rng.gen_range(0.0..h as f32),
                radius: rng.gen_range(3.0..8.0) * s,
                depth: rng.gen_range(1.5..6.0),
                albedo: [rng.gen_range(0.4..1.0), rng.gen_range(0.4..1.0), rng.gen_range(0.4..1.0)],
            })
            .collect();
        DepthScene {
            ramp,
            floor_albedo: [rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0)],
            spheres,
        }
    }

    pub fn ramp_depth(&self, x: usize, y: usize, h: usize, w: usize) -> f32 {
        let (pos, len) = if self.ramp.along_x { (x, w) } else { (y, h) };
        let t = pos as f32 / (len - 1) as f32;
        self.ramp.near + (self.ramp.far - self.ramp.near) * t
    }

    /// Depth map and image, both row-major; the image is channel-major.
    pub fn render<R: Rng>(&self, h: usize, w: usize, rng: &mut R) -> (Vec<f32>, Vec<f32>) {
        let mut depth = vec![0.0f32; h * w];
        let mut img = vec![0.0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut d = self.ramp_depth(x, y, h, w);
                let mut albedo = self.floor_albedo;
                let mut lambert = 0.7;
                for s in &self.spheres {
                    let (dx, dy) = (x as f32 + 0.5 - s.cx, y as f32 + 0.5 - s.cy);
                    let r2 = s.radius * s.radius - dx * dx - dy * dy;
                    if r2 <= 0.0 {
                        continue;
                    }
                    let dz = r2.sqrt();
                    let ds = s.depth - BULGE * dz;
                    if ds < d {
                        d = ds;
                        albedo = s.albedo;
                        let n = [dx / s.radius, dy / s.radius, dz / s.radius];
                        lambert = (n[0] * LIGHT[0] + n[1] * LIGHT[1] + n[2] * LIGHT[2]).max(0.0);
                    }
                }
                let d = d.clamp(D_MIN, D_MAX);
                depth[y * w + x] = d;
                let fog = (-(d - D_MIN) / 6.0).exp();
                for c in 0..3 {
                    let v = albedo[c] * (0.3 + 0.7 * lambert) * fog + rng.gen_range(-0.02..0.02);
                    img[(c * h + y) * w + x] = v.clamp(0.0, 1.0);
                }
            }
        }
        (depth, img)
    }
}

pub fn gen_depth(seed: u64, n: usize, h: usize, w: usize) -> Result<Vec<Sample>> {
    if h < 16 || w < 16 {
        return Err(Error::InvalidArgument(format!("images must be at least 16×16, got {h}×{w}")));
    }
    par_map(&sample_seeds(seed, n), |&s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let scene = DepthScene::random(&mut rng, h, w);
        let (depth, img) = scene.render(h, w, &mut rng);
        Ok(Sample {
            image: Tensor::new(img, &[3, h, w])?,
            label: Label::Depth(depth),
            labeled: true,
        })
    })
}

/// Bins uniform in log-depth; centres are the arithmetic midpoints of the edges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthBinning {
    pub edges: Vec<f32>,
    pub centers: Vec<f32>,
}

impl DepthBinning {
    pub fn log_uniform(bins: usize, d_min: f32, d_max: f32) -> Result<DepthBinning> {
        if bins == 0 || !(d_min > 0.0) || !(d_max > d_min) {
            return Err(Error::InvalidArgument(format!("bad binning: {bins} bins over [{d_min}, {d_max}]")));
        }
        let (lo, hi) = ((d_min as f64).ln(), (d_max as f64).ln());
        let mut edges: Vec<f32> = (0..=bins).map(|k| (lo + (hi - lo) * k as f64 / bins as f64).exp() as f32).collect();
        edges[0] = d_min;
        edges[bins] = d_max;
        let centers = edges.windows(2).map(|e| 0.5 * (e[0] + e[1])).collect();
        Ok(DepthBinning { edges, centers })
    }

    pub fn bins(&self) -> usize {
        self.centers.len()
    }

    pub fn half_width(&self, k: usize) -> f32 {
        0.5 * (self.edges[k + 1] - self.edges[k])
    }

    /// Containing bin and whether `d` had to be clamped into range.
    pub fn bin_of(&self, d: f32) -> (usize, bool) {
        let last = self.bins() - 1;
        if !(d >= self.edges[0]) {
            return (0, true);
        }
        if d >= self.edges[last + 1] {
            return (last, d > self.edges[last + 1]);
        }
        (self.edges.partition_point(|&e| e <= d) - 1, false)
    }

    /// Bin index per pixel; out-of-range depths are clamped and counted.
    pub fn depth_to_bins(&self, depth: &[f32]) -> (Vec<usize>, usize) {
        let mut clamped = 0;
        let bins = depth
            .iter()
            .map(|&d| {
                let (k, c) = self.bin_of(d);
                clamped += c as usize;
                k
            })
            .collect();
        if clamped > 0 {
            log::warn!("{clamped} depth values outside [{}, {}] were clamped", self.edges[0], self.edges[self.bins()]);
        }
        (bins, clamped)
    }

    /// Soft weighted sum Σ_c p_c·center_c over the class axis: [B,C,H,W] → [B,1,H,W].
    pub fn bins_to_depth(&self, probs: &Tensor) -> Result<Tensor> {
        if probs.rank() != 4 || probs.shape()[1] != self.bins() {
            return Err(Error::shape("bins_to_depth", probs.shape(), &[0, self.bins(), 0, 0]));
        }
        let c = Tensor::new(self.centers.clone(), &[1, self.bins(), 1, 1])?.expand(probs.shape())?;
        probs.mul(&c)?.sum_keepdim(&[1])
    }
}
