//! Synthetic segmentation scenes: shapes of distinct classes over a
//! textured background. Colours are random, so the class of a pixel is
//! only recoverable from the geometry around it.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{par_map, sample_seeds, Label, Sample};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rect,
    Disc,
    HBar,
    VBar,
    Ring,
}

const KINDS: [ShapeKind; 5] = [ShapeKind::Rect, ShapeKind::Disc, ShapeKind::HBar, ShapeKind::VBar, ShapeKind::Ring];

/// Foreground class `c ≥ 1` is drawn as this kind; classes past five reuse
/// the kinds at a smaller scale.
pub fn kind_of(class: usize) -> (ShapeKind, f32) {
    let k = class - 1;
    (KINDS[k % KINDS.len()], 1.0 / (1 + k / KINDS.len()) as f32)
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    class: usize,
    kind: ShapeKind,
    cx: f32,
    cy: f32,
    /// Half extents (rect, bars) or outer radius (disc, ring) in pixels.
    a: f32,
    b: f32,
    colour: [f32; 3],
}

impl Shape {
    fn contains(&self, x: f32, y: f32) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.kind {
            ShapeKind::Rect | ShapeKind::HBar | ShapeKind::VBar => dx.abs() <= self.a && dy.abs() <= self.b,
            ShapeKind::Disc => dx * dx + dy * dy <= self.a * self.a,
            ShapeKind::Ring => {
                let r2 = dx * dx + dy * dy;
                r2 <= self.a * self.a && r2 >= self.b * self.b
            }
        }
    }
}

fn random_shape(rng: &mut ChaCha8Rng, class: usize, h: usize, w: usize) -> Shape {
    let (kind, scale) = kind_of(class);
    let s = h.min(w) as f32 / 32.0 * scale;
    let (a, b) = match kind {
        ShapeKind::Rect => (rng.gen_range(4.0..7.0) * s, rng.gen_range(4.0..7.0) * s),
        ShapeKind::Disc => (rng.gen_range(4.0..7.5) * s, 0.0),
        ShapeKind::HBar => (rng.gen_range(8.0..13.0) * s, rng.gen_range(1.5..2.5) * s),
        ShapeKind::VBar => (rng.gen_range(1.5..2.5) * s, rng.gen_range(8.0..13.0) * s),
        ShapeKind::Ring => {
            let r = rng.gen_range(5.5..8.5) * s;
            (r, r * rng.gen_range(0.45..0.6))
        }
    };
    let round = matches!(kind, ShapeKind::Disc | ShapeKind::Ring);
    let margin_x = a.min(w as f32 / 2.0 - 1.0);
    let margin_y = (if round { a } else { b }).min(h as f32 / 2.0 - 1.0);
    Shape {
        class,
        kind,
        cx: rng.gen_range(margin_x..w as f32 - margin_x),
        cy: rng.gen_range(margin_y..h as f32 - margin_y),
        a,
        b,
        colour: [rng.gen(), rng.gen(), rng.gen()],
    }
}

const SUPERSAMPLE: usize = 4;

fn render(rng: &mut ChaCha8Rng, h: usize, w: usize, shapes: &[Shape]) -> (Vec<f32>, Vec<usize>) {
    let base: [f32; 3] = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
    // The range is part of the data definition; TAU would shift every sample.
    #[allow(clippy::approx_constant)]
    let (fx, fy, phase) = (rng.gen_range(0.1..0.6), rng.gen_range(0.1..0.6), rng.gen_range(0.0..6.28));
    let mut img = vec![0.0f32; 3 * h * w];
    let mut label = vec![0usize; h * w];
    let n_sub = (SUPERSAMPLE * SUPERSAMPLE) as f32;
    for y in 0..h {
        for x in 0..w {
            let tex = 0.12 * ((x as f32 * fx + y as f32 * fy + phase).sin()) + rng.gen_range(-0.05..0.05);
            let bg: Vec<f32> = base.iter().map(|c| c + tex).collect();
            let mut acc = [0.0f32; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f32 + (sx as f32 + 0.5) / SUPERSAMPLE as f32;
                    let py = y as f32 + (sy as f32 + 0.5) / SUPERSAMPLE as f32;
                    let colour = shapes.iter().rev().find(|s| s.contains(px, py)).map(|s| &s.colour[..]).unwrap_or(&bg);
                    for c in 0..3 {
                        acc[c] += colour[c];
                    }
                }
            }
            for c in 0..3 {
                img[(c * h + y) * w + x] = (acc[c] / n_sub).clamp(0.0, 1.0);
            }
            let (cx, cy) = (x as f32 + 0.5, y as f32 + 0.5);
            label[y * w + x] = shapes.iter().rev().find(|s| s.contains(cx, cy)).map_or(0, |s| s.class);
        }
    }
    (img, label)
}

/// `n` segmentation samples; each holds 1..C−1 shapes of distinct classes.
pub fn gen_shapes(seed: u64, n: usize, h: usize, w: usize, classes: usize) -> Result<Vec<Sample>> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {classes}")));
    }
    if h < 16 || w < 16 {
        return Err(Error::InvalidArgument(format!("images must be at least 16×16, got {h}×{w}")));
    }
    par_map(&sample_seeds(seed, n), |&s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut fg: Vec<usize> = (1..classes).collect();
        fg.shuffle(&mut rng);
        let count = rng.gen_range(1..classes);
        let shapes: Vec<Shape> = fg[..count].iter().map(|&c| random_shape(&mut rng, c, h, w)).collect();
        let (img, label) = render(&mut rng, h, w, &shapes);
        Ok(Sample {
            image: Tensor::new(img, &[3, h, w])?,
            label: Label::Classes(label),
            labeled: true,
        })
    })
}
