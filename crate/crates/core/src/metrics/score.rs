use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::nets::Network;
use crate::tensor::{no_grad, BatchNormMode, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub counts: Vec<u64>,
}

/// Several score series counted over the same fixed bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
    pub series: Vec<Series>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Result<Histogram> {
        if bins == 0 || !(hi > lo) {
            return Err(Error::InvalidArgument(format!(
                "histogram needs bins > 0 and hi > lo, got {bins} over [{lo}, {hi}]"
            )));
        }
        Ok(Histogram {
            lo,
            hi,
            bins,
            series: Vec::new(),
        })
    }

    /// Bins spanning every value given, padded when they are all equal.
    pub fn spanning(values: &[f64], bins: usize) -> Result<Histogram> {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Empty("no finite scores to bin".into()));
        }
        let pad = if hi > lo { 0.0 } else { 0.5 };
        Histogram::new(lo - pad, hi + pad, bins)
    }

    /// Values outside [lo, hi] land in the end bins.
    pub fn add(&mut self, name: &str, values: &[f64]) {
        let mut counts = vec![0u64; self.bins];
        let width = (self.hi - self.lo) / self.bins as f64;
        for &v in values {
            let k = ((v - self.lo) / width).floor();
            let k = if k.is_nan() { 0 } else { (k.max(0.0) as usize).min(self.bins - 1) };
            counts[k] += 1;
        }
        self.series.push(Series {
            name: name.to_string(),
            counts,
        });
    }

    pub fn edges(&self) -> Vec<f64> {
        (0..=self.bins).map(|k| self.lo + (self.hi - self.lo) * k as f64 / self.bins as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub mean_score_teacher: f64,
    pub mean_score_student: f64,
    /// Teacher mean minus student mean.
    pub score_difference: f64,
    pub histogram: Histogram,
}

fn scores(d: &mut Network, qs: &[Tensor], images: &[Tensor]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (q, img) in qs.iter().zip(images) {
        let s = no_grad(|| d.forward_discriminator(q, img, BatchNormMode::Eval))?;
        out.extend(s.data().iter().map(|&v| v as f64));
    }
    Ok(out)
}

/// Scores both sets of maps with an eval-mode discriminator. Each slice
/// element is one batch; the three slices are aligned.
pub fn score_analysis(d: &mut Network, teacher_q: &[Tensor], student_q: &[Tensor], images: &[Tensor], bins: usize) -> Result<ScoreStats> {
    if teacher_q.is_empty() || student_q.is_empty() {
        return Err(Error::Empty("score analysis needs teacher and student maps".into()));
    }
    if teacher_q.len() != images.len() || student_q.len() != images.len() {
        return Err(Error::InvalidArgument("teacher maps, student maps and images must align".into()));
    }
    let t = scores(d, teacher_q, images)?;
    let s = scores(d, student_q, images)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let all: Vec<f64> = t.iter().chain(&s).copied().collect();
    let mut histogram = Histogram::spanning(&all, bins)?;
    histogram.add("teacher", &t);
    histogram.add("student", &s);
    let (mt, ms) = (mean(&t), mean(&s));
    Ok(ScoreStats {
        mean_score_teacher: mt,
        mean_score_student: ms,
        score_difference: mt - ms,
        histogram,
    })
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Overlaid translucent bar series with a legend.
pub fn histogram_svg(h: &Histogram, title: &str) -> String {
    let (w, ht, m) = (640.0, 360.0, 40.0);
    let max = h.series.iter().flat_map(|s| s.counts.iter()).copied().max().unwrap_or(0).max(1) as f64;
    let bw = (w - 2.0 * m) / h.bins as f64;
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{ht}" viewBox="0 0 {w} {ht}">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#, w / 2.0, escape(title));
    for (si, s) in h.series.iter().enumerate() {
        let colour = PALETTE[si % PALETTE.len()];
        for (k, &c) in s.counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let bh = (ht - 2.0 * m) * c as f64 / max;
            let _ = writeln!(
                svg,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{colour}" fill-opacity="0.5"/>"#,
                m + k as f64 * bw,
                ht - m - bh,
                bw,
                bh
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{colour}" font-family="sans-serif" font-size="12">{}</text>"#,
            w - m - 120.0,
            m + 16.0 * si as f64,
            escape(&s.name)
        );
    }
    let _ = writeln!(svg, r#"<line x1="{m}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#, ht - m, w - m);
    for (x, v) in [(m, h.lo), (w - m, h.hi)] {
        let _ = writeln!(svg, r#"<text x="{x}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{v:.3}</text>"#, ht - m + 16.0);
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::NetworkSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new((0..n).map(|_| rng.gen_range(0.0f32..1.0)).collect(), shape).unwrap()
    }

    #[test]
    fn identical_sets_have_zero_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut d = Network::build(&NetworkSpec::discriminator(2, 4, 5).unwrap(), 0).unwrap();
        let q: Vec<Tensor> = (0..2).map(|_| rand_t(&mut rng, &[3, 2, 32, 32])).collect();
        let img: Vec<Tensor> = (0..2).map(|_| rand_t(&mut rng, &[3, 3, 32, 32])).collect();
        let st = score_analysis(&mut d, &q, &q, &img, 10).unwrap();
        assert_eq!(st.score_difference, 0.0);
        for s in &st.histogram.series {
            assert_eq!(s.counts.iter().sum::<u64>(), 6);
        }
        assert!(score_analysis(&mut d, &[], &[], &[], 10).is_err());
    }

    #[test]
    fn histogram_counts_and_svg() {
        let mut h = Histogram::new(0.0, 1.0, 4).unwrap();
        h.add("a", &[0.0, 0.1, 0.3, 0.99, 1.0, 7.0, -3.0]);
        assert_eq!(h.series[0].counts, vec![3, 1, 0, 3]);
        assert_eq!(h.edges(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        let svg = histogram_svg(&h, "scores <test>");
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("&lt;test&gt;"));
        assert!(Histogram::new(1.0, 1.0, 3).is_err());
        let flat = Histogram::spanning(&[2.0, 2.0], 3).unwrap();
        assert!(flat.hi > flat.lo);
    }
}
