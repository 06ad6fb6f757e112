//! Segmentation and depth metrics plus discriminator score analysis.

mod score;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use score::{histogram_svg, score_analysis, Histogram, ScoreStats};

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn update(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("segmentation_metrics", &[pred.len()], &[gt.len()]));
        }
        if let Some(&bad) = pred.iter().chain(gt).find(|&&c| c >= self.classes) {
            return Err(Error::InvalidArgument(format!("class {bad} outside 0..{}", self.classes)));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("ConfusionMatrix::merge", &[self.classes], &[other.classes]));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn finalize(&self) -> Result<SegmentationMetrics> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Empty("no pixels were evaluated".into()));
        }
        let c = self.classes;
        let at = |g: usize, p: usize| self.counts[g * c + p];
        let per_class_iou: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = at(k, k);
                let fn_: u64 = (0..c).map(|p| at(k, p)).sum::<u64>() - tp;
                let fp: u64 = (0..c).map(|g| at(g, k)).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let miou = present.iter().sum::<f64>() / present.len() as f64;
        let correct: u64 = (0..c).map(|k| at(k, k)).sum();
        Ok(SegmentationMetrics {
            per_class_iou,
            miou,
            pixel_accuracy: correct as f64 / total as f64,
        })
    }
}

pub fn segmentation_metrics(pred: &[usize], gt: &[usize], classes: usize) -> Result<SegmentationMetrics> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.update(pred, gt)?;
    cm.finalize()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub rel: f64,
    pub log10: f64,
    pub rms: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

/// Mergeable running sums behind [`DepthMetrics`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthAccumulator {
    pub pixels: u64,
    pub abs_rel: f64,
    pub abs_log10: f64,
    pub sq: f64,
    pub within: [u64; 3],
}

impl DepthAccumulator {
    pub fn update(&mut self, pred: &[f32], gt: &[f32]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("depth_metrics", &[pred.len()], &[gt.len()]));
        }
        if pred.iter().chain(gt).any(|&v| !(v > 0.0)) {
            return Err(Error::Domain {
                op: "depth_metrics",
                msg: "depths must be positive".into(),
            });
        }
        for (&p, &g) in pred.iter().zip(gt) {
            let (p, g) = (p as f64, g as f64);
            self.abs_rel += (p - g).abs() / g;
            self.abs_log10 += (p.log10() - g.log10()).abs();
            self.sq += (p - g).powi(2);
            let ratio = (p / g).max(g / p);
            for (i, n) in self.within.iter_mut().enumerate() {
                if ratio < 1.25f64.powi(i as i32 + 1) {
                    *n += 1;
                }
            }
        }
        self.pixels += pred.len() as u64;
        Ok(())
    }

    pub fn merge(&mut self, o: &DepthAccumulator) {
        self.pixels += o.pixels;
        self.abs_rel += o.abs_rel;
        self.abs_log10 += o.abs_log10;
        self.sq += o.sq;
        for (a, b) in self.within.iter_mut().zip(o.within) {
            *a += b;
        }
    }

    pub fn finalize(&self) -> Result<DepthMetrics> {
        if self.pixels == 0 {
            return Err(Error::Empty("no pixels were evaluated".into()));
        }
        let n = self.pixels as f64;
        Ok(DepthMetrics {
            rel: self.abs_rel / n,
            log10: self.abs_log10 / n,
            rms: (self.sq / n).sqrt(),
            delta1: self.within[0] as f64 / n,
            delta2: self.within[1] as f64 / n,
            delta3: self.within[2] as f64 / n,
        })
    }
}

pub fn depth_metrics(pred: &[f32], gt: &[f32]) -> Result<DepthMetrics> {
    let mut acc = DepthAccumulator::default();
    acc.update(pred, gt)?;
    acc.finalize()
}

/// Everything an evaluation reports; sections absent for the other task are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub segmentation: Option<SegmentationMetrics>,
    pub depth: Option<DepthMetrics>,
    pub scores: Option<ScoreStats>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction() {
        let gt = [0, 1, 2, 2, 1, 0];
        let m = segmentation_metrics(&gt, &gt, 4).unwrap();
        assert_eq!((m.miou, m.pixel_accuracy), (1.0, 1.0));
        assert_eq!(m.per_class_iou[3], None);
    }

    #[test]
    fn hand_counted_two_by_two() {
        let m = segmentation_metrics(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!((m.per_class_iou[0].unwrap() - 0.5).abs() < 1e-12);
        assert!((m.per_class_iou[1].unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.miou - 7.0 / 12.0).abs() < 1e-12);
        assert_eq!(m.pixel_accuracy, 0.75);
    }

    #[test]
    fn predicted_only_classes_count_in_the_mean() {
        // Class 2 never occurs in gt but is predicted: its IoU is 0 and it counts.
        let m = segmentation_metrics(&[0, 2], &[0, 0], 3).unwrap();
        assert_eq!(m.per_class_iou, vec![Some(0.5), None, Some(0.0)]);
        assert_eq!(m.miou, 0.25);
    }

    #[test]
    fn errors() {
        assert!(segmentation_metrics(&[0], &[0, 1], 2).is_err());
        assert!(segmentation_metrics(&[3], &[0], 2).is_err());
        assert!(ConfusionMatrix::new(2).finalize().is_err());
        assert!(depth_metrics(&[1.0], &[0.0]).is_err());
        assert!(depth_metrics(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn depth_examples() {
        let gt = [1.0, 2.0, 3.5];
        let m = depth_metrics(&gt, &gt).unwrap();
        assert_eq!((m.rel, m.log10, m.rms), (0.0, 0.0, 0.0));
        assert_eq!((m.delta1, m.delta2, m.delta3), (1.0, 1.0, 1.0));
        let m = depth_metrics(&[1.25, 2.5, 5.0], &[1.0, 2.0, 4.0]).unwrap();
        assert_eq!((m.delta1, m.delta2), (0.0, 1.0));
        let m = depth_metrics(&[2.0], &[1.0]).unwrap();
        assert!((m.rel - 1.0).abs() < 1e-12 && (m.rms - 1.0).abs() < 1e-12);
        assert!((m.log10 - 2f64.log10()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn sharded_accumulation_matches_single_pass(
            pairs in prop::collection::vec((0usize..4, 0usize..4), 1..200),
            cut in 0usize..200,
        ) {
            let (pred, gt): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            let cut = cut.min(pred.len());
            let mut whole = ConfusionMatrix::new(4);
            whole.update(&pred, &gt).unwrap();
            let mut a = ConfusionMatrix::new(4);
            a.update(&pred[..cut], &gt[..cut]).unwrap();
            let mut b = ConfusionMatrix::new(4);
            b.update(&pred[cut..], &gt[cut..]).unwrap();
            a.merge(&b).unwrap();
            prop_assert_eq!(&a, &whole);
            let m = whole.finalize().unwrap();
            prop_assert!((0.0..=1.0).contains(&m.miou) && (0.0..=1.0).contains(&m.pixel_accuracy));
        }

        #[test]
        fn relabeling_is_harmless(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..100), rot in 0usize..3) {
            let (pred, gt): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            let r = |v: &[usize]| v.iter().map(|c| (c + rot) % 3).collect::<Vec<_>>();
            let a = segmentation_metrics(&pred, &gt, 3).unwrap();
            let b = segmentation_metrics(&r(&pred), &r(&gt), 3).unwrap();
            prop_assert!((a.miou - b.miou).abs() < 1e-12);
            prop_assert_eq!(a.pixel_accuracy, b.pixel_accuracy);
        }

        #[test]
        fn moving_pred_away_never_lowers_rel(gt in prop::collection::vec(0.5f32..10.0, 1..50), k1 in 1.0f32..3.0, dk in 0.0f32..3.0) {
            let away = |k: f32| gt.iter().map(|g| g * k).collect::<Vec<_>>();
            let a = depth_metrics(&away(k1), &gt).unwrap();
            let b = depth_metrics(&away(k1 + dk), &gt).unwrap();
            prop_assert!(b.rel >= a.rel - 1e-9);
        }
    }
}
