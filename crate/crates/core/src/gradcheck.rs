//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::Rng;

use crate::tensor::{no_grad, with_kink_monitor, Tensor};
use crate::Result;

/// Outcome of comparing analytic and numerical gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a ReLU kink.
    pub skipped: usize,
}

impl FdReport {
    pub fn merge(&mut self, other: &FdReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

pub const FD_EPS: f32 = 1e-3;

/// Relative error between an analytic and a numerical derivative, with the
/// denominator floored at `floor`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks `loss_fn` at `inputs` by central differences.
///
/// `loss_fn` receives one tensor per input (tracked leaves for the analytic
/// pass, constants for the numerical passes) and must return a scalar.
/// At most `per_input` randomly chosen coordinates of each input are probed.
///
/// Errors are norm-wise: each difference is divided by the largest analytic
/// derivative magnitude (or its own, if larger). In f32 a central difference
/// at `eps = 1e-3` resolves a derivative only to about 1e-4 of the loss
/// scale, so per-coordinate ratios on near-zero derivatives are pure noise.
pub fn check<F, R>(inputs: &[Tensor], loss_fn: F, eps: f32, per_input: usize, rng: &mut R) -> Result<FdReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
    R: Rng,
{
    let vars: Vec<Tensor> = inputs.iter().map(|t| t.detach_var()).collect();
    let loss = loss_fn(&vars)?;
    let grads = loss.backward()?;
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .map(|v| grads.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; v.numel()]))
        .collect();
    let base: Vec<Tensor> = inputs.iter().map(|t| t.detach()).collect();
    let (_, base_fp) = with_kink_monitor(|| no_grad(|| loss_fn(&base)));

    let scale = analytic
        .iter()
        .flat_map(|g| g.iter())
        .fold(0f64, |m, &v| m.max(v.abs() as f64));
    let floor = scale.max(1e-12);

    let mut report = FdReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (ti, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let picks = sample(rng, n, per_input.min(n)).into_vec();
        for j in picks {
            let x0 = t.data()[j];
            let (xp, xm) = (x0 + eps, x0 - eps);
            let eval = |x: f32| -> Result<(f64, u64)> {
                let mut probe = base.clone();
                let mut d = t.to_vec();
                d[j] = x;
                probe[ti] = Tensor::new(d, t.shape())?;
                let (l, fp) = with_kink_monitor(|| no_grad(|| loss_fn(&probe)));
                Ok((l?.item()? as f64, fp))
            };
            let (lp, fp_p) = eval(xp)?;
            let (lm, fp_m) = eval(xm)?;
            if fp_p != base_fp || fp_m != base_fp {
                report.skipped += 1;
                continue;
            }
            // The realised step differs from 2·eps by f32 rounding.
            let numeric = (lp - lm) / (xp as f64 - xm as f64);
            let err = relative_error(analytic[ti][j] as f64, numeric, floor);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn detects_a_wrong_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::new(vec![0.3, -0.7, 1.1], &[3]).unwrap();
        // Tracked and constant passes disagree, as a broken backward rule would.
        let r = check(
            &[x],
            |v| {
                let f = if v[0].requires_grad() { 2.0 } else { 2.2 };
                Ok(v[0].square().scale(f).sum_all())
            },
            FD_EPS,
            3,
            &mut rng,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.05, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn skips_coordinates_across_relu_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::new(vec![0.0004, 0.5, -0.5], &[3]).unwrap();
        let r = check(&[x], |v| Ok(v[0].relu().sum_all()), FD_EPS, 3, &mut rng).unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.checked, 2);
        assert!(r.max_rel_error < 1e-6);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0, 0.0), 0.0);
        assert!((relative_error(1.0, 0.9, 0.0) - 0.1).abs() < 1e-12);
        assert!((relative_error(1e-6, 0.0, 1.0) - 1e-6).abs() < 1e-18);
    }
}
