use rand::Rng;

use crate::nets::Network;
use crate::tensor::{no_grad, with_grad, BatchNormMode, Tensor};
use crate::{Error, Result};

const GP_EPS: f32 = 1e-12;

/// E[(‖∇_x̂ score(x̂)‖₂ − 1)²] at x̂ = u·real + (1−u)·fake, one `u` per sample.
pub fn gradient_penalty<F>(mut score: F, real: &Tensor, fake: &Tensor, u: &[f32]) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    if real.shape() != fake.shape() || real.rank() != 4 {
        return Err(Error::shape("gradient_penalty", real.shape(), fake.shape()));
    }
    let b = real.shape()[0];
    if u.len() != b {
        return Err(Error::InvalidArgument(format!("{} interpolation weights for a batch of {b}", u.len())));
    }
    let x_hat = no_grad(|| -> Result<Tensor> {
        let u = Tensor::new(u.to_vec(), &[b, 1, 1, 1])?.expand(real.shape())?;
        real.mul(&u)?.add(&fake.mul(&u.neg().add_scalar(1.0))?)
    })?
    .detach_var();
    // The penalty is itself a gradient, so the graph is recorded even under `no_grad`.
    with_grad(|| {
        let s = score(&x_hat)?;
        let g = match s.sum_all().grad_with_graph(&[&x_hat])?.remove(0) {
            Some(g) => g,
            None => Tensor::zeros(x_hat.shape()),
        };
        let norm = g.square().sum_keepdim(&[1, 2, 3])?.add_scalar(GP_EPS).sqrt()?;
        Ok(norm.add_scalar(-1.0).square().mean_all())
    })
}

/// The discriminator objective and its parts.
#[derive(Clone, Debug)]
pub struct HolisticD {
    pub loss: Tensor,
    /// E[D(q_s)] − E[D(q_t)].
    pub wasserstein: f32,
    pub gp: f32,
}

/// E[D(q_s|I)] − E[D(q_t|I)] + gp_coeff·GP. Both score maps are constants here.
pub fn holistic_d_loss<R: Rng>(
    d: &mut Network,
    q_s: &Tensor,
    q_t: &Tensor,
    image: &Tensor,
    gp_coeff: f32,
    rng: &mut R,
) -> Result<HolisticD> {
    let (q_s, q_t) = (q_s.detach(), q_t.detach());
    let fake = d.forward_discriminator(&q_s, image, BatchNormMode::Train)?.mean_all();
    let real = d.forward_discriminator(&q_t, image, BatchNormMode::Train)?.mean_all();
    let wasserstein = fake.sub(&real)?;
    let u: Vec<f32> = (0..q_s.shape()[0]).map(|_| rng.gen::<f32>()).collect();
    let gp = gradient_penalty(|x| d.forward_discriminator(x, image, BatchNormMode::Train), &q_t, &q_s, &u)?;
    let loss = wasserstein.add(&gp.scale(gp_coeff))?;
    Ok(HolisticD {
        wasserstein: wasserstein.item()?,
        gp: gp.item()?,
        loss,
    })
}

/// E[D(q_s|I)], the score the student tries to raise. Differentiate it with
/// `backward_wrt` on the student's parameters so D is left untouched.
pub fn holistic_s_term(d: &mut Network, q_s: &Tensor, image: &Tensor) -> Result<Tensor> {
    Ok(d.forward_discriminator(q_s, image, BatchNormMode::Train)?.mean_all())
}
