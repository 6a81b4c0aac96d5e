//! The five training losses and their weighted combinations.
//!
//! Every function takes and returns candle tensors of any float dtype; the
//! returned loss is a rank-0 tensor so it can be back-propagated directly.
//! Logits cross module boundaries, never probabilities.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Generator GAN weight.
    pub lambda1: f64,
    /// Background preservation weight.
    pub lambda2: f64,
    /// Discriminator GAN weight.
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1e-3, lambda2: 1e-1, lambda3: 1e-2 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidRange(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(a.dims(), b.dims()));
    }
    Ok(())
}

/// `softplus(z) = log(1 + e^z)` as `max(z, 0) + log(1 + e^{min(z, 0) - max(z, 0)})`.
///
/// Built from `maximum`/`minimum` rather than `relu`/`abs` so the gradient at
/// exactly `z = 0` comes out as σ(0) = 1/2.
pub fn softplus(z: &Tensor) -> Result<Tensor> {
    let pos = z.maximum(0.0)?;
    let neg = z.minimum(0.0)?;
    let tail = (&neg - &pos)?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((pos + tail)?)
}

/// Mean squared error between the injected and the predicted noise.
pub fn real_diffusion_loss(eps_true: &Tensor, eps_pred: &Tensor) -> Result<Tensor> {
    same_shape(eps_true, eps_pred)?;
    Ok((eps_true - eps_pred)?.sqr()?.mean_all()?)
}

/// Same contract as [`real_diffusion_loss`]; the target is the fresh noise
/// used to build the fake noisy sample.
pub fn fake_diffusion_loss(eps_fresh: &Tensor, eps_pred_assistant: &Tensor) -> Result<Tensor> {
    real_diffusion_loss(eps_fresh, eps_pred_assistant)
}

/// Mean of `-log σ(logit)`.
pub fn generator_gan_loss(fake_logits: &Tensor) -> Result<Tensor> {
    Ok(softplus(&fake_logits.neg()?)?.mean_all()?)
}

/// Mean of `-log σ(real)` plus mean of `-log(1 - σ(fake))`.
pub fn discriminator_gan_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    let real = softplus(&real_logits.neg()?)?.mean_all()?;
    let fake = softplus(fake_logits)?.mean_all()?;
    Ok((real + fake)?)
}

/// Squared error on the background only, averaged over every element.
///
/// `hole_mask` is `(N, 1, H, W)` or anything broadcastable to the images; the
/// hole pixels contribute exactly zero.
pub fn background_loss(x0: &Tensor, x0_hat: &Tensor, hole_mask: &Tensor) -> Result<Tensor> {
    same_shape(x0, x0_hat)?;
    let keep = hole_mask.to_dtype(x0.dtype())?.affine(-1.0, 1.0)?;
    let diff = (x0 - x0_hat)?.broadcast_mul(&keep).map_err(|_| Error::shape(x0.dims(), hole_mask.dims()))?;
    Ok(diff.sqr()?.mean_all()?)
}

pub fn combine_generator(l_gan: &Tensor, l_bg: &Tensor, w: &LossWeights) -> Result<Tensor> {
    Ok((l_gan.affine(w.lambda1, 0.0)? + l_bg.affine(w.lambda2, 0.0)?)?)
}

pub fn combine_discriminator(l_fake_diff: &Tensor, l_d: &Tensor, w: &LossWeights) -> Result<Tensor> {
    Ok((l_fake_diff + l_d.affine(w.lambda3, 0.0)?)?)
}

/// Reads a rank-0 loss as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use std::f64::consts::LN_2;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn s(x: f64) -> Tensor {
        Tensor::new(x, &Device::Cpu).unwrap()
    }

    #[test]
    fn gan_closed_forms() {
        assert!((scalar(&generator_gan_loss(&t(&[0.0])).unwrap()).unwrap() - LN_2).abs() < 1e-12);
        let third = (1.0f64 / 3.0).ln();
        let v = scalar(&generator_gan_loss(&t(&[third])).unwrap()).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
        let d = scalar(&discriminator_gan_loss(&t(&[0.0, 0.0]), &t(&[0.0, 0.0])).unwrap()).unwrap();
        assert!((d - 2.0 * LN_2).abs() < 1e-12);
        let d = scalar(&discriminator_gan_loss(&t(&[0.0]), &t(&[third])).unwrap()).unwrap();
        assert!((d - (LN_2 + (4.0f64 / 3.0).ln())).abs() < 1e-12);
        assert!((d - 0.9808).abs() < 1e-4);
    }

    #[test]
    fn gan_limits_are_finite() {
        let big = t(&[f64::INFINITY, 1e300]);
        assert_eq!(scalar(&generator_gan_loss(&big).unwrap()).unwrap(), 0.0);
        let d = scalar(&discriminator_gan_loss(&big, &big.neg().unwrap()).unwrap()).unwrap();
        assert_eq!(d, 0.0);
        let large = scalar(&generator_gan_loss(&t(&[-800.0])).unwrap()).unwrap();
        assert!((large - 800.0).abs() < 1e-9);
        let f32_extreme = Tensor::new(&[-1e30f32, 1e30], &Device::Cpu).unwrap();
        assert!(scalar(&generator_gan_loss(&f32_extreme).unwrap()).unwrap().is_finite());
    }

    #[test]
    fn gan_monotonicity() {
        let grid: Vec<f64> = (-20..=20).map(|i| i as f64 * 0.5).collect();
        let g: Vec<f64> = grid.iter().map(|&z| scalar(&generator_gan_loss(&t(&[z])).unwrap()).unwrap()).collect();
        assert!(g.windows(2).all(|w| w[1] < w[0]));
        let real: Vec<f64> =
            grid.iter().map(|&z| scalar(&discriminator_gan_loss(&t(&[z]), &t(&[0.0])).unwrap()).unwrap()).collect();
        assert!(real.windows(2).all(|w| w[1] < w[0]));
        let fake: Vec<f64> =
            grid.iter().map(|&z| scalar(&discriminator_gan_loss(&t(&[0.0]), &t(&[z])).unwrap()).unwrap()).collect();
        assert!(fake.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn diffusion_losses() {
        let e = t(&[0.3, -1.2, 2.0, 0.0]);
        assert_eq!(scalar(&real_diffusion_loss(&e, &e).unwrap()).unwrap(), 0.0);
        let shifted = e.affine(1.0, 0.25).unwrap();
        assert!((scalar(&real_diffusion_loss(&e, &shifted).unwrap()).unwrap() - 0.0625).abs() < 1e-15);
        let p = t(&[1.0, 0.0, -0.5, 0.7]);
        let a = scalar(&fake_diffusion_loss(&e, &p).unwrap()).unwrap();
        let b = scalar(&fake_diffusion_loss(&e.neg().unwrap(), &p.neg().unwrap()).unwrap()).unwrap();
        assert_eq!(a, b);
        assert!(real_diffusion_loss(&e, &t(&[1.0])).is_err());
    }

    #[test]
    fn background_loss_fixture() {
        // 4x4, background fraction 12/16, constant difference 0.5
        let mut hole = vec![0.0f64; 16];
        for i in [5, 6, 9, 10] {
            hole[i] = 1.0;
        }
        let hole = Tensor::from_vec(hole, (1, 1, 4, 4), &Device::Cpu).unwrap();
        let x0 = Tensor::zeros((1, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let x0_hat = x0.affine(1.0, 0.5).unwrap();
        let v = scalar(&background_loss(&x0, &x0_hat, &hole).unwrap()).unwrap();
        assert!((v - 0.75 * 0.25).abs() < 1e-15);
        assert_eq!(scalar(&background_loss(&x0, &x0, &hole).unwrap()).unwrap(), 0.0);
        let inside = hole.broadcast_as((1, 3, 4, 4)).unwrap().affine(7.0, 0.0).unwrap();
        assert_eq!(scalar(&background_loss(&x0, &inside, &hole).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn combinations() {
        let w = LossWeights::default();
        let g = scalar(&combine_generator(&s(LN_2), &s(0.0), &w).unwrap()).unwrap();
        assert!((g - 1e-3 * LN_2).abs() < 1e-15);
        assert!((g - 6.931e-4).abs() < 1e-7);
        let d = scalar(&combine_discriminator(&s(0.0), &s(2.0 * LN_2), &w).unwrap()).unwrap();
        assert!((d - 1.386e-2).abs() < 1e-5);
        let zero = LossWeights { lambda3: 0.0, ..w };
        assert_eq!(scalar(&combine_discriminator(&s(0.4), &s(9.0), &zero).unwrap()).unwrap(), 0.4);
        assert!(LossWeights { lambda1: -1.0, ..w }.validate().is_err());
    }

    fn check_gradient(f: impl Fn(&Tensor) -> Tensor, x: &[f64]) {
        let var = Var::new(x, &Device::Cpu).unwrap();
        let loss = f(var.as_tensor());
        let grads = loss.backward().unwrap();
        let analytic = grads.get(var.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        let h = 1e-4;
        for i in 0..x.len() {
            let mut plus = x.to_vec();
            let mut minus = x.to_vec();
            plus[i] += h;
            minus[i] -= h;
            let fp = scalar(&f(&t(&plus))).unwrap();
            let fm = scalar(&f(&t(&minus))).unwrap();
            let numeric = (fp - fm) / (2.0 * h);
            let denom = numeric.abs().max(analytic[i].abs()).max(1e-12);
            if numeric == 0.0 && analytic[i] == 0.0 {
                continue;
            }
            assert!((numeric - analytic[i]).abs() / denom < 1e-3, "element {i}: {numeric} vs {}", analytic[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x0 = [0.1, -0.4, 0.9, 0.3, -0.8, 0.5, 0.0, 0.2];
        let pred = [0.5, -0.1, 0.2, 0.35, -0.2, -0.5, 0.4, 1.0];
        let hole = t(&[0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let target = t(&x0);
        check_gradient(|p| real_diffusion_loss(&target, p).unwrap(), &pred);
        check_gradient(|p| background_loss(&target, p, &hole).unwrap(), &pred);
        check_gradient(|z| generator_gan_loss(z).unwrap(), &[-3.0, -1.0, -0.2, 0.0, 0.1, 0.7, 2.0, 5.0]);
        let fake = t(&[0.3, -0.6, 1.5, 0.0, -2.0, 0.8, 0.1, -0.1]);
        check_gradient(|z| discriminator_gan_loss(z, &fake).unwrap(), &[-3.0, -1.0, -0.2, 0.0, 0.1, 0.7, 2.0, 5.0]);
    }
}
