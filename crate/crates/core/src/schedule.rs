//! Discrete noise schedule and the closed-form noising arithmetic built on it.

use std::io::Write;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaSpacing {
    /// Betas evenly spaced between the endpoints.
    Linear,
    /// Square roots of the betas evenly spaced (the SDXL convention).
    ScaledLinear,
}

/// Which sampler family the multi-step base is nominally trained with. Both share
/// the same forward noising, so this only travels with the config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlowSampler {
    Ddpm,
    Ddim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub num_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub spacing: BetaSpacing,
    pub slow_sampler: SlowSampler,
    pub lcm_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            spacing: BetaSpacing::Linear,
            slow_sampler: SlowSampler::Ddim,
            lcm_steps: 4,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        let s = build_schedule(self.num_timesteps, self.beta_start, self.beta_end, self.spacing)?;
        let steps = lcm_timesteps(&s, self.lcm_steps)?;
        Ok(NoiseSchedule { lcm_steps: steps, ..s })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
    lcm_steps: Vec<usize>,
}

/// Builds the beta table and its cumulative products.
///
/// The default LCM step list uses `min(4, T)` steps.
pub fn build_schedule(
    num_timesteps: usize,
    beta_start: f64,
    beta_end: f64,
    spacing: BetaSpacing,
) -> Result<NoiseSchedule> {
    if num_timesteps == 0 {
        return Err(Error::InvalidRange("need at least one timestep".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidRange(format!(
            "require 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let lerp = |a: f64, b: f64, i: usize| {
        if num_timesteps == 1 {
            a
        } else {
            a + (b - a) * i as f64 / (num_timesteps - 1) as f64
        }
    };
    let betas: Vec<f64> = (0..num_timesteps)
        .map(|i| match spacing {
            BetaSpacing::Linear => lerp(beta_start, beta_end, i),
            BetaSpacing::ScaledLinear => lerp(beta_start.sqrt(), beta_end.sqrt(), i).powi(2),
        })
        .collect();
    let alpha_bar = betas
        .iter()
        .scan(1.0f64, |acc, b| {
            *acc *= 1.0 - b;
            Some(*acc)
        })
        .collect();
    let mut schedule = NoiseSchedule { betas, alpha_bar, lcm_steps: Vec::new() };
    schedule.lcm_steps = lcm_timesteps(&schedule, num_timesteps.min(4))?;
    Ok(schedule)
}

/// Evenly spaced inference timesteps counting down from `T - 1`:
/// `t_i = T - 1 - i * (T / n)`.
pub fn lcm_timesteps(schedule: &NoiseSchedule, n: usize) -> Result<Vec<usize>> {
    let total = schedule.num_timesteps();
    if n == 0 || n > total {
        return Err(Error::InvalidCount(format!("cannot place {n} steps on {total} timesteps")));
    }
    let stride = total / n;
    Ok((0..n).map(|i| total - 1 - i * stride).collect())
}

impl NoiseSchedule {
    pub fn num_timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn lcm_steps(&self) -> &[usize] {
        &self.lcm_steps
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or(Error::TimestepOutOfRange { t, max: self.num_timesteps() - 1 })
    }

    /// Forward noising `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`, one timestep per sample (or one for all).
    pub fn add_noise(&self, x0: &Tensor, eps: &Tensor, ts: &[usize]) -> Result<Tensor> {
        same_shape(x0, eps)?;
        let abar = self.per_sample(x0, ts)?;
        match abar.as_slice() {
            [a] => mix(x0, eps, *a),
            _ => {
                let signal = coeff_tensor(x0, abar.iter().map(|a| a.sqrt()))?;
                let noise = coeff_tensor(x0, abar.iter().map(|a| (1.0 - a).sqrt()))?;
                Ok((x0.broadcast_mul(&signal)? + eps.broadcast_mul(&noise)?)?)
            }
        }
    }

    /// One-step clean estimate `(x_t − √(1−ᾱ_t)·eps_pred) / √ᾱ_t`.
    pub fn predict_x0(&self, x_t: &Tensor, eps_pred: &Tensor, ts: &[usize]) -> Result<Tensor> {
        same_shape(x_t, eps_pred)?;
        let abar = self.per_sample(x_t, ts)?;
        match abar.as_slice() {
            [a] => unmix(x_t, eps_pred, *a),
            _ => {
                if let Some(a) = abar.iter().find(|a| **a < MIN_ALPHA_BAR) {
                    return Err(Error::Degenerate(*a));
                }
                let inv = coeff_tensor(x_t, abar.iter().map(|a| 1.0 / a.sqrt()))?;
                let noise = coeff_tensor(x_t, abar.iter().map(|a| (1.0 - a).sqrt()))?;
                Ok((x_t - eps_pred.broadcast_mul(&noise)?)?.broadcast_mul(&inv)?)
            }
        }
    }

    /// Re-noises a clean estimate to the next inference timestep.
    pub fn renoise(&self, x0_hat: &Tensor, eps_fresh: &Tensor, ts_next: &[usize]) -> Result<Tensor> {
        self.add_noise(x0_hat, eps_fresh, ts_next)
    }

    fn per_sample(&self, x: &Tensor, ts: &[usize]) -> Result<Vec<f64>> {
        let batch = if x.rank() == 4 { x.dim(0)? } else { 1 };
        if ts.len() != 1 && ts.len() != batch {
            return Err(Error::shape(format!("{batch} timesteps"), format!("{} timesteps", ts.len())));
        }
        ts.iter().map(|&t| self.alpha_bar(t)).collect()
    }

    /// Writes the `t,beta,alpha_bar` table.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "beta", "alpha_bar"])?;
        for (t, (b, a)) in self.betas.iter().zip(&self.alpha_bar).enumerate() {
            w.write_record([t.to_string(), format!("{b:e}"), format!("{a:e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub const MIN_ALPHA_BAR: f64 = 1e-12;

/// `√ᾱ·x0 + √(1−ᾱ)·eps` for an explicit ᾱ.
pub fn mix(x0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    same_shape(x0, eps)?;
    Ok((x0.affine(alpha_bar.sqrt(), 0.0)? + eps.affine((1.0 - alpha_bar).sqrt(), 0.0)?)?)
}

/// Inverse of [`mix`] for a known noise.
pub fn unmix(x_t: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    same_shape(x_t, eps)?;
    if alpha_bar < MIN_ALPHA_BAR {
        return Err(Error::Degenerate(alpha_bar));
    }
    let scaled = (x_t - eps.affine((1.0 - alpha_bar).sqrt(), 0.0)?)?;
    Ok(scaled.affine(1.0 / alpha_bar.sqrt(), 0.0)?)
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(a.dims(), b.dims()));
    }
    Ok(())
}

fn coeff_tensor(like: &Tensor, values: impl Iterator<Item = f64>) -> Result<Tensor> {
    let v: Vec<f64> = values.collect();
    let n = v.len();
    Ok(Tensor::from_vec(v, (n, 1, 1, 1), like.device())?.to_dtype(like.dtype())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn default_schedule() -> NoiseSchedule {
        ScheduleConfig::default().build().unwrap()
    }

    fn t64(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    #[test]
    fn two_step_product() {
        let s = build_schedule(2, 0.1, 0.2, BetaSpacing::Linear).unwrap();
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars()[1] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn single_step() {
        let s = build_schedule(1, 1e-4, 1e-4, BetaSpacing::Linear).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0 - 1e-4]);
        assert_eq!(s.lcm_steps(), &[0]);
    }

    #[test]
    fn default_table_matches_straight_line_product() {
        let s = default_schedule();
        // independent loop over the linear betas
        let mut prod = 1.0f64;
        for t in 0..1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * t as f64 / 999.0;
            prod *= 1.0 - beta;
            let rel = (s.alpha_bars()[t] - prod).abs() / prod;
            assert!(rel < 1e-12, "t={t} rel={rel}");
        }
        assert!(s.alpha_bars()[999] < 1e-4);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bars().iter().all(|a| *a > 0.0 && *a <= 1.0));
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(matches!(build_schedule(10, 0.0, 0.1, BetaSpacing::Linear), Err(Error::InvalidRange(_))));
        assert!(matches!(build_schedule(10, 0.2, 0.1, BetaSpacing::Linear), Err(Error::InvalidRange(_))));
        assert!(matches!(build_schedule(10, 0.1, 1.0, BetaSpacing::Linear), Err(Error::InvalidRange(_))));
        assert!(matches!(build_schedule(0, 0.1, 0.2, BetaSpacing::Linear), Err(Error::InvalidRange(_))));
    }

    #[test]
    fn lcm_spacing() {
        let s = default_schedule();
        assert_eq!(lcm_timesteps(&s, 4).unwrap(), vec![999, 749, 499, 249]);
        assert_eq!(s.lcm_steps(), &[999, 749, 499, 249]);
        assert_eq!(lcm_timesteps(&s, 1).unwrap(), vec![999]);
        let small = build_schedule(8, 0.01, 0.02, BetaSpacing::Linear).unwrap();
        assert_eq!(lcm_timesteps(&small, 2).unwrap(), vec![7, 3]);
        assert!(matches!(lcm_timesteps(&small, 9), Err(Error::InvalidCount(_))));
        assert!(matches!(lcm_timesteps(&small, 0), Err(Error::InvalidCount(_))));
    }

    #[test]
    fn mix_boundaries_and_hand_value() {
        let x0 = t64(&[2.0, -1.0]);
        let eps = t64(&[1.0, 0.5]);
        assert_eq!(mix(&x0, &eps, 1.0).unwrap().to_vec1::<f64>().unwrap(), vec![2.0, -1.0]);
        assert_eq!(mix(&x0, &eps, 0.0).unwrap().to_vec1::<f64>().unwrap(), vec![1.0, 0.5]);
        let v = mix(&t64(&[2.0]), &t64(&[1.0]), 0.25).unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((v - (1.0 + 0.75f64.sqrt())).abs() < 1e-12);
        assert!((v - 1.8660).abs() < 1e-4);
    }

    #[test]
    fn unmix_hand_value_and_degeneracy() {
        let v = unmix(&t64(&[1.0 + 0.75f64.sqrt()]), &t64(&[1.0]), 0.25).unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((v - 2.0).abs() < 1e-12);
        let zero = unmix(&t64(&[3.0]), &t64(&[0.0]), 0.25).unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((zero - 6.0).abs() < 1e-12);
        assert!(matches!(unmix(&t64(&[1.0]), &t64(&[1.0]), 1e-13), Err(Error::Degenerate(_))));
    }

    #[test]
    fn errors_on_shape_and_range() {
        let s = default_schedule();
        let a = Tensor::zeros((1, 3, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let b = Tensor::zeros((1, 3, 4, 5), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(s.add_noise(&a, &b, &[0]), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(s.add_noise(&a, &a, &[1000]), Err(Error::TimestepOutOfRange { .. })));
        assert!(matches!(s.add_noise(&a, &a, &[1, 2]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn per_sample_timesteps_match_scalar_path() {
        let s = default_schedule();
        let x0 = Tensor::randn(0f32, 1.0, (2, 3, 4, 4), &Device::Cpu).unwrap();
        let eps = Tensor::randn(0f32, 1.0, (2, 3, 4, 4), &Device::Cpu).unwrap();
        let both = s.add_noise(&x0, &eps, &[10, 700]).unwrap();
        for (i, t) in [10usize, 700].into_iter().enumerate() {
            let one = s.add_noise(&x0.get(i).unwrap(), &eps.get(i).unwrap(), &[t]).unwrap();
            let d = (both.get(i).unwrap() - one).unwrap().abs().unwrap().max_all().unwrap();
            assert!(d.to_scalar::<f32>().unwrap() < 1e-6);
        }
    }

    #[test]
    fn csv_dump_has_header_and_rows() {
        let s = build_schedule(3, 0.1, 0.3, BetaSpacing::Linear).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "t,beta,alpha_bar");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0,"));
    }

    #[test]
    fn scaled_linear_endpoints() {
        let s = build_schedule(1000, 0.00085, 0.012, BetaSpacing::ScaledLinear).unwrap();
        assert!((s.betas()[0] - 0.00085).abs() < 1e-15);
        assert!((s.betas()[999] - 0.012).abs() < 1e-15);
    }
}
