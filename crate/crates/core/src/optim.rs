//! AdamW with built-in gradient accumulation and checkpointable state.

use candle_core::backprop::GradStore;
use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::nn::ParamSet;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

/// Decoupled-weight-decay Adam over one [`ParamSet`].
///
/// Gradients from several backward passes are summed with
/// [`accumulate`](Self::accumulate); [`step`](Self::step) applies their mean.
pub struct AdamW {
    params: ParamSet,
    cfg: AdamWConfig,
    lr: f64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    grad_sum: Vec<Vec<f32>>,
    micro_batches: usize,
    step: u64,
}

impl AdamW {
    pub fn new(params: ParamSet, lr: f64, cfg: AdamWConfig) -> Self {
        let zeros = || params.iter().map(|(_, v)| vec![0.0f32; v.elem_count()]).collect::<Vec<_>>();
        Self { m: zeros(), v: zeros(), grad_sum: zeros(), params, cfg, lr, micro_batches: 0, step: 0 }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn pending_micro_batches(&self) -> usize {
        self.micro_batches
    }

    /// Adds this group's gradients from `grads`. Returns how many of the
    /// group's parameters had a gradient present.
    pub fn accumulate(&mut self, grads: &GradStore) -> Result<usize> {
        let mut touched = 0;
        for ((_, var), sum) in self.params.iter().zip(self.grad_sum.iter_mut()) {
            if let Some(g) = grads.get(var.as_tensor()) {
                let g = g.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1::<f32>()?;
                for (s, x) in sum.iter_mut().zip(g) {
                    *s += x;
                }
                touched += 1;
            }
        }
        self.micro_batches += 1;
        Ok(touched)
    }

    /// Sum of squares of the accumulated gradient, for diagnostics.
    pub fn accumulated_norm_sq(&self) -> f64 {
        self.grad_sum.iter().flatten().map(|&g| (g as f64) * (g as f64)).sum()
    }

    /// Applies one update with the mean accumulated gradient and clears it.
    pub fn step(&mut self) -> Result<()> {
        if self.micro_batches == 0 {
            return Err(Error::InvalidCount("optimizer step without accumulated gradients".into()));
        }
        self.step += 1;
        let scale = 1.0 / self.micro_batches as f32;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (beta1 as f32, beta2 as f32);
        let lr = self.lr as f32;
        let decay = 1.0 - (self.lr * weight_decay) as f32;
        for (i, (_, var)) in self.params.iter().enumerate() {
            let mut p = var.as_tensor().flatten_all()?.to_vec1::<f32>()?;
            let (m, v, sum) = (&mut self.m[i], &mut self.v[i], &mut self.grad_sum[i]);
            for j in 0..p.len() {
                let g = sum[j] * scale;
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let m_hat = m[j] as f64 / bc1;
                let v_hat = v[j] as f64 / bc2;
                p[j] = p[j] * decay - lr * (m_hat / (v_hat.sqrt() + eps)) as f32;
                sum[j] = 0.0;
            }
            var.set(&Tensor::from_vec(p, var.dims(), &Device::Cpu)?)?;
        }
        self.micro_batches = 0;
        Ok(())
    }

    /// Moment tensors keyed `{prefix}m.{name}` / `{prefix}v.{name}`.
    pub fn export_state(&self, prefix: &str) -> Result<Vec<(String, Tensor)>> {
        let mut out = Vec::with_capacity(2 * self.params.len());
        for (i, (name, var)) in self.params.iter().enumerate() {
            out.push((format!("{prefix}m.{name}"), Tensor::from_slice(&self.m[i], var.dims(), &Device::Cpu)?));
            out.push((format!("{prefix}v.{name}"), Tensor::from_slice(&self.v[i], var.dims(), &Device::Cpu)?));
        }
        Ok(out)
    }

    pub fn import_state(&mut self, prefix: &str, step: u64, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<()> {
        for (i, (name, var)) in self.params.iter().enumerate() {
            for (kind, slot) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let key = format!("{prefix}{kind}.{name}");
                let t = lookup(&key).ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {key}")))?;
                if t.dims() != var.dims() {
                    return Err(Error::Checkpoint(format!("optimizer tensor {key} has shape {:?}", t.dims())));
                }
                *slot = t.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1::<f32>()?;
            }
        }
        self.step = step;
        self.grad_sum.iter_mut().for_each(|s| s.fill(0.0));
        self.micro_batches = 0;
        Ok(())
    }
}
