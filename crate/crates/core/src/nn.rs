//! Minimal named-parameter layers on top of candle.
//!
//! Every layer owns [`Var`]s registered in a [`ParamSet`] under a dotted name.
//! Forward passes take a [`Grad`] switch: frozen components hand out detached
//! weight tensors so no gradient can ever reach them.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::kernels;
use crate::{Error, Result};

/// Whether a forward pass records gradients for a component's weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grad {
    Track,
    Frozen,
}

impl Grad {
    #[inline]
    pub fn weight(self, v: &Var) -> Tensor {
        match self {
            Grad::Track => v.as_tensor().clone(),
            Grad::Frozen => v.as_tensor().detach(),
        }
    }
}

/// Ordered collection of named parameters belonging to one component.
#[derive(Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Var)>,
}

impl ParamSet {
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and raw little-endian values, in registration order.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, var) in &self.entries {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let values = var
                .as_tensor()
                .flatten_all()
                .and_then(|t| t.to_vec1::<f32>())
                .expect("parameters are f32");
            for v in values {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Detached snapshot of every tensor, keyed by `prefix + name`.
    pub fn export(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|(n, v)| (format!("{prefix}{n}"), v.as_tensor().detach().copy().expect("cpu copy")))
            .collect()
    }

    /// Overwrites every parameter from `lookup(prefix + name)`, checking shapes.
    pub fn import(&self, prefix: &str, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<()> {
        for (name, var) in &self.entries {
            let key = format!("{prefix}{name}");
            let t = lookup(&key).ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {key}: expected shape {:?}, found {:?}",
                    var.dims(),
                    t.dims()
                )));
            }
            var.set(&t.to_dtype(DType::F32)?)?;
        }
        Ok(())
    }

    /// One set viewing several groups' parameters (shared storage), with
    /// names prefixed by `group + "."`.
    pub fn merged(groups: &[(&str, &ParamSet)]) -> ParamSet {
        let entries = groups
            .iter()
            .flat_map(|(g, set)| set.entries.iter().map(move |(n, v)| (format!("{g}.{n}"), v.clone())))
            .collect();
        ParamSet { entries }
    }

    /// Copies values from another set for every name present in both with equal shapes.
    /// Returns the number of tensors copied.
    pub fn copy_matching(&self, other: &ParamSet) -> Result<usize> {
        let mut copied = 0;
        for (name, var) in &self.entries {
            if let Some(src) = other.get(name) {
                if src.dims() == var.dims() {
                    var.set(&src.as_tensor().detach().copy()?)?;
                    copied += 1;
                }
            }
        }
        Ok(copied)
    }
}

/// Creates and registers parameters with deterministic initial values.
pub struct ParamBuilder {
    prefix: Vec<String>,
    set: ParamSet,
    rng: ChaCha8Rng,
    device: Device,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        Self { prefix: Vec::new(), set: ParamSet::default(), rng: ChaCha8Rng::seed_from_u64(seed), device: Device::Cpu }
    }

    pub fn push(&mut self, name: &str) {
        self.prefix.push(name.to_string());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        self.push(name);
        let out = f(self);
        self.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(name.to_string());
        parts.join(".")
    }

    fn register(&mut self, name: &str, values: Vec<f32>, shape: &[usize]) -> Var {
        let full = self.full_name(name);
        debug_assert!(self.set.get(&full).is_none(), "duplicate parameter {full}");
        let var = Var::from_vec(values, shape, &self.device).expect("parameter allocation");
        self.set.entries.push((full, var.clone()));
        var
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f32) -> Var {
        let n = shape.iter().product();
        let values = (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect();
        self.register(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Var {
        let n = shape.iter().product();
        self.register(name, vec![value; n], shape)
    }

    pub fn finish(self) -> ParamSet {
        self.set
    }
}

#[derive(Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(pb: &mut ParamBuilder, name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        let bound = 1.0 / ((c_in * kernel * kernel) as f32).sqrt();
        pb.scoped(name, |pb| Self {
            weight: pb.uniform("weight", &[c_out, c_in, kernel, kernel], bound),
            bias: pb.uniform("bias", &[c_out], bound),
            stride,
            padding: kernel / 2,
        })
    }

    /// Weight and bias start at exactly zero.
    pub fn zeros(pb: &mut ParamBuilder, name: &str, c_in: usize, c_out: usize, kernel: usize) -> Self {
        pb.scoped(name, |pb| Self {
            weight: pb.constant("weight", &[c_out, c_in, kernel, kernel], 0.0),
            bias: pb.constant("bias", &[c_out], 0.0),
            stride: 1,
            padding: kernel / 2,
        })
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn forward(&self, x: &Tensor, g: Grad) -> Result<Tensor> {
        let y = kernels::conv2d(x, &g.weight(&self.weight), self.stride, self.padding)?;
        let b = g.weight(&self.bias).reshape((1, (), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> &Var {
        &self.bias
    }
}

#[derive(Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize) -> Self {
        let bound = 1.0 / (d_in as f32).sqrt();
        pb.scoped(name, |pb| Self {
            weight: pb.uniform("weight", &[d_out, d_in], bound),
            bias: pb.uniform("bias", &[d_out], bound),
        })
    }

    pub fn zeros(pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize) -> Self {
        pb.scoped(name, |pb| Self {
            weight: pb.constant("weight", &[d_out, d_in], 0.0),
            bias: pb.constant("bias", &[d_out], 0.0),
        })
    }

    pub fn forward(&self, x: &Tensor, g: Grad) -> Result<Tensor> {
        let y = x.matmul(&g.weight(&self.weight).t()?)?;
        Ok(y.broadcast_add(&g.weight(&self.bias))?)
    }
}

#[derive(Clone)]
pub struct GroupNorm {
    gamma: Var,
    beta: Var,
    groups: usize,
}

impl GroupNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, groups: usize) -> Self {
        assert!(channels.is_multiple_of(groups), "{channels} channels not divisible into {groups} groups");
        pb.scoped(name, |pb| Self {
            gamma: pb.constant("weight", &[channels], 1.0),
            beta: pb.constant("bias", &[channels], 0.0),
            groups,
        })
    }

    pub fn forward(&self, x: &Tensor, g: Grad) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let xg = x.reshape((n, self.groups, (c / self.groups) * h * w))?;
        let mean = xg.mean_keepdim(D::Minus1)?;
        let centered = xg.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?.reshape((n, c, h, w))?;
        let gamma = g.weight(&self.gamma).reshape((1, c, 1, 1))?;
        let beta = g.weight(&self.beta).reshape((1, c, 1, 1))?;
        Ok(normed.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }
}

#[derive(Clone)]
pub struct Embedding {
    table: Var,
}

impl Embedding {
    pub fn new(pb: &mut ParamBuilder, name: &str, rows: usize, dim: usize) -> Self {
        pb.scoped(name, |pb| Self { table: pb.uniform("weight", &[rows, dim], 1.0) })
    }

    pub fn rows(&self) -> usize {
        self.table.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.dims()[1]
    }

    pub fn table(&self) -> &Var {
        &self.table
    }

    pub fn forward(&self, ids: &[u32], g: Grad) -> Result<Tensor> {
        for &id in ids {
            if id as usize >= self.rows() {
                return Err(Error::UnknownLabel { label: id, num_labels: self.rows() });
            }
        }
        let idx = Tensor::from_slice(ids, ids.len(), &Device::Cpu)?;
        Ok(g.weight(&self.table).index_select(&idx, 0)?)
    }
}

/// Sinusoidal timestep encoding: the first half holds `sin(t·f_k)`, the second `cos(t·f_k)`,
/// with frequencies `f_k = 10000^(-k/half)`.
pub fn sinusoidal(t: f64, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0f32; dim];
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        out[k] = (t * freq).sin() as f32;
        out[half + k] = (t * freq).cos() as f32;
    }
    out
}

/// Batch of sinusoidal encodings as an `(n, dim)` tensor.
pub fn sinusoidal_batch(ts: &[usize], dim: usize) -> Result<Tensor> {
    let data: Vec<f32> = ts.iter().flat_map(|&t| sinusoidal(t as f64, dim)).collect();
    Ok(Tensor::from_vec(data, (ts.len(), dim), &Device::Cpu)?)
}
