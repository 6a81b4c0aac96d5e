//! Inpainting adapter: an attention-free copy of the backbone encoder that reads
//! `[x_bg, x_noisy, mask]` and emits one zero-initialised residual feature map
//! per backbone stage.

use candle_core::{DType, Device, Tensor};

use crate::backbone::{Backbone, BackboneConfig, Embedder, EncoderStack};
use crate::nn::{Conv2d, Grad, ParamBuilder, ParamSet};
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

/// Conditioning input shared by the generators and the discriminator.
#[derive(Debug, Clone)]
pub struct ConditionTriple {
    pub x_bg: Tensor,
    pub x_noisy: Tensor,
    pub mask_ds: Tensor,
}

impl ConditionTriple {
    pub fn new(x_bg: Tensor, x_noisy: Tensor, mask_ds: Tensor) -> Result<Self> {
        let (n, _, h, w) = x_bg.dims4()?;
        if x_noisy.dims() != x_bg.dims() {
            return Err(Error::shape(x_bg.dims(), x_noisy.dims()));
        }
        if mask_ds.dims() != [n, 1, h, w] {
            return Err(Error::shape([n, 1, h, w], mask_ds.dims()));
        }
        check_binary(&mask_ds)?;
        Ok(Self { x_bg, x_noisy, mask_ds })
    }

    /// Same background and mask, different noisy image.
    pub fn with_noisy(&self, x_noisy: Tensor) -> Result<Self> {
        if x_noisy.dims() != self.x_bg.dims() {
            return Err(Error::shape(self.x_bg.dims(), x_noisy.dims()));
        }
        Ok(Self { x_bg: self.x_bg.clone(), x_noisy, mask_ds: self.mask_ds.clone() })
    }

    pub fn concat(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.x_bg, &self.x_noisy, &self.mask_ds], 1)?)
    }
}

fn check_binary(mask: &Tensor) -> Result<()> {
    let values = mask.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    match values.iter().find(|v| **v != 0.0 && **v != 1.0) {
        Some(v) => Err(Error::NonBinaryMask(v.clamp(0.0, 255.0) as u8)),
        None => Ok(()),
    }
}

/// `x0 ⊙ (1 − hole)`, with the single-channel hole broadcast over colour channels.
pub fn make_background(x0: &Tensor, hole_mask: &Tensor) -> Result<Tensor> {
    let rank = x0.rank();
    if hole_mask.rank() != rank || rank < 3 {
        return Err(Error::shape(format!("rank-{rank} mask"), hole_mask.dims()));
    }
    let (xd, md) = (x0.dims(), hole_mask.dims());
    let spatial_ok = xd[rank - 2..] == md[rank - 2..] && md[rank - 3] == 1 && xd[..rank - 3] == md[..rank - 3];
    if !spatial_ok {
        return Err(Error::shape(xd, md));
    }
    let keep = hole_mask.affine(-1.0, 1.0)?;
    Ok(x0.broadcast_mul(&keep)?)
}

/// Nearest-neighbour downsampling anchored at the top-left pixel of each block.
pub fn downsample_mask(mask: &Tensor, factor: usize) -> Result<Tensor> {
    let rank = mask.rank();
    if rank < 2 {
        return Err(Error::shape("at least 2 dims", mask.dims()));
    }
    let (h, w) = (mask.dims()[rank - 2], mask.dims()[rank - 1]);
    for (dim, value) in [("mask height", h), ("mask width", w)] {
        if factor == 0 || value % factor != 0 {
            return Err(Error::Divisibility { dim, value, factor });
        }
    }
    if factor == 1 {
        return Ok(mask.clone());
    }
    let rows: Vec<u32> = (0..h / factor).map(|i| (i * factor) as u32).collect();
    let cols: Vec<u32> = (0..w / factor).map(|i| (i * factor) as u32).collect();
    let rows = Tensor::from_vec(rows, h / factor, &Device::Cpu)?;
    let cols = Tensor::from_vec(cols, w / factor, &Device::Cpu)?;
    Ok(mask.contiguous()?.index_select(&rows, rank - 2)?.index_select(&cols, rank - 1)?)
}

pub struct Adapter {
    cfg: BackboneConfig,
    embedder: Embedder,
    encoder: EncoderStack,
    taps: Vec<Conv2d>,
    params: ParamSet,
}

impl Adapter {
    pub fn new(cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut pb = ParamBuilder::new(seed);
        let embedder = Embedder::new(&mut pb, cfg);
        let encoder = EncoderStack::new(&mut pb, cfg, cfg.condition_channels());
        let taps = pb.scoped("taps", |pb| {
            cfg.stage_channels()
                .iter()
                .enumerate()
                .map(|(s, &c)| Conv2d::zeros(pb, &s.to_string(), c, c, 1))
                .collect()
        });
        Ok(Self { cfg: cfg.clone(), embedder, encoder, taps, params: pb.finish() })
    }

    /// New adapter whose embedding and encoder weights start as a copy of the
    /// backbone's (all but the wider input convolution). Taps stay zero.
    pub fn from_backbone(backbone: &Backbone, seed: u64) -> Result<Self> {
        let adapter = Self::new(backbone.config(), seed)?;
        adapter.params.copy_matching(backbone.params())?;
        Ok(adapter)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn taps(&self) -> &[Conv2d] {
        &self.taps
    }

    /// Per-stage residual features, already passed through the fusion taps.
    pub fn forward(&self, cond: &ConditionTriple, ts: &[usize], labels: &[u32], g: Grad) -> Result<Vec<Tensor>> {
        let x = cond.concat()?;
        let (n, c, h, w) = x.dims4()?;
        let cfg = &self.cfg;
        if c != cfg.condition_channels() || h != cfg.image_size || w != cfg.image_size {
            return Err(Error::shape((n, cfg.condition_channels(), cfg.image_size, cfg.image_size), x.dims()));
        }
        let emb = self.embedder.forward(ts, labels, g)?;
        let stages = self.encoder.forward(&x, &emb, None, self.encoder.num_stages() - 1, g)?;
        stages.iter().zip(&self.taps).map(|(f, tap)| tap.forward(f, g)).collect()
    }
}

/// One-step clean estimate from the fast generator (fast backbone + adapter).
#[allow(clippy::too_many_arguments)]
pub fn generate_one_step(
    adapter: &Adapter,
    fast: &Backbone,
    x_t: &Tensor,
    cond: &ConditionTriple,
    ts: &[usize],
    labels: &[u32],
    schedule: &NoiseSchedule,
    g: Grad,
) -> Result<Tensor> {
    let feats = adapter.forward(cond, ts, labels, g)?;
    let eps = fast.eps_predict(x_t, ts, labels, Some(&feats), Grad::Frozen)?;
    schedule.predict_x0(x_t, &eps, ts)
}
