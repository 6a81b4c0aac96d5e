//! Tiny conditional U-shaped ε-prediction network.
//!
//! The same architecture plays both base-model roles: the multi-step "slow"
//! base and the few-step "fast" base. Each encoder stage and each decoder stage
//! exposes a residual injection point; an adapter supplies one feature map per
//! stage, added to both the encoder and the decoder output of that stage.

use std::sync::atomic::{AtomicU64, Ordering};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::nn::{sinusoidal_batch, Conv2d, Embedding, Grad, GroupNorm, Linear, ParamBuilder, ParamSet};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_stage: usize,
    pub num_labels: usize,
    pub norm_groups: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            in_channels: 3,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4],
            blocks_per_stage: 2,
            num_labels: crate::data::NUM_LABELS,
            norm_groups: 8,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("in_channels", self.in_channels),
            ("base_channels", self.base_channels),
            ("blocks_per_stage", self.blocks_per_stage),
            ("num_labels", self.num_labels),
            ("norm_groups", self.norm_groups),
            ("channel_multipliers.len", self.channel_multipliers.len()),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("backbone.{name} must be positive")));
        }
        if self.channel_multipliers.contains(&0) {
            return Err(Error::Config("backbone.channel_multipliers must be positive".into()));
        }
        let factor = 1usize << (self.num_stages() - 1);
        if !self.image_size.is_multiple_of(factor) {
            return Err(Error::Divisibility { dim: "image_size", value: self.image_size, factor });
        }
        for c in self.stage_channels() {
            if !c.is_multiple_of(self.norm_groups) {
                return Err(Error::Config(format!(
                    "stage width {c} not divisible by norm_groups {}",
                    self.norm_groups
                )));
            }
        }
        if !self.base_channels.is_multiple_of(2) {
            return Err(Error::Config("backbone.base_channels must be even".into()));
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        self.channel_multipliers.iter().map(|m| m * self.base_channels).collect()
    }

    pub fn stage_size(&self, stage: usize) -> usize {
        self.image_size >> stage
    }

    pub fn embed_dim(&self) -> usize {
        4 * self.base_channels
    }

    /// Adapter input: background, noisy image and one mask channel.
    pub fn condition_channels(&self) -> usize {
        2 * self.in_channels + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Slow,
    Fast,
}

/// Timestep + label embedding.
#[derive(Clone)]
pub(crate) struct Embedder {
    time1: Linear,
    time2: Linear,
    labels: Embedding,
    freq_dim: usize,
}

impl Embedder {
    pub(crate) fn new(pb: &mut ParamBuilder, cfg: &BackboneConfig) -> Self {
        let e = cfg.embed_dim();
        pb.scoped("embed", |pb| Self {
            time1: Linear::new(pb, "time1", cfg.base_channels, e),
            time2: Linear::new(pb, "time2", e, e),
            labels: Embedding::new(pb, "label", cfg.num_labels, e),
            freq_dim: cfg.base_channels,
        })
    }

    pub(crate) fn time_embed(&self, ts: &[usize], g: Grad) -> Result<Tensor> {
        let h = self.time1.forward(&sinusoidal_batch(ts, self.freq_dim)?, g)?.silu()?;
        self.time2.forward(&h, g)
    }

    pub(crate) fn forward(&self, ts: &[usize], labels: &[u32], g: Grad) -> Result<Tensor> {
        if ts.len() != labels.len() {
            return Err(Error::shape(format!("{} labels", ts.len()), format!("{} labels", labels.len())));
        }
        Ok((self.time_embed(ts, g)? + self.labels.forward(labels, g)?)?)
    }

    pub(crate) fn label_table(&self) -> &Embedding {
        &self.labels
    }
}

#[derive(Clone)]
pub(crate) struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(pb: &mut ParamBuilder, name: &str, c_in: usize, c_out: usize, cfg: &BackboneConfig) -> Self {
        let groups = cfg.norm_groups;
        pb.scoped(name, |pb| Self {
            norm1: GroupNorm::new(pb, "norm1", c_in, groups),
            conv1: Conv2d::new(pb, "conv1", c_in, c_out, 3, 1),
            emb_proj: Linear::new(pb, "emb_proj", cfg.embed_dim(), c_out),
            norm2: GroupNorm::new(pb, "norm2", c_out, groups),
            conv2: Conv2d::new(pb, "conv2", c_out, c_out, 3, 1),
            skip: (c_in != c_out).then(|| Conv2d::new(pb, "skip", c_in, c_out, 1, 1)),
        })
    }

    fn forward(&self, x: &Tensor, emb: &Tensor, g: Grad) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x, g)?.silu()?, g)?;
        let e = self.emb_proj.forward(&emb.silu()?, g)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&e)?;
        let h = self.conv2.forward(&self.norm2.forward(&h, g)?.silu()?, g)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(x, g)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Input convolution followed by the downsampling stages.
#[derive(Clone)]
pub(crate) struct EncoderStack {
    conv_in: Conv2d,
    stages: Vec<Vec<ResBlock>>,
    downs: Vec<Conv2d>,
}

impl EncoderStack {
    pub(crate) fn new(pb: &mut ParamBuilder, cfg: &BackboneConfig, input_channels: usize) -> Self {
        let widths = cfg.stage_channels();
        pb.scoped("encoder", |pb| {
            let conv_in = Conv2d::new(pb, "conv_in", input_channels, widths[0], 3, 1);
            let mut stages = Vec::new();
            let mut downs = Vec::new();
            let mut c = widths[0];
            for (s, &w) in widths.iter().enumerate() {
                let blocks = (0..cfg.blocks_per_stage)
                    .map(|b| {
                        let blk = ResBlock::new(pb, &format!("stage{s}.block{b}"), c, w, cfg);
                        c = w;
                        blk
                    })
                    .collect();
                stages.push(blocks);
                if s + 1 < widths.len() {
                    downs.push(Conv2d::new(pb, &format!("down{s}"), w, w, 3, 2));
                }
            }
            Self { conv_in, stages, downs }
        })
    }

    pub(crate) fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Runs stages `0..=last`, returning each stage output with its injection added.
    pub(crate) fn forward(
        &self,
        x: &Tensor,
        emb: &Tensor,
        inject: Option<&[Tensor]>,
        last: usize,
        g: Grad,
    ) -> Result<Vec<Tensor>> {
        let mut h = self.conv_in.forward(x, g)?;
        let mut outs = Vec::with_capacity(last + 1);
        for s in 0..=last {
            if s > 0 {
                h = self.downs[s - 1].forward(&h, g)?;
            }
            for blk in &self.stages[s] {
                h = blk.forward(&h, emb, g)?;
            }
            if let Some(feats) = inject {
                h = (h + &feats[s])?;
            }
            outs.push(h.clone());
        }
        Ok(outs)
    }
}

/// Middle block, upsampling stages with skip connections, and the output head.
/// The head adds a timestep-gated copy of the noisy input, `γ(emb) ⊙ x_t`, so at
/// high noise the network only has to learn a small residual.
#[derive(Clone)]
pub(crate) struct DecoderStack {
    mid: ResBlock,
    stages: Vec<Vec<ResBlock>>,
    ups: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    input_gate: Linear,
}

impl DecoderStack {
    pub(crate) fn new(pb: &mut ParamBuilder, cfg: &BackboneConfig) -> Self {
        let widths = cfg.stage_channels();
        let deepest = *widths.last().expect("at least one stage");
        pb.scoped("decoder", |pb| {
            let mid = ResBlock::new(pb, "mid", deepest, deepest, cfg);
            let mut stages = Vec::new();
            let mut ups = Vec::new();
            for (s, &w) in widths.iter().enumerate() {
                let blocks = (0..cfg.blocks_per_stage)
                    .map(|b| {
                        let c_in = if b == 0 { 2 * w } else { w };
                        ResBlock::new(pb, &format!("stage{s}.block{b}"), c_in, w, cfg)
                    })
                    .collect();
                stages.push(blocks);
                if s > 0 {
                    ups.push(Conv2d::new(pb, &format!("up{s}"), w, widths[s - 1], 3, 1));
                }
            }
            Self {
                mid,
                stages,
                ups,
                norm_out: GroupNorm::new(pb, "norm_out", widths[0], cfg.norm_groups),
                conv_out: Conv2d::new(pb, "conv_out", widths[0], cfg.in_channels, 3, 1),
                input_gate: Linear::zeros(pb, "input_gate", cfg.embed_dim(), cfg.in_channels),
            }
        })
    }

    pub(crate) fn forward(
        &self,
        x_t: &Tensor,
        skips: &[Tensor],
        emb: &Tensor,
        inject: Option<&[Tensor]>,
        g: Grad,
    ) -> Result<Tensor> {
        let last = skips.len() - 1;
        let mut h = self.mid.forward(&skips[last], emb, g)?;
        for s in (0..=last).rev() {
            h = Tensor::cat(&[&h, &skips[s]], 1)?;
            for blk in &self.stages[s] {
                h = blk.forward(&h, emb, g)?;
            }
            if let Some(feats) = inject {
                h = (h + &feats[s])?;
            }
            if s > 0 {
                let (_, _, hh, ww) = h.dims4()?;
                h = self.ups[s - 1].forward(&h.upsample_nearest2d(2 * hh, 2 * ww)?, g)?;
            }
        }
        let h = self.norm_out.forward(&h, g)?.silu()?;
        let gate = self.input_gate.forward(&emb.silu()?, g)?.unsqueeze(2)?.unsqueeze(3)?;
        Ok((self.conv_out.forward(&h, g)? + x_t.broadcast_mul(&gate)?)?)
    }
}

pub struct Backbone {
    cfg: BackboneConfig,
    role: Role,
    embedder: Embedder,
    encoder: EncoderStack,
    decoder: DecoderStack,
    params: ParamSet,
    evals: AtomicU64,
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig, role: Role, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut pb = ParamBuilder::new(seed);
        let embedder = Embedder::new(&mut pb, cfg);
        let encoder = EncoderStack::new(&mut pb, cfg, cfg.in_channels);
        let decoder = DecoderStack::new(&mut pb, cfg);
        Ok(Self {
            cfg: cfg.clone(),
            role,
            embedder,
            encoder,
            decoder,
            params: pb.finish(),
            evals: AtomicU64::new(0),
        })
    }

    /// Independent copy (fresh storage) of this network under a new role.
    pub fn duplicate(&self, role: Role) -> Result<Self> {
        let copy = Self::new(&self.cfg, role, 0)?;
        copy.params.copy_matching(&self.params)?;
        Ok(copy)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Number of full ε-predictions served so far.
    pub fn eval_count(&self) -> u64 {
        self.evals.load(Ordering::Relaxed)
    }

    pub fn label_embedding_table(&self) -> &candle_core::Var {
        self.embedder.label_table().table()
    }

    pub fn time_embed(&self, ts: &[usize]) -> Result<Tensor> {
        self.embedder.time_embed(ts, Grad::Frozen)
    }

    pub fn label_embed(&self, labels: &[u32]) -> Result<Tensor> {
        self.embedder.label_table().forward(labels, Grad::Frozen)
    }

    pub(crate) fn embed(&self, ts: &[usize], labels: &[u32], g: Grad) -> Result<Tensor> {
        self.embedder.forward(ts, labels, g)
    }

    pub(crate) fn check_input(&self, x: &Tensor, ts: &[usize], labels: &[u32]) -> Result<()> {
        let c = &self.cfg;
        let (n, ch, h, w) = x.dims4().map_err(|_| Error::shape("rank-4 NCHW", x.dims()))?;
        if ch != c.in_channels || h != c.image_size || w != c.image_size {
            return Err(Error::shape((n, c.in_channels, c.image_size, c.image_size), x.dims()));
        }
        if ts.len() != n || labels.len() != n {
            return Err(Error::shape(
                format!("{n} timesteps and labels"),
                format!("{} timesteps, {} labels", ts.len(), labels.len()),
            ));
        }
        Ok(())
    }

    /// Checks that `feats` carries one `(n, width_s, size_s, size_s)` map per stage.
    pub(crate) fn check_features(&self, n: usize, feats: &[Tensor]) -> Result<()> {
        let widths = self.cfg.stage_channels();
        if feats.len() != widths.len() {
            return Err(Error::shape(format!("{} stage features", widths.len()), format!("{}", feats.len())));
        }
        for (s, f) in feats.iter().enumerate() {
            let want = [n, widths[s], self.cfg.stage_size(s), self.cfg.stage_size(s)];
            if f.dims() != want {
                return Err(Error::shape(want, f.dims()));
            }
        }
        Ok(())
    }

    /// ε_θ(x_t, c, t) with optional per-stage residual features.
    pub fn eps_predict(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        labels: &[u32],
        features: Option<&[Tensor]>,
        g: Grad,
    ) -> Result<Tensor> {
        self.check_input(x_t, ts, labels)?;
        if let Some(f) = features {
            self.check_features(x_t.dim(0)?, f)?;
        }
        let emb = self.embed(ts, labels, g)?;
        let skips = self.encoder.forward(x_t, &emb, features, self.encoder.num_stages() - 1, g)?;
        let out = self.decoder.forward(x_t, &skips, &emb, features, g)?;
        self.evals.fetch_add(1, Ordering::Relaxed);
        Ok(out)
    }

    /// Encoder stage outputs `0..=last` with optional residual features added at each stage.
    pub(crate) fn encode(
        &self,
        x_t: &Tensor,
        emb: &Tensor,
        features: Option<&[Tensor]>,
        last: usize,
        g: Grad,
    ) -> Result<Vec<Tensor>> {
        self.encoder.forward(x_t, emb, features, last, g)
    }

    /// Deepest encoder feature map, with assistant features fused at every stage.
    pub fn encode_features(
        &self,
        x_t: &Tensor,
        ts: &[usize],
        labels: &[u32],
        assistant: Option<&[Tensor]>,
    ) -> Result<Tensor> {
        self.check_input(x_t, ts, labels)?;
        if let Some(f) = assistant {
            self.check_features(x_t.dim(0)?, f)?;
        }
        let emb = self.embed(ts, labels, Grad::Frozen)?;
        let mut stages = self.encode(x_t, &emb, assistant, self.encoder.num_stages() - 1, Grad::Frozen)?;
        Ok(stages.pop().expect("non-empty"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    pub(crate) fn tiny() -> BackboneConfig {
        BackboneConfig {
            image_size: 8,
            in_channels: 3,
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            blocks_per_stage: 1,
            num_labels: 5,
            norm_groups: 2,
        }
    }

    fn batch(cfg: &BackboneConfig, n: usize) -> Tensor {
        Tensor::randn(0f32, 1.0, (n, cfg.in_channels, cfg.image_size, cfg.image_size), &Device::Cpu).unwrap()
    }

    #[test]
    fn output_shape_and_purity() {
        let cfg = tiny();
        let b = Backbone::new(&cfg, Role::Slow, 1).unwrap();
        let x = batch(&cfg, 2);
        let y1 = b.eps_predict(&x, &[3, 900], &[0, 4], None, Grad::Frozen).unwrap();
        let y2 = b.eps_predict(&x, &[3, 900], &[0, 4], None, Grad::Frozen).unwrap();
        assert_eq!(y1.dims(), x.dims());
        assert_eq!(y1.flatten_all().unwrap().to_vec1::<f32>().unwrap(), y2.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        assert_eq!(b.eval_count(), 2);
    }

    #[test]
    fn input_gate_adds_scaled_noisy_input() {
        let cfg = tiny();
        let b = Backbone::new(&cfg, Role::Slow, 5).unwrap();
        let x = batch(&cfg, 2);
        let before = b.eps_predict(&x, &[10, 999], &[1, 2], None, Grad::Frozen).unwrap();
        let (_, bias) = b.params().iter().find(|(n, _)| n.ends_with("input_gate.bias")).unwrap();
        bias.set(&Tensor::ones(cfg.in_channels, DType::F32, &Device::Cpu).unwrap()).unwrap();
        let after = b.eps_predict(&x, &[10, 999], &[1, 2], None, Grad::Frozen).unwrap();
        let diff = ((after - before).unwrap() - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-5, "{diff}");
    }

    #[test]
    fn zero_features_are_additive_identity() {
        let cfg = tiny();
        let b = Backbone::new(&cfg, Role::Fast, 2).unwrap();
        let x = batch(&cfg, 2);
        let zeros: Vec<Tensor> = cfg
            .stage_channels()
            .iter()
            .enumerate()
            .map(|(s, &c)| Tensor::zeros((2, c, cfg.stage_size(s), cfg.stage_size(s)), DType::F32, &Device::Cpu).unwrap())
            .collect();
        let plain = b.eps_predict(&x, &[10, 20], &[1, 2], None, Grad::Frozen).unwrap();
        let fused = b.eps_predict(&x, &[10, 20], &[1, 2], Some(&zeros), Grad::Frozen).unwrap();
        assert_eq!(
            plain.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            fused.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let e1 = b.encode_features(&x, &[10, 20], &[1, 2], None).unwrap();
        let e2 = b.encode_features(&x, &[10, 20], &[1, 2], Some(&zeros)).unwrap();
        assert_eq!(e1.dims(), &[2, 8, 4, 4]);
        assert_eq!(
            e1.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            e2.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = tiny();
        let b = Backbone::new(&cfg, Role::Slow, 0).unwrap();
        let x = batch(&cfg, 1);
        assert!(matches!(b.eps_predict(&x, &[0], &[5], None, Grad::Frozen), Err(Error::UnknownLabel { .. })));
        let wrong = Tensor::zeros((1, 3, 6, 6), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(b.eps_predict(&wrong, &[0], &[0], None, Grad::Frozen), Err(Error::ShapeMismatch { .. })));
        let feats = vec![Tensor::zeros((1, 4, 8, 8), DType::F32, &Device::Cpu).unwrap()];
        assert!(matches!(b.eps_predict(&x, &[0], &[0], Some(&feats), Grad::Frozen), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny();
        cfg.image_size = 6;
        cfg.channel_multipliers = vec![1, 2, 4];
        assert!(matches!(cfg.validate(), Err(Error::Divisibility { .. })));
        let mut cfg = tiny();
        cfg.num_labels = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        BackboneConfig::default().validate().unwrap();
    }

    #[test]
    fn label_table_shape_and_lookup() {
        let cfg = tiny();
        let b = Backbone::new(&cfg, Role::Slow, 0).unwrap();
        assert_eq!(b.label_embedding_table().dims(), &[5, 16]);
        let a = b.label_embed(&[3]).unwrap().to_vec2::<f32>().unwrap();
        let c = b.label_embed(&[3]).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(a, c);
        assert!(matches!(b.label_embed(&[9]), Err(Error::UnknownLabel { .. })));
    }

    #[test]
    fn only_the_touched_label_row_gets_gradient() {
        let cfg = tiny();
        let b = Backbone::new(&cfg, Role::Slow, 0).unwrap();
        let x = batch(&cfg, 1);
        let out = b.eps_predict(&x, &[5], &[2], None, Grad::Track).unwrap();
        let grads = out.sqr().unwrap().mean_all().unwrap().backward().unwrap();
        let g = grads.get(b.label_embedding_table().as_tensor()).unwrap().to_vec2::<f32>().unwrap();
        for (row, vals) in g.iter().enumerate() {
            let nonzero = vals.iter().any(|v| *v != 0.0);
            assert_eq!(nonzero, row == 2, "row {row}");
        }
    }

    #[test]
    fn time_embedding_deterministic_and_distinct() {
        let cfg = tiny();
        let b = Backbone::new(&cfg, Role::Slow, 0).unwrap();
        let e1 = b.time_embed(&[1]).unwrap().to_vec2::<f32>().unwrap();
        let e1b = b.time_embed(&[1]).unwrap().to_vec2::<f32>().unwrap();
        let e2 = b.time_embed(&[2]).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(e1, e1b);
        assert_ne!(e1, e2);
        assert_eq!(e1[0].len(), cfg.embed_dim());
    }

    #[test]
    fn duplicate_has_equal_values_and_separate_storage() {
        let cfg = tiny();
        let b = Backbone::new(&cfg, Role::Slow, 4).unwrap();
        let c = b.duplicate(Role::Fast).unwrap();
        assert_eq!(b.params().hash(), c.params().hash());
        let (_, v) = c.params().iter().next().unwrap();
        v.set(&v.as_tensor().affine(2.0, 1.0).unwrap()).unwrap();
        assert_ne!(b.params().hash(), c.params().hash());
    }
}
