//! Diffusion discriminator: frozen slow-backbone encoder, trainable assistant
//! encoder/decoder, and a five-stage convolutional classifier.

use std::sync::Arc;

use candle_core::Tensor;

use crate::adapter::{Adapter, ConditionTriple};
use crate::backbone::{Backbone, BackboneConfig, DecoderStack};
use crate::nn::{Conv2d, Grad, GroupNorm, ParamBuilder, ParamSet};
use crate::{Error, Result};

pub const CLASSIFIER_INPUT: usize = 32;
pub const CLASSIFIER_STAGES: usize = 5;

/// Maps a 32×32 feature map to one logit: five stride-2 3×3 convolutions,
/// GroupNorm + SiLU after all but the last.
pub struct Classifier {
    convs: Vec<Conv2d>,
    norms: Vec<GroupNorm>,
    params: ParamSet,
}

impl Classifier {
    pub fn new(in_channels: usize, groups: usize, seed: u64) -> Self {
        let mut pb = ParamBuilder::new(seed);
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut c = in_channels;
        for i in 0..CLASSIFIER_STAGES {
            if i + 1 < CLASSIFIER_STAGES {
                let out = 2 * c;
                convs.push(Conv2d::new(&mut pb, &format!("conv{i}"), c, out, 3, 2));
                norms.push(GroupNorm::new(&mut pb, &format!("norm{i}"), out, groups));
                c = out;
            } else {
                convs.push(Conv2d::zeros(&mut pb, &format!("conv{i}"), c, 1, 3).with_stride(2));
            }
        }
        Self { convs, norms, params: pb.finish() }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn num_convs(&self) -> usize {
        self.convs.len()
    }

    /// Logits plus the spatial size after every convolution.
    pub fn forward_traced(&self, features: &Tensor, g: Grad) -> Result<(Tensor, Vec<usize>)> {
        let (n, _, h, w) = features.dims4()?;
        if h != CLASSIFIER_INPUT || w != CLASSIFIER_INPUT {
            return Err(Error::WrongSpatialSize(h, w));
        }
        let mut x = features.clone();
        let mut trace = Vec::with_capacity(self.convs.len());
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x, g)?;
            trace.push(x.dim(2)?);
            if let Some(norm) = self.norms.get(i) {
                x = norm.forward(&x, g)?.silu()?;
            }
        }
        Ok((x.reshape(n)?, trace))
    }

    pub fn forward(&self, features: &Tensor, g: Grad) -> Result<Tensor> {
        Ok(self.forward_traced(features, g)?.0)
    }
}

/// Mirrored decoder producing an ε-prediction from fused encoder features.
pub struct AssistantDecoder {
    decoder: DecoderStack,
    params: ParamSet,
}

impl AssistantDecoder {
    pub fn new(cfg: &BackboneConfig, seed: u64) -> Self {
        let mut pb = ParamBuilder::new(seed);
        let decoder = DecoderStack::new(&mut pb, cfg);
        Self { decoder, params: pb.finish() }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }
}

/// Output of [`Discriminator::score_and_denoise`].
pub struct FakePass {
    pub logits: Tensor,
    pub eps: Tensor,
}

pub struct Discriminator {
    frozen: Arc<Backbone>,
    assistant_encoder: Adapter,
    assistant_decoder: AssistantDecoder,
    classifier: Classifier,
    read_stage: usize,
}

impl Discriminator {
    /// Builds the trainable parts around `frozen` (the slow backbone). The
    /// assistant encoder and decoder start from the backbone's own weights.
    pub fn new(frozen: Arc<Backbone>, seed: u64) -> Result<Self> {
        let cfg = frozen.config().clone();
        let read_stage = (0..cfg.num_stages())
            .find(|&s| cfg.stage_size(s) == CLASSIFIER_INPUT)
            .ok_or_else(|| Error::Config(format!("no encoder stage has spatial size {CLASSIFIER_INPUT}")))?;
        let assistant_encoder = Adapter::from_backbone(&frozen, seed)?;
        let assistant_decoder = AssistantDecoder::new(&cfg, seed.wrapping_add(1));
        assistant_decoder.params.copy_matching(frozen.params())?;
        let classifier = Classifier::new(cfg.stage_channels()[read_stage], cfg.norm_groups, seed.wrapping_add(2));
        Ok(Self { frozen, assistant_encoder, assistant_decoder, classifier, read_stage })
    }

    pub fn frozen_encoder(&self) -> &Arc<Backbone> {
        &self.frozen
    }

    pub fn assistant_encoder(&self) -> &Adapter {
        &self.assistant_encoder
    }

    pub fn assistant_decoder(&self) -> &AssistantDecoder {
        &self.assistant_decoder
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    /// Trainable groups in a fixed order, with their checkpoint prefixes.
    pub fn groups(&self) -> [(&'static str, &ParamSet); 3] {
        [
            ("assistant_encoder", self.assistant_encoder.params()),
            ("assistant_decoder", self.assistant_decoder.params()),
            ("classifier", self.classifier.params()),
        ]
    }

    fn fused_encoder(&self, cond: &ConditionTriple, ts: &[usize], labels: &[u32], last: usize, g: Grad) -> Result<(Tensor, Vec<Tensor>)> {
        self.frozen.check_input(&cond.x_noisy, ts, labels)?;
        let assist = self.assistant_encoder.forward(cond, ts, labels, g)?;
        let emb = self.frozen.embed(ts, labels, Grad::Frozen)?;
        let stages = self.frozen.encode(&cond.x_noisy, &emb, Some(&assist), last, Grad::Frozen)?;
        Ok((emb, stages))
    }

    /// Raw logits for noisy images `x_noisy` under the given conditioning.
    pub fn score(
        &self,
        x_noisy: &Tensor,
        x_bg: &Tensor,
        mask_ds: &Tensor,
        ts: &[usize],
        labels: &[u32],
        g: Grad,
    ) -> Result<Tensor> {
        let cond = ConditionTriple::new(x_bg.clone(), x_noisy.clone(), mask_ds.clone())?;
        let (_, stages) = self.fused_encoder(&cond, ts, labels, self.read_stage, g)?;
        self.classifier.forward(&stages[self.read_stage], g)
    }

    /// ε-prediction of the assistant decoder for a (fake) noisy image.
    pub fn assistant_denoise(
        &self,
        x_noisy: &Tensor,
        x_bg: &Tensor,
        mask_ds: &Tensor,
        ts: &[usize],
        labels: &[u32],
        g: Grad,
    ) -> Result<Tensor> {
        let cond = ConditionTriple::new(x_bg.clone(), x_noisy.clone(), mask_ds.clone())?;
        let last = self.frozen.config().num_stages() - 1;
        let (emb, stages) = self.fused_encoder(&cond, ts, labels, last, g)?;
        self.assistant_decoder.decoder.forward(x_noisy, &stages, &emb, None, g)
    }

    /// [`score`](Self::score) and [`assistant_denoise`](Self::assistant_denoise)
    /// sharing one encoder pass.
    pub fn score_and_denoise(&self, cond: &ConditionTriple, ts: &[usize], labels: &[u32], g: Grad) -> Result<FakePass> {
        let last = self.frozen.config().num_stages() - 1;
        let (emb, stages) = self.fused_encoder(cond, ts, labels, last, g)?;
        let logits = self.classifier.forward(&stages[self.read_stage], g)?;
        let eps = self.assistant_decoder.decoder.forward(&cond.x_noisy, &stages, &emb, None, g)?;
        Ok(FakePass { logits, eps })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Role;
    use candle_core::{DType, Device};

    fn cfg() -> BackboneConfig {
        BackboneConfig {
            image_size: 32,
            in_channels: 3,
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            blocks_per_stage: 1,
            num_labels: 18,
            norm_groups: 2,
        }
    }

    fn flat(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn classifier_structure() {
        let c = Classifier::new(4, 2, 0);
        assert_eq!(c.num_convs(), 5);
        let x = Tensor::randn(0f32, 1.0, (3, 4, 32, 32), &Device::Cpu).unwrap();
        let (logits, trace) = c.forward_traced(&x, Grad::Frozen).unwrap();
        assert_eq!(trace, vec![16, 8, 4, 2, 1]);
        assert_eq!(logits.dims(), &[3]);
        let bad = Tensor::zeros((1, 4, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(c.forward(&bad, Grad::Frozen), Err(Error::WrongSpatialSize(16, 16))));
    }

    #[test]
    fn zero_input_gives_zero_logit() {
        let c = Classifier::new(4, 2, 0);
        let x = Tensor::zeros((2, 4, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(flat(&c.forward(&x, Grad::Frozen).unwrap()), vec![0.0, 0.0]);
    }

    #[test]
    fn fresh_assistant_ignores_conditioning() {
        let cfg = cfg();
        let slow = Arc::new(Backbone::new(&cfg, Role::Slow, 1).unwrap());
        let d = Discriminator::new(slow.clone(), 2).unwrap();
        // give the classifier a non-trivial head so logits are not identically zero
        let last = d.classifier().params().get("conv4.weight").unwrap();
        last.set(&Tensor::randn(0f32, 0.1, last.dims(), &Device::Cpu).unwrap()).unwrap();

        let dev = Device::Cpu;
        let x = Tensor::randn(0f32, 1.0, (2, 3, 32, 32), &dev).unwrap();
        let bg1 = Tensor::randn(0f32, 1.0, (2, 3, 32, 32), &dev).unwrap();
        let bg2 = Tensor::zeros((2, 3, 32, 32), DType::F32, &dev).unwrap();
        let m1 = Tensor::zeros((2, 1, 32, 32), DType::F32, &dev).unwrap();
        let m2 = Tensor::ones((2, 1, 32, 32), DType::F32, &dev).unwrap();
        let s1 = d.score(&x, &bg1, &m1, &[10, 500], &[0, 1], Grad::Frozen).unwrap();
        let s2 = d.score(&x, &bg2, &m2, &[10, 500], &[0, 1], Grad::Frozen).unwrap();
        assert_eq!(s1.dims(), &[2]);
        assert_eq!(flat(&s1), flat(&s2));

        // identical to classifying the plain frozen encoder features
        let emb = slow.embed(&[10, 500], &[0, 1], Grad::Frozen).unwrap();
        let plain = slow.encode(&x, &emb, None, 0, Grad::Frozen).unwrap();
        let direct = d.classifier().forward(&plain[0], Grad::Frozen).unwrap();
        assert_eq!(flat(&s1), flat(&direct));
    }

    #[test]
    fn shared_pass_matches_separate_calls() {
        let cfg = cfg();
        let slow = Arc::new(Backbone::new(&cfg, Role::Slow, 1).unwrap());
        let d = Discriminator::new(slow, 2).unwrap();
        let dev = Device::Cpu;
        let x = Tensor::randn(0f32, 1.0, (1, 3, 32, 32), &dev).unwrap();
        let bg = Tensor::randn(0f32, 1.0, (1, 3, 32, 32), &dev).unwrap();
        let m = Tensor::zeros((1, 1, 32, 32), DType::F32, &dev).unwrap();
        let eps = d.assistant_denoise(&x, &bg, &m, &[40], &[3], Grad::Frozen).unwrap();
        assert_eq!(eps.dims(), x.dims());
        let cond = ConditionTriple::new(bg.clone(), x.clone(), m.clone()).unwrap();
        let both = d.score_and_denoise(&cond, &[40], &[3], Grad::Frozen).unwrap();
        assert_eq!(flat(&both.eps), flat(&eps));
        assert_eq!(flat(&both.logits), flat(&d.score(&x, &bg, &m, &[40], &[3], Grad::Frozen).unwrap()));
    }

    #[test]
    fn frozen_encoder_gets_no_gradient() {
        let cfg = cfg();
        let slow = Arc::new(Backbone::new(&cfg, Role::Slow, 1).unwrap());
        let d = Discriminator::new(slow.clone(), 2).unwrap();
        let dev = Device::Cpu;
        let x = Tensor::randn(0f32, 1.0, (1, 3, 32, 32), &dev).unwrap();
        let m = Tensor::zeros((1, 1, 32, 32), DType::F32, &dev).unwrap();
        let eps = d.assistant_denoise(&x, &x, &m, &[40], &[3], Grad::Track).unwrap();
        let grads = eps.sqr().unwrap().mean_all().unwrap().backward().unwrap();
        assert!(slow.params().iter().all(|(_, v)| grads.get(v.as_tensor()).is_none()));
        assert!(d.assistant_decoder().params().iter().any(|(_, v)| grads.get(v.as_tensor()).is_some()));
    }

    #[test]
    fn needs_a_32_pixel_stage() {
        let mut c = cfg();
        c.image_size = 16;
        let slow = Arc::new(Backbone::new(&c, Role::Slow, 1).unwrap());
        assert!(matches!(Discriminator::new(slow, 0), Err(Error::Config(_))));
    }
}
