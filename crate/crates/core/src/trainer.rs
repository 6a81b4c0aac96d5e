//! The alternating three-step optimisation loop, backbone pretraining, and
//! checkpoint/resume.
//!
//! One *iteration* is one optimizer update. A full cycle is three iterations:
//! the adapter through the slow generator, the adapter through the fast
//! generator under the discriminator's critique, then the discriminator. Each
//! iteration accumulates `grad_accum` micro-batches of its own kind.
//!
//! All randomness of a micro-batch comes from a generator seeded by
//! `(seed, iteration, micro_batch)`, so no RNG state has to be carried between
//! iterations and a resumed run replays exactly.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapter::{downsample_mask, generate_one_step, make_background, Adapter, ConditionTriple};
use crate::backbone::{Backbone, BackboneConfig, Role};
use crate::checkpoint::{Checkpoint, Kind};
use crate::data::{derive_seed, stack_batch, synth_dataset, DataConfig, InpaintSample};
use crate::discriminator::Discriminator;
use crate::kernels::Exec;
use crate::losses::{self, LossWeights};
use crate::nn::{Grad, ParamSet};
use crate::optim::{AdamW, AdamWConfig};
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::{Error, Result};

/// Scalar training hyperparameters (the `[train]` section of a config file).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainParams {
    pub learning_rate: f64,
    /// Discriminator learning rate; `learning_rate` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub disc_learning_rate: Option<f64>,
    pub batch_size: usize,
    pub grad_accum: usize,
    /// Optimizer updates in the whole run (three per full cycle).
    pub total_iterations: u64,
    pub seed: u64,
    /// Write a checkpoint every this many iterations; 0 disables.
    pub checkpoint_interval: u64,
    /// Train the adapter through the slow generator only, with no discriminator.
    pub baseline: bool,
    pub weights: LossWeights,
    pub optimizer: AdamWConfig,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            disc_learning_rate: None,
            batch_size: 2,
            grad_accum: 4,
            total_iterations: 2000,
            seed: 0,
            checkpoint_interval: 500,
            baseline: false,
            weights: LossWeights::default(),
            optimizer: AdamWConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    /// Start the adapter encoder (and the discriminator's assistant encoder)
    /// from the slow backbone's encoder weights instead of a random draw.
    pub init_from_backbone: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { init_from_backbone: true }
    }
}

/// Everything a training run depends on.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub params: TrainParams,
    pub schedule: ScheduleConfig,
    pub backbone: BackboneConfig,
    pub adapter: AdapterConfig,
    pub data: DataConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        if p.batch_size == 0 || p.grad_accum == 0 {
            return Err(Error::InvalidCount("batch_size and grad_accum must be positive".into()));
        }
        if p.total_iterations == 0 {
            return Err(Error::InvalidCount("total_iterations must be positive".into()));
        }
        if !(p.learning_rate >= 0.0 && p.learning_rate.is_finite()) {
            return Err(Error::InvalidRange(format!("learning_rate {}", p.learning_rate)));
        }
        if let Some(lr) = p.disc_learning_rate.filter(|lr| !(*lr >= 0.0 && lr.is_finite())) {
            return Err(Error::InvalidRange(format!("disc_learning_rate {lr}")));
        }
        if self.data.train_size == 0 {
            return Err(Error::InvalidCount("data.train_size must be positive".into()));
        }
        p.weights.validate()?;
        self.backbone.validate()?;
        self.schedule.build()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Slow,
    Fast,
    Disc,
}

impl StepKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StepKind::Slow => "slow",
            StepKind::Fast => "fast",
            StepKind::Disc => "disc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub step_kind: StepKind,
    pub loss_name: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    pub records: Vec<LossRecord>,
}

impl LossLog {
    pub fn push(&mut self, iteration: u64, step_kind: StepKind, loss_name: &str, value: f64) {
        self.records.push(LossRecord { iteration, step_kind, loss_name: loss_name.into(), value });
    }

    pub fn values(&self, loss_name: &str) -> Vec<f64> {
        self.records.iter().filter(|r| r.loss_name == loss_name).map(|r| r.value).collect()
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_csv()?)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let records = r.deserialize().collect::<std::result::Result<Vec<LossRecord>, _>>()?;
        Ok(Self { records })
    }

    /// Drops records after `iteration`.
    pub fn truncate_after(&mut self, iteration: u64) {
        self.records.retain(|r| r.iteration <= iteration);
    }
}

/// Outcome of one optimizer update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub iteration: u64,
    pub kind: StepKind,
    /// Per-loss means over the micro-batches.
    pub losses: Vec<(&'static str, f64)>,
    /// Parameters outside the updated group that received a gradient.
    pub foreign_grads: usize,
}

pub(crate) fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize]) -> Result<Tensor> {
    let n = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?)
}

fn micro_rng(seed: u64, iteration: u64, micro: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, iteration), micro as u64))
}

struct Batch {
    x0: Tensor,
    hole: Tensor,
    labels: Vec<u32>,
    x_bg: Tensor,
    mask_ds: Tensor,
}

impl Batch {
    fn draw(data: &[InpaintSample], n: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let picks: Vec<&InpaintSample> = (0..n).map(|_| &data[rng.gen_range(0..data.len())]).collect();
        Self::from_samples(&picks)
    }

    fn from_samples(samples: &[&InpaintSample]) -> Result<Self> {
        let (x0, hole, labels) = stack_batch(samples)?;
        let x_bg = make_background(&x0, &hole)?;
        let mask_ds = downsample_mask(&hole, 1)?;
        Ok(Self { x0, hole, labels, x_bg, mask_ds })
    }

    fn cond(&self, x_noisy: Tensor) -> Result<ConditionTriple> {
        ConditionTriple::new(self.x_bg.clone(), x_noisy, self.mask_ds.clone())
    }

    fn len(&self) -> usize {
        self.labels.len()
    }
}

fn uniform_ts(rng: &mut ChaCha8Rng, n: usize, total: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..total)).collect()
}

fn pick_ts(rng: &mut ChaCha8Rng, n: usize, from: &[usize]) -> Vec<usize> {
    (0..n).map(|_| from[rng.gen_range(0..from.len())]).collect()
}

fn count_grads(set: &ParamSet, grads: &candle_core::backprop::GradStore) -> usize {
    set.iter().filter(|(_, v)| grads.get(v.as_tensor()).is_some()).count()
}

pub struct Trainer {
    cfg: TrainConfig,
    schedule: NoiseSchedule,
    slow: Arc<Backbone>,
    fast: Arc<Backbone>,
    adapter: Adapter,
    disc: Option<Discriminator>,
    opt_adapter: AdamW,
    opt_disc: Option<AdamW>,
    data: Vec<InpaintSample>,
    iteration: u64,
    log: LossLog,
}

impl Trainer {
    /// Fresh state around two (typically pretrained) backbones.
    pub fn new(cfg: TrainConfig, slow: Backbone, fast: Backbone) -> Result<Self> {
        cfg.validate()?;
        for b in [&slow, &fast] {
            if b.config() != &cfg.backbone {
                return Err(Error::Config("backbone architecture differs from the training config".into()));
            }
        }
        if slow.role() != Role::Slow || fast.role() != Role::Fast {
            return Err(Error::Config("backbones passed in the wrong roles".into()));
        }
        let schedule = cfg.schedule.build()?;
        let seed = cfg.params.seed;
        let slow = Arc::new(slow);
        let fast = Arc::new(fast);
        let adapter = if cfg.adapter.init_from_backbone {
            Adapter::from_backbone(&slow, derive_seed(seed, 1))?
        } else {
            Adapter::new(&cfg.backbone, derive_seed(seed, 1))?
        };
        let disc = if cfg.params.baseline { None } else { Some(Discriminator::new(slow.clone(), derive_seed(seed, 2))?) };
        if let (Some(d), false) = (&disc, cfg.adapter.init_from_backbone) {
            let fresh = Adapter::new(&cfg.backbone, derive_seed(seed, 3))?;
            d.assistant_encoder().params().copy_matching(fresh.params())?;
        }
        let p = &cfg.params;
        let opt_adapter = AdamW::new(adapter.params().clone(), p.learning_rate, p.optimizer);
        let opt_disc = disc.as_ref().map(|d| AdamW::new(ParamSet::merged(&d.groups()), p.disc_learning_rate.unwrap_or(p.learning_rate), p.optimizer));
        let data = synth_dataset(cfg.data.train_size, cfg.data.seed, Exec::default());
        Ok(Self { cfg, schedule, slow, fast, adapter, disc, opt_adapter, opt_disc, data, iteration: 0, log: LossLog::default() })
    }

    /// Fresh state with randomly initialised backbones.
    pub fn from_scratch(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let slow = Backbone::new(&cfg.backbone, Role::Slow, derive_seed(cfg.params.seed, 10))?;
        let fast = slow.duplicate(Role::Fast)?;
        Self::new(cfg, slow, fast)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn slow(&self) -> &Arc<Backbone> {
        &self.slow
    }

    pub fn fast(&self) -> &Arc<Backbone> {
        &self.fast
    }

    pub fn adapter(&self) -> &Adapter {
        &self.adapter
    }

    pub fn discriminator(&self) -> Option<&Discriminator> {
        self.disc.as_ref()
    }

    pub fn adapter_optimizer(&self) -> &AdamW {
        &self.opt_adapter
    }

    pub fn dataset(&self) -> &[InpaintSample] {
        &self.data
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn log(&self) -> &LossLog {
        &self.log
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.cfg.params.total_iterations
    }

    /// Step kind of the next update.
    pub fn next_kind(&self) -> StepKind {
        if self.disc.is_none() {
            return StepKind::Slow;
        }
        [StepKind::Slow, StepKind::Fast, StepKind::Disc][(self.iteration % 3) as usize]
    }

    /// Named parameter hashes of every component, for freeze checks.
    pub fn param_hashes(&self) -> Vec<(&'static str, String)> {
        let mut out = vec![
            ("backbone.slow", self.slow.params().hash()),
            ("backbone.fast", self.fast.params().hash()),
            ("adapter", self.adapter.params().hash()),
        ];
        if let Some(d) = &self.disc {
            out.push(("disc.assistant_encoder", d.assistant_encoder().params().hash()));
            out.push(("disc.assistant_decoder", d.assistant_decoder().params().hash()));
            out.push(("disc.classifier", d.classifier().params().hash()));
        }
        out
    }

    /// Runs one optimizer update of the next step kind.
    pub fn step(&mut self) -> Result<StepReport> {
        let kind = self.next_kind();
        let accum = self.cfg.params.grad_accum;
        let mut sums: Vec<(&'static str, f64)> = Vec::new();
        let mut foreign = 0;
        for micro in 0..accum {
            let mut rng = micro_rng(self.cfg.params.seed, self.iteration, micro);
            let batch = Batch::draw(&self.data, self.cfg.params.batch_size, &mut rng)?;
            let (losses, f) = match kind {
                StepKind::Slow => self.micro_slow(&batch, &mut rng)?,
                StepKind::Fast => self.micro_fast(&batch, &mut rng)?,
                StepKind::Disc => self.micro_disc(&batch, &mut rng)?,
            };
            foreign += f;
            if sums.is_empty() {
                sums = losses;
            } else {
                for (s, (_, v)) in sums.iter_mut().zip(losses) {
                    s.1 += v;
                }
            }
        }
        match kind {
            StepKind::Slow | StepKind::Fast => self.opt_adapter.step()?,
            StepKind::Disc => self.opt_disc.as_mut().expect("disc step implies a discriminator").step()?,
        }
        self.iteration += 1;
        let losses: Vec<(&'static str, f64)> = sums.into_iter().map(|(n, v)| (n, v / accum as f64)).collect();
        for (name, v) in &losses {
            self.log.push(self.iteration, kind, name, *v);
        }
        Ok(StepReport { iteration: self.iteration, kind, losses, foreign_grads: foreign })
    }

    /// Counts gradients that reached parameters outside `owner`.
    fn foreign(&self, owner: StepKind, grads: &candle_core::backprop::GradStore) -> usize {
        let mut n = count_grads(self.slow.params(), grads) + count_grads(self.fast.params(), grads);
        match owner {
            StepKind::Disc => n += count_grads(self.adapter.params(), grads),
            _ => {
                if let Some(d) = &self.disc {
                    n += d.groups().iter().map(|(_, set)| count_grads(set, grads)).sum::<usize>();
                }
            }
        }
        n
    }

    fn micro_slow(&mut self, b: &Batch, rng: &mut ChaCha8Rng) -> Result<(Vec<(&'static str, f64)>, usize)> {
        let n = b.len();
        let ts = uniform_ts(rng, n, self.schedule.num_timesteps());
        let eps = gaussian(rng, b.x0.dims())?;
        let x_t = self.schedule.add_noise(&b.x0, &eps, &ts)?;
        let feats = self.adapter.forward(&b.cond(x_t.clone())?, &ts, &b.labels, Grad::Track)?;
        let eps_pred = self.slow.eps_predict(&x_t, &ts, &b.labels, Some(&feats), Grad::Frozen)?;
        let loss = losses::real_diffusion_loss(&eps, &eps_pred)?;
        let grads = loss.backward()?;
        let foreign = self.foreign(StepKind::Slow, &grads);
        self.opt_adapter.accumulate(&grads)?;
        Ok((vec![("real_diffusion", losses::scalar(&loss)?)], foreign))
    }

    fn micro_fast(&mut self, b: &Batch, rng: &mut ChaCha8Rng) -> Result<(Vec<(&'static str, f64)>, usize)> {
        let disc = self.disc.as_ref().expect("fast step implies a discriminator");
        let n = b.len();
        let ts = pick_ts(rng, n, self.schedule.lcm_steps());
        let eps = gaussian(rng, b.x0.dims())?;
        let x_t = self.schedule.add_noise(&b.x0, &eps, &ts)?;
        let cond = b.cond(x_t.clone())?;
        let x0_hat =
            generate_one_step(&self.adapter, &self.fast, &x_t, &cond, &ts, &b.labels, &self.schedule, Grad::Track)?;
        let t_prime = uniform_ts(rng, n, self.schedule.num_timesteps());
        let eps_prime = gaussian(rng, b.x0.dims())?;
        let x_hat_t = self.schedule.renoise(&x0_hat, &eps_prime, &t_prime)?;
        let logits = disc.score(&x_hat_t, &b.x_bg, &b.mask_ds, &t_prime, &b.labels, Grad::Frozen)?;
        let l_gan = losses::generator_gan_loss(&logits)?;
        let l_bg = losses::background_loss(&b.x0, &x0_hat, &b.hole)?;
        let total = losses::combine_generator(&l_gan, &l_bg, &self.cfg.params.weights)?;
        let grads = total.backward()?;
        let foreign = self.foreign(StepKind::Fast, &grads);
        self.opt_adapter.accumulate(&grads)?;
        Ok((
            vec![
                ("generator_gan", losses::scalar(&l_gan)?),
                ("background", losses::scalar(&l_bg)?),
                ("generator_total", losses::scalar(&total)?),
            ],
            foreign,
        ))
    }

    fn micro_disc(&mut self, b: &Batch, rng: &mut ChaCha8Rng) -> Result<(Vec<(&'static str, f64)>, usize)> {
        let disc = self.disc.as_ref().expect("disc step implies a discriminator");
        let n = b.len();
        let ts = pick_ts(rng, n, self.schedule.lcm_steps());
        let eps = gaussian(rng, b.x0.dims())?;
        let x_t = self.schedule.add_noise(&b.x0, &eps, &ts)?;
        let cond = b.cond(x_t.clone())?;
        let x0_hat =
            generate_one_step(&self.adapter, &self.fast, &x_t, &cond, &ts, &b.labels, &self.schedule, Grad::Frozen)?
                .detach();
        let t_prime = uniform_ts(rng, n, self.schedule.num_timesteps());
        let eps_prime = gaussian(rng, b.x0.dims())?;
        let eps_real = gaussian(rng, b.x0.dims())?;
        let x_hat_t = self.schedule.renoise(&x0_hat, &eps_prime, &t_prime)?;
        let x_real_t = self.schedule.add_noise(&b.x0, &eps_real, &t_prime)?;
        let fake = disc.score_and_denoise(&cond.with_noisy(x_hat_t)?, &t_prime, &b.labels, Grad::Track)?;
        let real = disc.score(&x_real_t, &b.x_bg, &b.mask_ds, &t_prime, &b.labels, Grad::Track)?;
        let l_d = losses::discriminator_gan_loss(&real, &fake.logits)?;
        let l_fd = losses::fake_diffusion_loss(&eps_prime, &fake.eps)?;
        let total = losses::combine_discriminator(&l_fd, &l_d, &self.cfg.params.weights)?;
        let grads = total.backward()?;
        let foreign = self.foreign(StepKind::Disc, &grads);
        self.opt_disc.as_mut().expect("present").accumulate(&grads)?;
        Ok((
            vec![
                ("fake_diffusion", losses::scalar(&l_fd)?),
                ("discriminator_gan", losses::scalar(&l_d)?),
                ("discriminator_total", losses::scalar(&total)?),
            ],
            foreign,
        ))
    }

    /// Runs until `total_iterations`, checkpointing into `out_dir` when given.
    pub fn train(&mut self, out_dir: Option<&Path>) -> Result<()> {
        let interval = self.cfg.params.checkpoint_interval;
        while !self.is_done() {
            self.step().map_err(|e| Error::AtIteration { iteration: self.iteration, source: Box::new(e) })?;
            if let (Some(dir), true) = (out_dir, interval > 0 && self.iteration.is_multiple_of(interval)) {
                self.save(&checkpoint_path(dir, self.iteration))
                    .map_err(|e| Error::AtIteration { iteration: self.iteration, source: Box::new(e) })?;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(Kind::Train);
        ck.set_meta("config", serde_json::to_string(&self.cfg)?);
        ck.set_meta("iteration", self.iteration);
        ck.set_meta("rng", "counter-based: derived from (seed, iteration, micro_batch)");
        ck.set_meta("optim.adapter.step", self.opt_adapter.step_count());
        ck.insert_all(self.slow.params().export("backbone.slow."));
        ck.insert_all(self.fast.params().export("backbone.fast."));
        ck.insert_all(self.adapter.params().export("adapter."));
        ck.insert_all(self.opt_adapter.export_state("optim.adapter.")?);
        if let (Some(d), Some(o)) = (&self.disc, &self.opt_disc) {
            ck.set_meta("disc.frozen_encoder", "backbone.slow");
            for (name, set) in d.groups() {
                ck.insert_all(set.export(&format!("disc.{name}.")));
            }
            ck.set_meta("optim.disc.step", o.step_count());
            ck.insert_all(o.export_state("optim.disc.")?);
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    /// Rebuilds the exact training state stored in a checkpoint.
    pub fn resume(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load_kind(path, &[Kind::Train])?;
        let cfg: TrainConfig = serde_json::from_str(ck.meta("config")?)?;
        let (slow, fast) = backbones_from(&ck, &cfg.backbone)?;
        let mut t = Self::new(cfg, slow, fast)?;
        let get = |k: &str| ck.get(k);
        t.adapter.params().import("adapter.", get)?;
        t.opt_adapter.import_state("optim.adapter.", ck.meta_parse("optim.adapter.step")?, get)?;
        if let (Some(d), Some(o)) = (&t.disc, t.opt_disc.as_mut()) {
            if ck.meta("disc.frozen_encoder")? != "backbone.slow" {
                return Err(Error::Checkpoint("discriminator must reference backbone.slow".into()));
            }
            for (name, set) in d.groups() {
                set.import(&format!("disc.{name}."), get)?;
            }
            o.import_state("optim.disc.", ck.meta_parse("optim.disc.step")?, get)?;
        }
        t.iteration = ck.meta_parse("iteration")?;
        Ok(t)
    }

    /// Adapter weights plus the architecture needed to attach them.
    pub fn export_adapter(&self, path: &Path) -> Result<()> {
        adapter_checkpoint(&self.adapter, &self.cfg)?.save(path)
    }
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("checkpoint-{iteration:06}.safetensors"))
}

fn adapter_checkpoint(adapter: &Adapter, cfg: &TrainConfig) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(Kind::Adapter);
    ck.set_meta("config", serde_json::to_string(cfg)?);
    ck.insert_all(adapter.params().export("adapter."));
    Ok(ck)
}

/// Slow and fast backbones stored under `backbone.slow.` / `backbone.fast.`.
pub fn backbones_from(ck: &Checkpoint, cfg: &BackboneConfig) -> Result<(Backbone, Backbone)> {
    let slow = Backbone::new(cfg, Role::Slow, 0)?;
    let fast = Backbone::new(cfg, Role::Fast, 0)?;
    slow.params().import("backbone.slow.", |k| ck.get(k))?;
    fast.params().import("backbone.fast.", |k| ck.get(k))?;
    Ok((slow, fast))
}

/// Loads the backbone pair written by [`pretrain`] or by a training run.
pub fn load_backbones(path: &Path) -> Result<(Backbone, Backbone)> {
    let ck = Checkpoint::load_kind(path, &[Kind::Backbones, Kind::Train])?;
    let cfg: BackboneConfig = match ck.kind() {
        Kind::Train => serde_json::from_str::<TrainConfig>(ck.meta("config")?)?.backbone,
        _ => serde_json::from_str(ck.meta("backbone")?)?,
    };
    backbones_from(&ck, &cfg)
}

/// Fast generator pieces needed for inference.
pub struct InferenceBundle {
    pub config: TrainConfig,
    pub schedule: NoiseSchedule,
    pub fast: Backbone,
    pub adapter: Adapter,
}

impl InferenceBundle {
    /// From a training checkpoint (backbones and adapter in one file).
    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load_kind(path, &[Kind::Train])?;
        let config: TrainConfig = serde_json::from_str(ck.meta("config")?)?;
        let (_, fast) = backbones_from(&ck, &config.backbone)?;
        let adapter = Adapter::new(&config.backbone, 0)?;
        adapter.params().import("adapter.", |k| ck.get(k))?;
        let schedule = config.schedule.build()?;
        Ok(Self { config, schedule, fast, adapter })
    }
}

// ---------------------------------------------------------------------------
// Pretraining

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Plain denoising updates of the slow backbone over all timesteps.
    pub iterations: u64,
    /// Updates of the fast copy restricted to the few-step timesteps.
    pub fast_iterations: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { iterations: 2000, fast_iterations: 500, learning_rate: 2e-3, batch_size: 8, seed: 0 }
    }
}

pub struct Pretrained {
    pub slow: Backbone,
    pub fast: Backbone,
    pub log: LossLog,
}

impl Pretrained {
    pub fn to_checkpoint(&self, extra: &[(&str, String)]) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(Kind::Backbones);
        ck.set_meta("backbone", serde_json::to_string(self.slow.config())?);
        for (k, v) in extra {
            ck.set_meta(k, v);
        }
        ck.insert_all(self.slow.params().export("backbone.slow."));
        ck.insert_all(self.fast.params().export("backbone.fast."));
        Ok(ck)
    }
}

fn denoise_updates(
    net: &Backbone,
    schedule: &NoiseSchedule,
    data: &[InpaintSample],
    cfg: &PretrainConfig,
    timesteps: Option<&[usize]>,
    stream: u64,
    kind: StepKind,
    log: &mut LossLog,
    iterations: u64,
) -> Result<()> {
    let mut opt = AdamW::new(net.params().clone(), cfg.learning_rate, AdamWConfig { weight_decay: 0.0, ..Default::default() });
    for it in 0..iterations {
        let mut rng = micro_rng(derive_seed(cfg.seed, stream), it, 0);
        let b = Batch::draw(data, cfg.batch_size, &mut rng)?;
        let ts = match timesteps {
            Some(set) => pick_ts(&mut rng, b.len(), set),
            None => uniform_ts(&mut rng, b.len(), schedule.num_timesteps()),
        };
        let eps = gaussian(&mut rng, b.x0.dims())?;
        let x_t = schedule.add_noise(&b.x0, &eps, &ts)?;
        let pred = net.eps_predict(&x_t, &ts, &b.labels, None, Grad::Track)?;
        let loss = losses::real_diffusion_loss(&eps, &pred)?;
        opt.accumulate(&loss.backward()?)?;
        opt.step()?;
        log.push(it + 1, kind, "pretrain_diffusion", losses::scalar(&loss)?);
    }
    Ok(())
}

/// Manufactures a teacher pair: the slow backbone learns plain denoising over
/// all timesteps, then the fast backbone starts as its copy and is fine-tuned
/// on the few-step timesteps only.
pub fn pretrain(
    cfg: &PretrainConfig,
    backbone: &BackboneConfig,
    schedule_cfg: &ScheduleConfig,
    data_cfg: &DataConfig,
) -> Result<Pretrained> {
    backbone.validate()?;
    if cfg.batch_size == 0 || data_cfg.train_size == 0 {
        return Err(Error::InvalidCount("pretrain batch_size and data.train_size must be positive".into()));
    }
    let schedule = schedule_cfg.build()?;
    let data = synth_dataset(data_cfg.train_size, data_cfg.seed, Exec::default());
    let slow = Backbone::new(backbone, Role::Slow, derive_seed(cfg.seed, 10))?;
    let mut log = LossLog::default();
    denoise_updates(&slow, &schedule, &data, cfg, None, 0, StepKind::Slow, &mut log, cfg.iterations)?;
    let fast = slow.duplicate(Role::Fast)?;
    let steps = schedule.lcm_steps().to_vec();
    denoise_updates(&fast, &schedule, &data, cfg, Some(&steps), 1, StepKind::Fast, &mut log, cfg.fast_iterations)?;
    Ok(Pretrained { slow, fast, log })
}

// ---------------------------------------------------------------------------
// Diagnostics

/// Sign accuracy of the discriminator on real versus one-step fake samples
/// drawn from `samples`: a real logit above zero and a fake logit below zero
/// both count as correct.
pub fn discriminator_accuracy(trainer: &Trainer, samples: &[InpaintSample], seed: u64) -> Result<f64> {
    let disc = trainer.discriminator().ok_or_else(|| Error::Config("baseline run has no discriminator".into()))?;
    let s = trainer.schedule();
    let mut correct = 0usize;
    for (i, sample) in samples.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        let b = Batch::from_samples(&[sample])?;
        let ts = pick_ts(&mut rng, 1, s.lcm_steps());
        let eps = gaussian(&mut rng, b.x0.dims())?;
        let x_t = s.add_noise(&b.x0, &eps, &ts)?;
        let x0_hat = generate_one_step(
            trainer.adapter(),
            trainer.fast(),
            &x_t,
            &b.cond(x_t.clone())?,
            &ts,
            &b.labels,
            s,
            Grad::Frozen,
        )?;
        let t_prime = uniform_ts(&mut rng, 1, s.num_timesteps());
        let fake = s.renoise(&x0_hat, &gaussian(&mut rng, b.x0.dims())?, &t_prime)?;
        let real = s.add_noise(&b.x0, &gaussian(&mut rng, b.x0.dims())?, &t_prime)?;
        let lf = losses::scalar(&disc.score(&fake, &b.x_bg, &b.mask_ds, &t_prime, &b.labels, Grad::Frozen)?.sum_all()?)?;
        let lr = losses::scalar(&disc.score(&real, &b.x_bg, &b.mask_ds, &t_prime, &b.labels, Grad::Frozen)?.sum_all()?)?;
        correct += (lr > 0.0) as usize + (lf < 0.0) as usize;
    }
    Ok(correct as f64 / (2 * samples.len()) as f64)
}
