//! Few-step inpainting and the evaluation harness.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{downsample_mask, make_background, Adapter, ConditionTriple};
use crate::backbone::Backbone;
use crate::data::{decode_label, derive_seed, Image, InpaintSample, Mask, ShapeKind, NUM_COLORS, PALETTE};
use crate::kernels::Exec;
use crate::nn::Grad;
use crate::schedule::{lcm_timesteps, NoiseSchedule};
use crate::trainer::gaussian;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub steps: usize,
    pub paste_back: bool,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { steps: 4, paste_back: true, seed: 0 }
    }
}

impl InferenceConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > schedule.lcm_steps().len() {
            return Err(Error::InvalidCount(format!(
                "steps must be in 1..={}, got {}",
                schedule.lcm_steps().len(),
                self.steps
            )));
        }
        Ok(())
    }
}

/// Called once per backbone ε-prediction during [`inpaint_with_hook`].
pub trait EvalHook {
    fn on_backbone_eval(&self, t: usize);
}

/// Counts backbone evaluations.
#[derive(Debug, Default)]
pub struct EvalCounter(AtomicU64);

impl EvalCounter {
    pub fn count(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

impl EvalHook for EvalCounter {
    fn on_backbone_eval(&self, _t: usize) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InpaintOutput {
    pub image: Image,
    pub backbone_evals: u64,
}

/// `(1 − hole) ⊙ x0 + hole ⊙ generated`, done by selection so background
/// pixels are copied bit for bit.
pub fn paste_back(x0: &Image, generated: &Image, hole: &Mask) -> Result<Image> {
    let (c, h, w) = x0.shape();
    if generated.shape() != (c, h, w) || (hole.height(), hole.width()) != (h, w) {
        return Err(Error::shape(x0.shape(), generated.shape()));
    }
    let mut out = x0.clone();
    for y in 0..h {
        for x in 0..w {
            if hole.get(y, x) == 1 {
                for ch in 0..c {
                    out.set(ch, y, x, generated.get(ch, y, x));
                }
            }
        }
    }
    Ok(out)
}

/// Few-step inpainting from pure noise with the fast generator.
pub fn inpaint(
    adapter: &Adapter,
    fast: &Backbone,
    sample: &InpaintSample,
    cfg: &InferenceConfig,
    schedule: &NoiseSchedule,
) -> Result<InpaintOutput> {
    let counter = EvalCounter::default();
    let image = inpaint_with_hook(adapter, fast, sample, cfg, schedule, &counter)?;
    Ok(InpaintOutput { image, backbone_evals: counter.count() })
}

pub fn inpaint_with_hook(
    adapter: &Adapter,
    fast: &Backbone,
    sample: &InpaintSample,
    cfg: &InferenceConfig,
    schedule: &NoiseSchedule,
    hook: &dyn EvalHook,
) -> Result<Image> {
    cfg.validate(schedule)?;
    if adapter.config() != fast.config() {
        return Err(Error::Unloaded("adapter and backbone architectures differ".into()));
    }
    let steps = lcm_timesteps(schedule, cfg.steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, sample.seed));
    let x0 = sample.x0.to_tensor()?.unsqueeze(0)?;
    let hole = sample.hole_mask.to_tensor()?.unsqueeze(0)?;
    let x_bg = make_background(&x0, &hole)?;
    let mask_ds = downsample_mask(&hole, 1)?;
    let labels = [sample.label];

    let mut x = gaussian(&mut rng, x0.dims())?;
    let mut x0_hat = x.clone();
    for (i, &t) in steps.iter().enumerate() {
        let ts = [t];
        let cond = ConditionTriple::new(x_bg.clone(), x.clone(), mask_ds.clone())?;
        let feats = adapter.forward(&cond, &ts, &labels, Grad::Frozen)?;
        let eps = fast.eps_predict(&x, &ts, &labels, Some(&feats), Grad::Frozen)?;
        hook.on_backbone_eval(t);
        x0_hat = schedule.predict_x0(&x, &eps, &ts)?;
        if let Some(&next) = steps.get(i + 1) {
            let fresh = gaussian(&mut rng, x0.dims())?;
            x = schedule.renoise(&x0_hat, &fresh, &[next])?;
        }
    }
    let generated = Image::from_tensor(&x0_hat.squeeze(0)?)?;
    if cfg.paste_back {
        paste_back(&sample.x0, &generated, &sample.hole_mask)
    } else {
        Ok(generated)
    }
}

/// Mean squared error over the background `(1 − hole)` and over the hole.
/// An empty region scores 0.
pub fn eval_region_mse(output: &Image, x0: &Image, hole: &Mask) -> Result<(f64, f64)> {
    let (c, h, w) = x0.shape();
    if output.shape() != (c, h, w) || (hole.height(), hole.width()) != (h, w) {
        return Err(Error::shape(x0.shape(), output.shape()));
    }
    let (mut bg, mut hl, mut n_bg, mut n_hl) = (0.0f64, 0.0f64, 0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            let inside = hole.get(y, x) == 1;
            for ch in 0..c {
                let d = (output.get(ch, y, x) - x0.get(ch, y, x)) as f64;
                if inside {
                    hl += d * d;
                    n_hl += 1;
                } else {
                    bg += d * d;
                    n_bg += 1;
                }
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok((mean(bg, n_bg), mean(hl, n_hl)))
}

const COLOR_RADIUS: f32 = 0.6;
const MIN_COLOR_PIXELS: usize = 6;
const SQUARE_FILL: f64 = 0.88;
const TRIANGLE_OFFSET: f64 = 0.06;

/// Dominant palette colour inside the hole and the pixels that carry it.
fn dominant_color(output: &Image, hole: &Mask) -> Option<(usize, Vec<(usize, usize)>)> {
    let mut members: Vec<Vec<(usize, usize)>> = vec![Vec::new(); NUM_COLORS];
    for y in 0..hole.height() {
        for x in 0..hole.width() {
            if hole.get(y, x) == 0 {
                continue;
            }
            let p = output.pixel(y, x);
            let nearest = PALETTE
                .iter()
                .enumerate()
                .map(|(i, q)| (i, p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f32>().sqrt()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("non-empty palette");
            if nearest.1 <= COLOR_RADIUS {
                members[nearest.0].push((y, x));
            }
        }
    }
    let (color, px) = members.into_iter().enumerate().max_by_key(|(i, m)| (m.len(), usize::MAX - i))?;
    (px.len() >= MIN_COLOR_PIXELS).then_some((color, px))
}

/// Shape from bounding-box fill ratio and vertical centroid offset.
fn classify_shape(px: &[(usize, usize)]) -> ShapeKind {
    let (y0, y1) = px.iter().fold((usize::MAX, 0), |(a, b), &(y, _)| (a.min(y), b.max(y)));
    let (x0, x1) = px.iter().fold((usize::MAX, 0), |(a, b), &(_, x)| (a.min(x), b.max(x)));
    let bbox_h = (y1 - y0 + 1) as f64;
    let fill = px.len() as f64 / (bbox_h * (x1 - x0 + 1) as f64);
    if fill > SQUARE_FILL {
        return ShapeKind::Square;
    }
    let centroid = px.iter().map(|&(y, _)| y as f64).sum::<f64>() / px.len() as f64;
    let offset = (centroid - (y0 + y1) as f64 / 2.0) / bbox_h;
    if offset > TRIANGLE_OFFSET {
        ShapeKind::Triangle
    } else {
        ShapeKind::Circle
    }
}

/// Whether the object painted into the hole has the label's colour and shape.
pub fn eval_label_match(output: &Image, hole: &Mask, label: u32) -> bool {
    let Ok((shape, color)) = decode_label(label) else {
        return false;
    };
    match dominant_color(output, hole) {
        Some((c, px)) => c == color && classify_shape(&px) == shape,
        None => false,
    }
}

/// Which group of the report a metric belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Mask,
    Whole,
}

/// A named scalar metric over (output image, sample).
pub trait MetricPlugin: Send + Sync {
    fn name(&self) -> &str;
    fn region(&self) -> Region;
    fn compute(&self, output: &Image, sample: &InpaintSample) -> std::result::Result<f64, String>;
}

/// Something that turns a sample into an inpainted image.
pub trait InpaintModel: Sync {
    fn run(&self, sample: &InpaintSample, cfg: &InferenceConfig) -> Result<InpaintOutput>;
}

pub struct FastGenerator<'a> {
    pub adapter: &'a Adapter,
    pub fast: &'a Backbone,
    pub schedule: &'a NoiseSchedule,
}

impl InpaintModel for FastGenerator<'_> {
    fn run(&self, sample: &InpaintSample, cfg: &InferenceConfig) -> Result<InpaintOutput> {
        inpaint(self.adapter, self.fast, sample, cfg, self.schedule)
    }
}

/// Fixture model that returns the ground truth.
pub struct IdentityModel;

impl InpaintModel for IdentityModel {
    fn run(&self, sample: &InpaintSample, _cfg: &InferenceConfig) -> Result<InpaintOutput> {
        Ok(InpaintOutput { image: sample.x0.clone(), backbone_evals: 0 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub index: usize,
    pub seed: u64,
    pub label: u32,
    pub backbone_evals: u64,
    pub label_match: bool,
    pub mask_region: BTreeMap<String, f64>,
    pub whole_image: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub plugin_errors: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mask_region: BTreeMap<String, f64>,
    pub whole_image: BTreeMap<String, f64>,
    pub label_match_rate: f64,
    pub plugin_failures: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_samples: usize,
    pub inference: InferenceConfig,
    pub samples: Vec<SampleReport>,
    pub aggregate: Aggregate,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

fn evaluate_one(
    model: &dyn InpaintModel,
    index: usize,
    sample: &InpaintSample,
    cfg: &InferenceConfig,
    plugins: &[&dyn MetricPlugin],
) -> Result<(SampleReport, Image)> {
    let out = model.run(sample, cfg)?;
    let (bg, hole) = eval_region_mse(&out.image, &sample.x0, &sample.hole_mask)?;
    let (whole, _) = eval_region_mse(&out.image, &sample.x0, &Mask::zeros(sample.hole_mask.height(), sample.hole_mask.width()))?;
    let mut report = SampleReport {
        index,
        seed: sample.seed,
        label: sample.label,
        backbone_evals: out.backbone_evals,
        label_match: eval_label_match(&out.image, &sample.hole_mask, sample.label),
        mask_region: BTreeMap::from([("mse".to_string(), hole)]),
        whole_image: BTreeMap::from([("mse".to_string(), whole), ("bg_mse".to_string(), bg)]),
        plugin_errors: BTreeMap::new(),
    };
    for p in plugins {
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| p.compute(&out.image, sample)))
            .unwrap_or_else(|_| Err("plug-in panicked".to_string()))
            .and_then(|v| if v.is_finite() { Ok(v) } else { Err(format!("non-finite value {v}")) });
        match result {
            Ok(v) => {
                let group = match p.region() {
                    Region::Mask => &mut report.mask_region,
                    Region::Whole => &mut report.whole_image,
                };
                group.insert(p.name().to_string(), v);
            }
            Err(e) => {
                report.plugin_errors.insert(p.name().to_string(), e);
            }
        }
    }
    Ok((report, out.image))
}

fn mean_by_key<'a>(maps: impl Iterator<Item = &'a BTreeMap<String, f64>>) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for m in maps {
        for (k, v) in m {
            let e = acc.entry(k.clone()).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Runs the model on every sample and aggregates metrics. Per-sample work may
/// run in parallel; results are merged by sample index. Returns the outputs
/// alongside the report.
pub fn run_eval_with_outputs(
    model: &dyn InpaintModel,
    benchset: &[InpaintSample],
    plugins: &[&dyn MetricPlugin],
    cfg: &InferenceConfig,
    exec: Exec,
) -> Result<(EvalReport, Vec<Image>)> {
    if benchset.is_empty() {
        return Err(Error::InvalidCount("empty benchmark set".into()));
    }
    let work = |(i, s): (usize, &InpaintSample)| evaluate_one(model, i, s, cfg, plugins);
    let results: Vec<Result<(SampleReport, Image)>> = match exec {
        Exec::Sequential => benchset.iter().enumerate().map(work).collect(),
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            benchset.par_iter().enumerate().map(work).collect()
        }
    };
    let (samples, images): (Vec<SampleReport>, Vec<Image>) = results.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    let mut plugin_failures = BTreeMap::new();
    for s in &samples {
        for k in s.plugin_errors.keys() {
            *plugin_failures.entry(k.clone()).or_insert(0) += 1;
        }
    }
    let aggregate = Aggregate {
        mask_region: mean_by_key(samples.iter().map(|s| &s.mask_region)),
        whole_image: mean_by_key(samples.iter().map(|s| &s.whole_image)),
        label_match_rate: samples.iter().filter(|s| s.label_match).count() as f64 / samples.len() as f64,
        plugin_failures,
    };
    Ok((EvalReport { num_samples: samples.len(), inference: cfg.clone(), samples, aggregate }, images))
}

pub fn run_eval(
    model: &dyn InpaintModel,
    benchset: &[InpaintSample],
    plugins: &[&dyn MetricPlugin],
    cfg: &InferenceConfig,
) -> Result<EvalReport> {
    Ok(run_eval_with_outputs(model, benchset, plugins, cfg, Exec::default())?.0)
}

fn to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

/// Writes a PNG with three panels: masked input, ground truth with a red
/// overlay on the hole, and the output. Each pixel is scaled up `zoom` times.
pub fn write_triptych(path: &Path, sample: &InpaintSample, output: &Image, zoom: u32) -> Result<()> {
    let (_, h, w) = sample.x0.shape();
    let (h32, w32) = (h as u32, w as u32);
    let mut img = image::RgbImage::new(3 * w32 * zoom, h32 * zoom);
    for y in 0..h {
        for x in 0..w {
            let hole = sample.hole_mask.get(y, x) == 1;
            let truth = sample.x0.pixel(y, x).map(to_u8);
            let input = if hole { [128, 128, 128] } else { truth };
            let overlay = if hole { [255, truth[1] / 2, truth[2] / 2] } else { truth };
            let out = output.pixel(y, x).map(to_u8);
            for (panel, rgb) in [input, overlay, out].into_iter().enumerate() {
                for dy in 0..zoom {
                    for dx in 0..zoom {
                        let px = (panel as u32 * w32 + x as u32) * zoom + dx;
                        img.put_pixel(px, y as u32 * zoom + dy, image::Rgb(rgb));
                    }
                }
            }
        }
    }
    let mut bytes = std::io::Cursor::new(Vec::new());
    img.write_to(&mut bytes, image::ImageFormat::Png)?;
    crate::io::write_atomic(path, bytes.get_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, Role};
    use crate::data::{synth_sample, ShapeKind};
    use crate::schedule::ScheduleConfig;

    fn tiny() -> (Adapter, Backbone, NoiseSchedule) {
        let cfg = BackboneConfig { base_channels: 4, channel_multipliers: vec![1, 2], blocks_per_stage: 1, norm_groups: 2, ..Default::default() };
        let fast = Backbone::new(&cfg, Role::Fast, 3).unwrap();
        let adapter = Adapter::from_backbone(&fast, 4).unwrap();
        (adapter, fast, ScheduleConfig::default().build().unwrap())
    }

    #[test]
    fn four_evaluations_and_exact_paste_back() {
        let (adapter, fast, schedule) = tiny();
        let s = synth_sample(5);
        let out = inpaint(&adapter, &fast, &s, &InferenceConfig::default(), &schedule).unwrap();
        assert_eq!(out.backbone_evals, 4);
        for y in 0..32 {
            for x in 0..32 {
                if s.hole_mask.get(y, x) == 0 {
                    for c in 0..3 {
                        assert_eq!(out.image.get(c, y, x).to_bits(), s.x0.get(c, y, x).to_bits());
                    }
                }
            }
        }
        let again = inpaint(&adapter, &fast, &s, &InferenceConfig::default(), &schedule).unwrap();
        assert_eq!(again, out);
        let two = InferenceConfig { steps: 2, ..Default::default() };
        assert_eq!(inpaint(&adapter, &fast, &s, &two, &schedule).unwrap().backbone_evals, 2);
        let bad = InferenceConfig { steps: 5, ..Default::default() };
        assert!(inpaint(&adapter, &fast, &s, &bad, &schedule).is_err());
    }

    #[test]
    fn region_mse_fixtures() {
        let s = synth_sample(8);
        assert_eq!(eval_region_mse(&s.x0, &s.x0, &s.hole_mask).unwrap(), (0.0, 0.0));
        let shifted = Image::from_vec(3, 32, 32, s.x0.data().iter().map(|v| v + 0.5).collect()).unwrap();
        let (bg, hole) = eval_region_mse(&shifted, &s.x0, &s.hole_mask).unwrap();
        assert!((bg - 0.25).abs() < 1e-6 && (hole - 0.25).abs() < 1e-6);
        let pasted = paste_back(&s.x0, &shifted, &s.hole_mask).unwrap();
        assert_eq!(eval_region_mse(&pasted, &s.x0, &s.hole_mask).unwrap().0, 0.0);
    }

    #[test]
    fn label_match_heuristic() {
        let mut hits = 0;
        for seed in 0..200 {
            let s = synth_sample(seed);
            hits += eval_label_match(&s.x0, &s.hole_mask, s.label) as usize;
            // a hole filled with background colours never matches
            let mut plain = s.x0.clone();
            for y in 0..32 {
                for x in 0..32 {
                    if s.hole_mask.get(y, x) == 1 {
                        for c in 0..3 {
                            plain.set(c, y, x, s.x0.get(c, 0, 0));
                        }
                    }
                }
            }
            assert!((0..18).all(|l| !eval_label_match(&plain, &s.hole_mask, l)));
        }
        assert_eq!(hits, 200);
    }

    #[test]
    fn circle_match_is_flip_symmetric() {
        for seed in 0..300 {
            let s = synth_sample(seed);
            if decode_label(s.label).unwrap().0 == ShapeKind::Circle {
                let a = eval_label_match(&s.x0, &s.hole_mask, s.label);
                let b = eval_label_match(&s.x0.flip_horizontal(), &s.hole_mask.flip_horizontal(), s.label);
                assert_eq!(a, b);
            }
        }
    }

    struct Failing;
    impl MetricPlugin for Failing {
        fn name(&self) -> &str {
            "failing"
        }
        fn region(&self) -> Region {
            Region::Mask
        }
        fn compute(&self, _: &Image, s: &InpaintSample) -> std::result::Result<f64, String> {
            if s.label.is_multiple_of(2) {
                Err("even label".into())
            } else {
                Ok(1.0)
            }
        }
    }

    #[test]
    fn identity_report_and_plugins() {
        let set: Vec<InpaintSample> = (0..6).map(synth_sample).collect();
        let report = run_eval(&IdentityModel, &set, &[], &InferenceConfig::default()).unwrap();
        assert_eq!(report.aggregate.whole_image["bg_mse"], 0.0);
        assert_eq!(report.aggregate.label_match_rate, 1.0);
        let json = serde_json::to_string(&report).unwrap();
        assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), report);

        let failing = Failing;
        let with: Vec<&dyn MetricPlugin> = vec![&failing];
        let seq = run_eval_with_outputs(&IdentityModel, &set, &with, &InferenceConfig::default(), Exec::Sequential).unwrap().0;
        let par = run_eval(&IdentityModel, &set, &with, &InferenceConfig::default()).unwrap();
        assert_eq!(seq, par);
        let failures = set.iter().filter(|s| s.label % 2 == 0).count();
        assert_eq!(par.aggregate.plugin_failures.get("failing").copied().unwrap_or(0), failures);
        assert!(run_eval(&IdentityModel, &[], &[], &InferenceConfig::default()).is_err());
    }

    #[test]
    fn triptych_png() {
        let dir = tempfile::tempdir().unwrap();
        let s = synth_sample(1);
        let p = dir.path().join("t.png");
        write_triptych(&p, &s, &s.x0, 2).unwrap();
        let img = image::open(&p).unwrap();
        assert_eq!((img.width(), img.height()), (192, 64));
    }
}
