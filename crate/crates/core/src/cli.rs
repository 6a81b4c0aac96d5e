//! Subcommands of the `turbofill` binary.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::config::CliConfigFile;
use crate::data::bench::{read_record, write_record, BenchManifest};
use crate::data::{build_benchset, InpaintSample};
use crate::kernels::Exec;
use crate::pipeline::{run_eval_with_outputs, write_triptych, FastGenerator, IdentityModel, InferenceConfig, InpaintModel};
use crate::trainer::{load_backbones, pretrain, InferenceBundle, LossLog, Trainer};

#[derive(Debug, Parser)]
#[command(name = "turbofill", version, about = "Adversarial few-step inpainting adapter training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain slow and fast backbones by plain denoising.
    Pretrain(PretrainArgs),
    /// Train the inpainting adapter and the discriminator.
    Train(TrainArgs),
    /// Inpaint flat-file sample records.
    Infer(InferArgs),
    /// Build a benchmark set with roughened masks.
    Bench(BenchArgs),
    /// Evaluate a checkpoint on a benchmark manifest.
    Eval(EvalArgs),
    /// Write the noise schedule as CSV.
    DumpSchedule(DumpScheduleArgs),
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional CSV loss log.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Pretrained backbones; random initialisation when omitted.
    #[arg(long)]
    pub backbones: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Step-1-only adapter training without a discriminator.
    #[arg(long)]
    pub baseline_brushnet: bool,
    /// Continue from a training checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferenceFlags {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub no_paste_back: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl InferenceFlags {
    fn apply(&self, mut cfg: InferenceConfig) -> InferenceConfig {
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        if self.no_paste_back {
            cfg.paste_back = false;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg
    }
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A record (`<stem>.json`) or a directory of records.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub inference: InferenceFlags,
    /// Also write a PNG triptych per sample.
    #[arg(long)]
    pub dump_png: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 300)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Manifest path.
    #[arg(long)]
    pub out: PathBuf,
    /// Also export every sample as a flat-file record.
    #[arg(long)]
    pub records_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training checkpoint to evaluate.
    #[arg(long, required_unless_present = "identity", conflicts_with = "identity")]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate the fixture model that returns the ground truth.
    #[arg(long)]
    pub identity: bool,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Report path.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub inference: InferenceFlags,
    /// Directory for PNG triptychs.
    #[arg(long)]
    pub dump_png: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DumpScheduleArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(a) => cmd_pretrain(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Infer(a) => cmd_infer(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::DumpSchedule(a) => cmd_dump_schedule(&a),
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<CliConfigFile> {
    Ok(CliConfigFile::load_or_default(path.map(PathBuf::as_path))?)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

pub fn cmd_pretrain(a: &PretrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_ref())?;
    log::info!("pretraining slow and fast backbones ({} + {} iterations)", cfg.pretrain.iterations, cfg.pretrain.fast_iterations);
    let out = pretrain(&cfg.pretrain, &cfg.backbone, &cfg.schedule, &cfg.data).context("pretraining failed")?;
    let extra = [
        ("pretrain", serde_json::to_string(&cfg.pretrain)?),
        ("schedule", serde_json::to_string(&cfg.schedule)?),
        ("data", serde_json::to_string(&cfg.data)?),
    ];
    out.to_checkpoint(&extra)?.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(log) = &a.log {
        out.log.write_csv(log)?;
    }
    log::info!("wrote {}", a.out.display());
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    ensure_dir(&a.out_dir)?;
    let log_path = a.out_dir.join("loss_log.csv");
    let (mut trainer, mut log) = match &a.resume {
        Some(ck) => {
            if a.config.is_some() || a.backbones.is_some() {
                bail!("--resume takes its configuration and backbones from the checkpoint");
            }
            let t = Trainer::resume(ck).with_context(|| format!("resuming from {}", ck.display()))?;
            if a.baseline_brushnet != t.config().params.baseline {
                bail!("--baseline-brushnet must match the resumed run");
            }
            let mut log = if log_path.exists() { LossLog::read_csv(&log_path)? } else { LossLog::default() };
            log.truncate_after(t.iteration());
            (t, log)
        }
        None => {
            let mut cfg = load_config(a.config.as_ref())?.train_config();
            cfg.params.baseline |= a.baseline_brushnet;
            let t = match &a.backbones {
                Some(p) => {
                    let (slow, fast) = load_backbones(p).with_context(|| format!("loading {}", p.display()))?;
                    cfg.backbone = slow.config().clone();
                    Trainer::new(cfg, slow, fast)?
                }
                None => Trainer::from_scratch(cfg)?,
            };
            (t, LossLog::default())
        }
    };
    let start = trainer.log().records.len();
    log::info!(
        "training from iteration {} to {} ({})",
        trainer.iteration(),
        trainer.config().params.total_iterations,
        if trainer.config().params.baseline { "baseline" } else { "three-step" }
    );
    let result = trainer.train(Some(&a.out_dir));
    log.records.extend_from_slice(&trainer.log().records[start..]);
    log.write_csv(&log_path)?;
    result?;
    trainer.save(&a.out_dir.join("final.safetensors"))?;
    trainer.export_adapter(&a.out_dir.join("adapter.safetensors"))?;
    log::info!("wrote {}", a.out_dir.display());
    Ok(())
}

fn record_stems(input: &Path) -> Result<Vec<(PathBuf, String)>> {
    let stem_of = |p: &Path| -> Option<String> {
        (p.extension()? == "json").then(|| p.file_stem().map(|s| s.to_string_lossy().into_owned()))?
    };
    if input.is_dir() {
        let mut out: Vec<(PathBuf, String)> = fs::read_dir(input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter_map(|p| stem_of(&p).map(|s| (input.to_path_buf(), s)))
            .collect();
        out.sort();
        if out.is_empty() {
            bail!("no records found in {}", input.display());
        }
        Ok(out)
    } else {
        let stem = stem_of(input).with_context(|| format!("{} is not a record sidecar (.json)", input.display()))?;
        Ok(vec![(input.parent().unwrap_or(Path::new(".")).to_path_buf(), stem)])
    }
}

pub fn cmd_infer(a: &InferArgs) -> Result<()> {
    let cfg = a.inference.apply(load_config(a.config.as_ref())?.infer);
    let bundle = InferenceBundle::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let model = FastGenerator { adapter: &bundle.adapter, fast: &bundle.fast, schedule: &bundle.schedule };
    ensure_dir(&a.out_dir)?;
    for (dir, stem) in record_stems(&a.input)? {
        let sample = read_record(&dir, &stem).with_context(|| format!("reading record {stem}"))?;
        let out = model.run(&sample, &cfg).with_context(|| format!("inpainting {stem}"))?;
        let written = InpaintSample { x0: out.image.clone(), ..sample.clone() };
        write_record(&a.out_dir, &stem, &written)?;
        if a.dump_png {
            write_triptych(&a.out_dir.join(format!("{stem}.png")), &sample, &out.image, 4)?;
        }
    }
    Ok(())
}

pub fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let set = build_benchset(a.n, a.seed)?;
    let manifest = BenchManifest::from_samples(a.seed, &set);
    crate::io::write_atomic(&a.out, &serde_json::to_vec_pretty(&manifest)?)?;
    if let Some(dir) = &a.records_dir {
        ensure_dir(dir)?;
        for (i, s) in set.iter().enumerate() {
            write_record(dir, &format!("sample-{i:04}"), s)?;
        }
    }
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let cfg = a.inference.apply(load_config(a.config.as_ref())?.infer);
    let manifest = BenchManifest::read(&a.manifest).with_context(|| format!("reading {}", a.manifest.display()))?;
    let samples = manifest.load_samples()?;
    let bundle = match &a.checkpoint {
        Some(p) => Some(InferenceBundle::load(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let generator = bundle.as_ref().map(|b| FastGenerator { adapter: &b.adapter, fast: &b.fast, schedule: &b.schedule });
    let model: &dyn InpaintModel = match &generator {
        Some(g) => g,
        None => &IdentityModel,
    };
    let (report, images) = run_eval_with_outputs(model, &samples, &[], &cfg, Exec::default())?;
    report.write_json(&a.out)?;
    log::info!("evaluated {} samples, bg_mse {:.6}", samples.len(), report.aggregate.whole_image.get("bg_mse").copied().unwrap_or(f64::NAN));
    if let Some(dir) = &a.dump_png {
        ensure_dir(dir)?;
        for (i, (s, img)) in samples.iter().zip(&images).enumerate() {
            write_triptych(&dir.join(format!("sample-{i:04}.png")), s, img, 4)?;
        }
    }
    Ok(())
}

pub fn cmd_dump_schedule(a: &DumpScheduleArgs) -> Result<()> {
    let schedule = load_config(a.config.as_ref())?.schedule.build()?;
    let mut buf = Vec::new();
    schedule.write_csv(&mut buf)?;
    crate::io::write_atomic(&a.out, &buf)?;
    Ok(())
}
