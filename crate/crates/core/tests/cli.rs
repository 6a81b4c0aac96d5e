use std::path::Path;
use std::process::{Command, Output};

use turbofill::data::bench::BenchManifest;
use turbofill::pipeline::EvalReport;

fn turbofill(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_turbofill")).args(args).output().expect("binary runs")
}

fn succeed(args: &[&str]) {
    let out = turbofill(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        "[backbone]\nbase_channels = 4\nchannel_multipliers = [1, 2]\nblocks_per_stage = 1\nnorm_groups = 2\n\
         [train]\nbatch_size = 1\ngrad_accum = 1\ntotal_iterations = 6\ncheckpoint_interval = 3\nseed = 7\n\
         [data]\ntrain_size = 4\n[pretrain]\niterations = 4\nfast_iterations = 2\nbatch_size = 2\n",
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn seeded_training_runs_write_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    succeed(&["train", "--config", &cfg, "--out-dir", s(&a)]);
    succeed(&["train", "--config", &cfg, "--out-dir", s(&b)]);
    let la = std::fs::read(a.join("loss_log.csv")).unwrap();
    assert_eq!(la, std::fs::read(b.join("loss_log.csv")).unwrap());
    assert!(a.join("checkpoint-000003.safetensors").exists());
    assert!(a.join("final.safetensors").exists());
    assert!(a.join("adapter.safetensors").exists());

    // resuming from the midpoint rewrites the same log
    let c = dir.path().join("c");
    std::fs::create_dir_all(&c).unwrap();
    std::fs::copy(a.join("loss_log.csv"), c.join("loss_log.csv")).unwrap();
    succeed(&["train", "--out-dir", s(&c), "--resume", s(&a.join("checkpoint-000003.safetensors"))]);
    assert_eq!(std::fs::read(c.join("loss_log.csv")).unwrap(), la);
}

#[test]
fn pretrained_backbones_feed_training_and_inference() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let backbones = dir.path().join("backbones.safetensors");
    succeed(&["pretrain", "--config", &cfg, "--out", s(&backbones), "--log", s(&dir.path().join("pre.csv"))]);
    let run = dir.path().join("run");
    succeed(&["train", "--config", &cfg, "--backbones", s(&backbones), "--out-dir", s(&run)]);

    let records = dir.path().join("records");
    succeed(&["bench", "--n", "2", "--out", s(&dir.path().join("bench.json")), "--records-dir", s(&records)]);
    let outputs = dir.path().join("outputs");
    succeed(&[
        "infer",
        "--checkpoint",
        s(&run.join("final.safetensors")),
        "--input",
        s(&records),
        "--out-dir",
        s(&outputs),
        "--dump-png",
    ]);
    for stem in ["sample-0000", "sample-0001"] {
        assert!(outputs.join(format!("{stem}.json")).exists());
        assert!(outputs.join(format!("{stem}.png")).exists());
    }

    let report = dir.path().join("report.json");
    succeed(&[
        "eval",
        "--checkpoint",
        s(&run.join("final.safetensors")),
        "--manifest",
        s(&dir.path().join("bench.json")),
        "--out",
        s(&report),
    ]);
    let r = EvalReport::read_json(&report).unwrap();
    assert_eq!(r.samples.len(), 2);
    // paste-back is on by default
    assert_eq!(r.aggregate.whole_image["bg_mse"], 0.0);
}

#[test]
fn identity_eval_has_zero_background_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("bench.json");
    succeed(&["bench", "--n", "300", "--seed", "0", "--out", s(&manifest)]);
    assert_eq!(BenchManifest::read(&manifest).unwrap().entries.len(), 300);
    let report = dir.path().join("report.json");
    succeed(&["eval", "--identity", "--manifest", s(&manifest), "--out", s(&report), "--no-paste-back"]);
    let r = EvalReport::read_json(&report).unwrap();
    assert_eq!(r.samples.len(), 300);
    assert_eq!(r.aggregate.whole_image["bg_mse"], 0.0);
    assert_eq!(r.aggregate.mask_region["mse"], 0.0);
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nlearnig_rate = 0.1\n").unwrap();
    let out = turbofill(&["train", "--config", s(&bad), "--out-dir", s(&dir.path().join("x"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learnig_rate"));

    let out = turbofill(&["infer", "--checkpoint", s(&dir.path().join("missing")), "--input", s(dir.path()), "--out-dir", s(dir.path())]);
    assert!(!out.status.success());

    let schedule = dir.path().join("schedule.csv");
    succeed(&["dump-schedule", "--out", s(&schedule)]);
    assert_eq!(std::fs::read_to_string(&schedule).unwrap().lines().count(), 1001);
}
