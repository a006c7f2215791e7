//! End-to-end runs of the `desta` binary: outputs, determinism and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use desta_core::caption::{compute_manifest_stats, CaptionRecord, ManifestStats, MetadataRecord};
use desta_core::config::ProjectConfig;
use desta_core::jsonl;
use desta_core::tensor::checkpoint::Checkpoint;
use desta_core::trainer::LogRecord;
use tempfile::TempDir;

fn desta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_desta"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = desta(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Work {
    dir: TempDir,
}

impl Work {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, name: &str, edit: impl FnOnce(&mut ProjectConfig)) -> PathBuf {
        let mut cfg = ProjectConfig::toy();
        cfg.eval.max_new_tokens = 4;
        edit(&mut cfg);
        let path = self.path(name);
        std::fs::write(&path, cfg.to_toml()).unwrap();
        path
    }

    /// Metadata, captions and a small task file.
    fn data(&self, n: usize) -> (PathBuf, PathBuf, PathBuf) {
        let (m, c, t) = (self.path("meta.jsonl"), self.path("captions.jsonl"), self.path("tasks.jsonl"));
        let n = n.to_string();
        ok(&["synth-metadata", "--n", &n, "--out", p(&m)]);
        ok(&["caption-gen", "--metadata", p(&m), "--out", p(&c)]);
        ok(&["synth-tasks", "--metadata", p(&m), "--out", p(&t), "--samples", "1"]);
        (m, c, t)
    }
}

#[test]
fn caption_generation_counts_stats_and_determinism() {
    let w = Work::new();
    let (m, c, _) = w.data(10);
    let meta: Vec<MetadataRecord> = jsonl::read(&m).unwrap();
    assert_eq!(meta.len(), 10);
    let captions: Vec<CaptionRecord> = jsonl::read(&c).unwrap();
    assert_eq!(captions.len(), 30);

    let again = w.path("again.jsonl");
    let stats_file = w.path("stats.json");
    let out = ok(&["caption-gen", "--metadata", p(&m), "--out", p(&again), "--stats", p(&stats_file)]);
    assert_eq!(std::fs::read(&c).unwrap(), std::fs::read(&again).unwrap());

    let printed: ManifestStats = serde_json::from_slice(&out.stdout).unwrap();
    let from_file: ManifestStats = serde_json::from_str(&std::fs::read_to_string(&stats_file).unwrap()).unwrap();
    assert_eq!(printed, compute_manifest_stats(&captions));
    assert_eq!(from_file, printed);
    assert_eq!(printed.num_captions, 30);
    assert_eq!(printed.num_audios, 10);

    let stats_cmd: ManifestStats = serde_json::from_slice(&ok(&["stats", "--captions", p(&c)]).stdout).unwrap();
    assert_eq!(stats_cmd, printed);

    // A different seed gives a different corpus.
    let other = w.path("other.jsonl");
    ok(&["--seed", "7", "caption-gen", "--metadata", p(&m), "--out", p(&other)]);
    assert_ne!(std::fs::read(&c).unwrap(), std::fs::read(&other).unwrap());
}

#[test]
fn usage_errors_exit_one() {
    let w = Work::new();
    let missing = w.path("nope.jsonl");
    let out = desta(&["caption-gen", "--metadata", p(&missing), "--out", p(&w.path("x.jsonl"))]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("nope.jsonl"), "{}", stderr(&out));

    assert_eq!(code(&desta(&["train", "--bogus"])), 1);
    assert_eq!(code(&desta(&["--help"])), 0);

    let bad_cfg = w.path("bad.toml");
    std::fs::write(&bad_cfg, "[trainer]\nlr_maxx = 1.0\n").unwrap();
    let out = desta(&["--config", p(&bad_cfg), "stats", "--captions", p(&missing)]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("lr_maxx"));

    let (m, _, t) = w.data(3);
    let o = w.path("eval");
    for extra in [["--lora-scale", "1.5"], ["--lora-scale", "-0.1"], ["--sweep", "1,0.5,2"]] {
        let mut args = vec!["eval", "--metadata", p(&m), "--tasks", p(&t), "--out-dir", p(&o)];
        args.extend(extra);
        let out = desta(&args);
        assert_eq!(code(&out), 1, "{extra:?}");
        assert!(stderr(&out).contains("outside [0, 1]"));
    }
}

#[test]
fn too_many_skipped_draws_exit_two() {
    let w = Work::new();
    // Attributes left unspecified give templates nothing to say, so a large
    // number of draws per audio runs into duplicates.
    let m = w.path("meta.jsonl");
    jsonl::write(&m, &[MetadataRecord::new("bare-0", "hello there")]).unwrap();
    let cfg = w.config("strict.toml", |c| {
        c.pipeline.captions_per_audio = 40;
        c.pipeline.max_skip_ratio = 0.0;
    });
    let out = desta(&["--config", p(&cfg), "caption-gen", "--metadata", p(&m), "--out", p(&w.path("c.jsonl"))]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("skipped"));
    assert!(!w.path("c.jsonl").exists());
}

#[test]
fn diverging_training_exits_three() {
    let w = Work::new();
    let (m, c, _) = w.data(3);
    let cfg = w.config("hot.toml", |c| {
        c.trainer.lr_max = 1e300;
        c.trainer.lr_min = 1e300;
        c.trainer.epochs = 3;
    });
    let out = desta(&["--config", p(&cfg), "train", "--metadata", p(&m), "--captions", p(&c), "--out-dir", p(&w.path("o"))]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("non-finite"));
}

#[test]
fn train_resume_and_eval_dispatch() {
    let w = Work::new();
    let (m, c, t) = w.data(4);
    let cfg = w.config("cfg.toml", |c| c.trainer.epochs = 2);
    let train = |out: &Path, extra: &[&str]| {
        let mut args = vec!["--config", p(&cfg), "train", "--metadata", p(&m), "--captions", p(&c), "--out-dir", p(out)];
        args.extend_from_slice(extra);
        ok(&args)
    };

    // Resuming from the first epoch reproduces the second half of the run.
    let full = w.path("full");
    train(&full, &["--adapter", "cnn"]);
    let resumed = w.path("resumed");
    let first = full.join("epoch-001.ckpt");
    train(&resumed, &["--adapter", "cnn", "--resume", p(&first)]);
    let full_log: Vec<LogRecord> = jsonl::read(full.join("train_log.jsonl")).unwrap();
    let resumed_log: Vec<LogRecord> = jsonl::read(resumed.join("train_log.jsonl")).unwrap();
    assert_eq!(resumed_log, full_log[full_log.len() / 2..]);
    assert_eq!(
        std::fs::read(full.join("final.ckpt")).unwrap(),
        std::fs::read(resumed.join("final.ckpt")).unwrap()
    );

    // The adapter kind travels with the checkpoint.
    let ckpt = full.join("final.ckpt");
    assert_eq!(Checkpoint::load(&ckpt).unwrap().meta["adapter"], "cnn");
    let ev = w.path("ev");
    let eval = |out: &Path, config: &Path, ckpt: &Path, extra: &[&str]| {
        let mut args = vec!["--config", p(config), "eval", "--metadata", p(&m), "--tasks", p(&t), "--out-dir", p(out)];
        args.extend_from_slice(&["--checkpoint", p(ckpt)]);
        args.extend_from_slice(extra);
        desta(&args)
    };
    assert_eq!(code(&eval(&ev, &cfg, &ckpt, &[])), 0);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ev.join("eval_report.json")).unwrap()).unwrap();
    assert!(report["zero_shot"]["n"].as_u64().unwrap() > 0);
    assert!(ev.join("eval_table.txt").exists());
    let mismatch = eval(&w.path("ev2"), &cfg, &ckpt, &["--adapter", "qformer"]);
    assert_eq!(code(&mismatch), 1);

    // Scale zero is the model without LoRA.
    let with = w.path("with");
    assert_eq!(code(&eval(&with, &cfg, &ckpt, &["--lora-scale", "0"])), 0);
    let mut stripped = Checkpoint::load(&ckpt).unwrap();
    let before = stripped.entries.len();
    stripped.entries.retain(|k, _| !k.starts_with("lora."));
    assert!(stripped.entries.len() < before);
    let base_ckpt = w.path("base.ckpt");
    stripped.save(&base_ckpt).unwrap();
    let base_cfg = w.config("base.toml", |c| {
        c.trainer.epochs = 2;
        c.lora.rank = 0;
    });
    let base = w.path("base");
    assert_eq!(code(&eval(&base, &base_cfg, &base_ckpt, &[])), 0);
    assert_eq!(
        std::fs::read(with.join("predictions.jsonl")).unwrap(),
        std::fs::read(base.join("predictions.jsonl")).unwrap()
    );
    // and a LoRA-free model refuses any other scale
    assert_eq!(code(&eval(&w.path("b2"), &base_cfg, &base_ckpt, &["--lora-scale", "0.5"])), 1);
}
