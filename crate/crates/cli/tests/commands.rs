use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use eqdiff_cli::commands::{self, EvaluateOptions, PredictionRecord};
use eqdiff_cli::ExperimentConfig;
use eqdiff_synthbench::{load_dataset, Split};

const TINY: &str = r#"
seed = 3

[diffusion]
T = 10
L = 2
N = 3
H = 8
W = 8
gamma = 0.5

[diffusion.optimizer]
lr = 0.001
batch_size = 8
epochs = 2

[diffusion.network]
fields = [2, 2]
embed_fields = 2
head_hidden = 16

[synth]
size = 8
frames = 2
points = 3

[synth.counts]
train = 12
val = 4
in_context_test = 6
out_context_test = 5
"#;

struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn eqdiff(&self, args: &[&str]) -> Output {
        let config = self.path("tiny.toml");
        let out = self.path("out");
        Command::new(env!("CARGO_BIN_EXE_eqdiff"))
            .arg("--config")
            .arg(&config)
            .arg("--out-dir")
            .arg(&out)
            .arg("--quiet")
            .args(args)
            .env_remove("EQDIFF_SEED")
            .env_remove("EQDIFF_DEVICE")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.eqdiff(args);
        assert!(
            o.status.success(),
            "eqdiff {args:?} failed: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        String::from_utf8(o.stdout).unwrap()
    }

    fn config(&self) -> ExperimentConfig {
        let mut c = ExperimentConfig::load(&self.path("tiny.toml")).unwrap();
        c.out_dir = self.path("out");
        c
    }

    fn trained(&self) -> PathBuf {
        self.ok(&["gen-synth"]);
        self.ok(&["train"]);
        self.path("out/checkpoints/best.ckpt")
    }
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap()
}

#[test]
fn gen_synth_writes_four_splits_and_reproduces_with_seed() {
    let r = Run::new();
    let stdout = r.ok(&["gen-synth"]);
    for s in Split::ALL {
        assert!(stdout.contains(s.name()));
    }
    let ds = load_dataset(&r.path("out/dataset")).unwrap();
    assert_eq!(ds.indices(Split::Train).len(), 12);
    assert_eq!(ds.indices(Split::OutContextTest).len(), 5);
    let first = read(&r.path("out/dataset/checksums.sha256"));
    r.ok(&["gen-synth", "--force"]);
    assert_eq!(read(&r.path("out/dataset/checksums.sha256")), first);
    r.ok(&["gen-synth", "--force", "--seed", "4"]);
    assert_ne!(read(&r.path("out/dataset/checksums.sha256")), first);
}

#[test]
fn seed_can_come_from_the_environment() {
    let r = Run::new();
    r.ok(&["gen-synth", "--seed", "4"]);
    let want = read(&r.path("out/dataset/checksums.sha256"));
    let o = Command::new(env!("CARGO_BIN_EXE_eqdiff"))
        .arg("--config")
        .arg(r.path("tiny.toml"))
        .arg("--out-dir")
        .arg(r.path("env"))
        .arg("gen-synth")
        .env("EQDIFF_SEED", "4")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(read(&r.path("env/dataset/checksums.sha256")), want);
}

#[test]
fn bimodal_flag_passes_the_mode_audit() {
    let r = Run::new();
    let stdout = r.ok(&["gen-synth", "--bimodal"]);
    assert!(stdout.contains("two-mode audit: 27/27"), "{stdout}");
    let ds = load_dataset(&r.path("out/dataset")).unwrap();
    assert_eq!(commands::mode_audit(&ds.manifest), (27, 27));
}

#[test]
fn train_then_resume_is_idempotent() {
    let r = Run::new();
    r.trained();
    let log = r.path("out/train_log.jsonl");
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 2);
    let last = read(&r.path("out/checkpoints/last.ckpt"));
    let best = read(&r.path("out/checkpoints/best.ckpt"));
    let log_before = read(&log);
    r.ok(&["train", "--resume"]);
    assert_eq!(read(&r.path("out/checkpoints/last.ckpt")), last);
    assert_eq!(read(&r.path("out/checkpoints/best.ckpt")), best);
    assert_eq!(read(&log), log_before);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let a = Run::new();
    a.ok(&["gen-synth"]);
    a.ok(&["train", "--epochs", "1"]);
    a.ok(&["train", "--resume"]);
    let b = Run::new();
    b.ok(&["gen-synth"]);
    b.ok(&["train"]);
    assert_eq!(
        read(&a.path("out/checkpoints/last.ckpt")),
        read(&b.path("out/checkpoints/last.ckpt"))
    );
}

#[test]
fn predictions_cover_the_split_and_are_reproducible() {
    let r = Run::new();
    let ckpt = r.trained();
    let ckpt = ckpt.to_str().unwrap();
    let a = r.path("a.jsonl");
    let b = r.path("b.jsonl");
    for out in [&a, &b] {
        r.ok(&["predict", "--checkpoint", ckpt, "--split", "out_context_test", "--output", out.to_str().unwrap()]);
    }
    assert_eq!(read(&a), read(&b));
    let recs = commands::read_predictions(&a).unwrap();
    assert_eq!(recs.len(), 5);
    r.ok(&["predict", "--checkpoint", ckpt, "--output", b.to_str().unwrap(), "--seed", "9"]);
    assert_ne!(read(&a), read(&b));
}

#[test]
fn intermediates_hold_t_plus_one_snapshots() {
    let r = Run::new();
    let ckpt = r.trained();
    let out = r.path("i.jsonl");
    r.ok(&[
        "predict",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--record-intermediates",
        "--deterministic",
        "--output",
        out.to_str().unwrap(),
    ]);
    for rec in commands::read_predictions(&out).unwrap() {
        let steps = rec.intermediates_px.unwrap();
        assert_eq!(steps.len(), 11);
        assert_eq!(steps.last().unwrap(), &rec.points_px);
    }
}

#[test]
fn every_sampling_mode_and_model_kind_predicts() {
    let r = Run::new();
    let ckpt = r.trained();
    for mode in ["naive", "unconditional"] {
        let out = r.path(&format!("{mode}.jsonl"));
        r.ok(&["predict", "--checkpoint", ckpt.to_str().unwrap(), "--mode", mode, "--output", out.to_str().unwrap()]);
        assert_eq!(commands::read_predictions(&out).unwrap().len(), 6);
    }
    for model in ["bc", "explicit-diffusion", "idpoe-no-equiv"] {
        r.ok(&["--model", model, "train", "--epochs", "1"]);
        let out = r.path(&format!("{model}.jsonl"));
        let ck = r.path("out/checkpoints/best.ckpt");
        r.ok(&["predict", "--checkpoint", ck.to_str().unwrap(), "--blur", "3", "--rotate", "1", "--output", out.to_str().unwrap()]);
        assert_eq!(commands::read_predictions(&out).unwrap().len(), 6);
    }
}

#[test]
fn illegal_pairings_are_configuration_errors() {
    let r = Run::new();
    r.ok(&["gen-synth"]);
    r.ok(&["--model", "bc", "train", "--epochs", "1"]);
    let ck = r.path("out/checkpoints/best.ckpt");
    let ck = ck.to_str().unwrap();
    assert_eq!(r.eqdiff(&["predict", "--checkpoint", ck, "--mode", "naive"]).status.code(), Some(2));
    assert_eq!(r.eqdiff(&["predict", "--checkpoint", ck, "--record-intermediates"]).status.code(), Some(2));
    assert_eq!(r.eqdiff(&["predict", "--checkpoint", ck, "--blur", "7"]).status.code(), Some(2));
    assert_eq!(r.eqdiff(&["augment-with-synthetic", "--checkpoint", ck, "--count", "3"]).status.code(), Some(2));
}

fn echo(path: &Path, cfg: &ExperimentConfig, split: Split) {
    let ds = load_dataset(&cfg.dataset_dir()).unwrap();
    let text: String = ds
        .indices(split)
        .into_iter()
        .map(|i| {
            let e = ds.entry(i);
            let r = PredictionRecord {
                clip_id: e.clip_id.clone(),
                points_px: e.trajectory_px.clone(),
                intermediates_px: None,
            };
            serde_json::to_string(&r).unwrap() + "\n"
        })
        .collect();
    fs::write(path, text).unwrap();
}

#[test]
fn ground_truth_echo_scores_zero() {
    let r = Run::new();
    r.ok(&["gen-synth"]);
    let p = r.path("gt.jsonl");
    echo(&p, &r.config(), Split::InContextTest);
    let stdout = r.ok(&["evaluate", "--predictions", &format!("gt={}", p.display())]);
    assert!(stdout.contains("| gt | 6 | 0.000 ± 0.000 | 0.000 ± 0.000 | 0.000 ± 0.000 |"), "{stdout}");
    assert!(r.path("out/eval/plots/overlays_in_context_test.png").is_file());
}

#[test]
fn table_matches_per_clip_records() {
    let r = Run::new();
    let ckpt = r.trained();
    let pred = r.path("p.jsonl");
    r.ok(&["predict", "--checkpoint", ckpt.to_str().unwrap(), "--output", pred.to_str().unwrap()]);
    let cfg = r.config();
    let opts = EvaluateOptions {
        predictions: vec![("p".into(), pred.clone())],
        logs: vec![("p".into(), r.path("out/train_log.jsonl"))],
        checkpoints: vec![("p".into(), ckpt.clone())],
        ..EvaluateOptions::default()
    };
    let e = commands::evaluate(&cfg, &opts).unwrap();
    let report = &e.reports[0].1;
    let text = fs::read_to_string(r.path("out/eval/p_in_context_test.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let ades: Vec<f64> = lines[..lines.len() - 1].iter().map(|v| v["ade"].as_f64().unwrap()).collect();
    let mean = ades.iter().sum::<f64>() / ades.len() as f64;
    let std = (ades.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / ades.len() as f64).sqrt();
    assert!((mean - report.aggregate.ade.mean).abs() < 1e-12);
    assert!((std - report.aggregate.ade.std).abs() < 1e-12);
    let agg = &lines.last().unwrap()["aggregate"];
    assert!((agg["ade"]["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
    for plot in ["loss_curves.png", "complexity_in_context_test.png", "overlays_in_context_test.png"] {
        assert!(r.path(&format!("out/eval/plots/{plot}")).is_file());
    }
}

#[test]
fn missing_predictions_are_listed() {
    let r = Run::new();
    r.ok(&["gen-synth"]);
    let p = r.path("gt.jsonl");
    echo(&p, &r.config(), Split::InContextTest);
    let text = fs::read_to_string(&p).unwrap();
    let kept: String = text.lines().skip(2).map(|l| format!("{l}\n")).collect();
    fs::write(&p, kept).unwrap();
    let o = r.eqdiff(&["evaluate", "--predictions", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("in_context_test_00000") && err.contains("in_context_test_00001"), "{err}");
    assert!(!err.contains("in_context_test_00002"));
}

#[test]
fn equivariance_audit_separates_the_two_networks() {
    let r = Run::new();
    let stdout = r.ok(&["check-equivariance", "--samples", "5"]);
    let audit: serde_json::Value = serde_json::from_slice(&read(&r.path("out/equivariance.json"))).unwrap();
    let net = &audit["network"]["per_element"];
    assert_eq!(net[0]["max_rel_error"].as_f64().unwrap(), 0.0);
    for e in net.as_array().unwrap() {
        assert!(e["max_rel_error"].as_f64().unwrap() <= 1e-4);
    }
    assert!(!stdout.contains("FAIL"), "{stdout}");
    let stdout = r.ok(&["--model", "idpoe-no-equiv", "check-equivariance", "--samples", "5"]);
    assert!(stdout.contains("FAIL"));
    let audit: serde_json::Value = serde_json::from_slice(&read(&r.path("out/equivariance.json"))).unwrap();
    let worst = audit["network"]["per_element"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["max_rel_error"].as_f64().unwrap())
        .fold(0.0, f64::max);
    assert!(worst > 1e-2, "{worst}");
}

#[test]
fn augmentation_writes_a_loadable_dataset() {
    let r = Run::new();
    let ckpt = r.trained();
    let out = r.path("aug");
    r.ok(&[
        "augment-with-synthetic",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--count",
        "7",
        "--mix",
        "--output",
        out.to_str().unwrap(),
    ]);
    let ds = load_dataset(&out).unwrap();
    let synthetic = ds
        .indices(Split::Train)
        .into_iter()
        .filter(|&i| ds.entry(i).clip_id.starts_with("synthetic_"))
        .count();
    assert_eq!(synthetic, 7);
    assert_eq!(ds.indices(Split::Train).len(), 7 + 12);
    assert_eq!(ds.indices(Split::Val).len(), 4);
    r.ok(&["--dataset", out.to_str().unwrap(), "--model", "bc", "train", "--epochs", "1"]);
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let r = Run::new();
    assert_eq!(r.eqdiff(&["train"]).status.code(), Some(3), "no dataset yet");
    assert_eq!(r.eqdiff(&["--device", "gpu", "gen-synth"]).status.code(), Some(2));
    fs::write(r.path("bad.toml"), "seed = \"x\"").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_eqdiff"))
        .args(["--config", r.path("bad.toml").to_str().unwrap(), "gen-synth"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(r.eqdiff(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(r.eqdiff(&["--help"]).status.code(), Some(0));
    r.ok(&["gen-synth"]);
    fs::write(r.path("nan.toml"), TINY.replace("lr = 0.001", "lr = 1e30")).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_eqdiff"))
        .args(["--config", r.path("nan.toml").to_str().unwrap(), "--out-dir", r.path("out").to_str().unwrap(), "-q", "train"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}
