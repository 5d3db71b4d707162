//! Black-box tests of the `ra` binary: exit codes, artifact layout, config
//! precedence, and failure modes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ra() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ra"))
}

fn run(args: &[&str]) -> Output {
    ra().args(args).output().expect("spawn ra")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Small architecture and dataset so each test runs in about a second.
const TINY_CONFIG: &str = r#"
[train]
steps = 20
batch_size = 4
checkpoint_every = 10
validation_every = 10
lambda_warmup_frac = 0.0

[train.arch]
image_h = 32
image_w = 32
depth = 3
base_channels = 4
channel_cap = 16
latent_dim = 8

[synth]
image_size = 32
n_healthy = 16
n_val = 4
n_test_healthy = 4
n_anomalous = 6
seed = 5
"#;

struct Fixture {
    #[allow(dead_code)]
    dir: tempfile::TempDir,
    config: PathBuf,
    root: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("ra.toml");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let root = dir.path().to_path_buf();
    Fixture { dir, config, root }
}

fn synth(f: &Fixture) -> PathBuf {
    let data = f.root.join("data");
    let out = run(&["synth", "--config", f.config.to_str().unwrap(), "--out", data.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "synth failed: {}", stderr_of(&out));
    data
}

fn train(f: &Fixture, data: &Path, extra: &[&str]) -> PathBuf {
    let run_dir = f.root.join("run");
    let mut args = vec![
        "train",
        "--config",
        f.config.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    let out = run(&args);
    assert_eq!(code(&out), 0, "train failed: {}", stderr_of(&out));
    run_dir
}

fn sorted_files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

#[test]
fn synth_writes_identical_datasets_for_identical_configs() {
    let f = fixture();
    let (d1, d2) = (f.root.join("d1"), f.root.join("d2"));
    for d in [&d1, &d2] {
        let out = run(&["synth", "--config", f.config.to_str().unwrap(), "--out", d.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", stderr_of(&out));
    }
    assert!(d1.join("effective-config.toml").exists());
    assert!(d1.join("train.json").exists());
    let strip = |files: Vec<(String, Vec<u8>)>| {
        files.into_iter().filter(|(n, _)| n != "effective-config.toml").collect::<Vec<_>>()
    };
    // The effective-config snapshot embeds the output path, so byte-compare
    // everything else.
    assert_eq!(strip(sorted_files(&d1)), strip(sorted_files(&d2)));
}

#[test]
fn full_pipeline_produces_scores_and_report() {
    let f = fixture();
    let data = synth(&f);
    let run_dir = train(&f, &data, &[]);
    assert!(run_dir.join("ckpt_best.ra").exists());
    assert!(run_dir.join("ckpt_last.ra").exists());
    assert!(run_dir.join("train_log.jsonl").exists());
    assert!(run_dir.join("effective-config.toml").exists());

    let ckpt = run_dir.join("ckpt_best.ra");
    let scores = f.root.join("scores");
    let out = run(&[
        "score",
        "--config",
        f.config.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--input",
        data.join("test.json").to_str().unwrap(),
        "--out",
        scores.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "score failed: {}", stderr_of(&out));
    let csv = std::fs::read_to_string(scores.join("scores.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 10, "header plus one row per test image");
    assert!(csv.starts_with("image,class,image_score,ssim,lpips"));
    let n_maps = std::fs::read_dir(scores.join("maps")).unwrap().count();
    let n_heat = std::fs::read_dir(scores.join("heatmaps")).unwrap().count();
    let n_recon = std::fs::read_dir(scores.join("recon")).unwrap().count();
    assert_eq!((n_maps, n_heat, n_recon), (10, 10, 10));

    let report_dir = f.root.join("report");
    let out = run(&[
        "evaluate",
        "--config",
        f.config.to_str().unwrap(),
        "--scores",
        scores.to_str().unwrap(),
        "--manifest",
        data.join("test.json").to_str().unwrap(),
        "--out",
        report_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "evaluate failed: {}", stderr_of(&out));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report_dir.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["n_healthy"], 4);
    assert_eq!(report["n_anomalous"], 6);
    assert!(report["image_auroc"].is_f64());
    assert!(report["threshold"].is_f64());
    assert!(!report["per_class"].as_object().unwrap().is_empty());
    assert!(report_dir.join("report.txt").exists());
    assert!(String::from_utf8_lossy(&out.stdout).contains("image AUROC"));

    // Healthy-only manifest: reconstruction metrics, no ranking metrics.
    let scores_val = f.root.join("scores-val");
    let out = run(&[
        "score",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--input",
        data.join("val.json").to_str().unwrap(),
        "--out",
        scores_val.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "score val failed: {}", stderr_of(&out));
    let report_val = f.root.join("report-val");
    let out = run(&[
        "evaluate",
        "--scores",
        scores_val.to_str().unwrap(),
        "--manifest",
        data.join("val.json").to_str().unwrap(),
        "--out",
        report_val.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "evaluate val failed: {}", stderr_of(&out));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report_val.join("report.json")).unwrap())
            .unwrap();
    assert!(report["image_auroc"].is_null());
    assert!(report["healthy_ssim_mean"].is_f64());
}

// The λ warm-up schedule is a fraction of the run's total steps, so bitwise
// equivalence needs both runs to agree on the schedule; the fixture disables
// warm-up to compare a 10-step prefix against a 20-step run.
#[test]
fn resume_matches_an_uninterrupted_run() {
    let f = fixture();
    let data = synth(&f);

    let full = f.root.join("full");
    let out = run(&[
        "train",
        "--config",
        f.config.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        full.to_str().unwrap(),
        "--steps",
        "20",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr_of(&out));

    let half = f.root.join("half");
    let out = run(&[
        "train",
        "--config",
        f.config.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        half.to_str().unwrap(),
        "--steps",
        "10",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr_of(&out));
    let resumed = f.root.join("resumed");
    let out = run(&[
        "train",
        "--config",
        f.config.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        resumed.to_str().unwrap(),
        "--steps",
        "20",
        "--resume",
        half.join("ckpt_last.ra").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr_of(&out));

    let a = std::fs::read(full.join("ckpt_last.ra")).unwrap();
    let b = std::fs::read(resumed.join("ckpt_last.ra")).unwrap();
    assert!(a == b, "resumed run diverged from the uninterrupted one");

    // Resuming past the target step count is a config error.
    let out = run(&[
        "train",
        "--config",
        f.config.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        f.root.join("again").to_str().unwrap(),
        "--steps",
        "10",
        "--resume",
        full.join("ckpt_last.ra").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "{}", stderr_of(&out));
}

#[test]
fn flags_override_the_config_file() {
    let f = fixture();
    let data = synth(&f);
    let run_dir = train(&f, &data, &["--steps", "6", "--mode", "vae", "--seed", "9"]);
    let snapshot = std::fs::read_to_string(run_dir.join("effective-config.toml")).unwrap();
    let v: toml::Value = toml::from_str(&snapshot).unwrap();
    assert_eq!(v["train"]["steps"].as_integer(), Some(6));
    assert_eq!(v["train"]["seed"].as_integer(), Some(9));
    assert_eq!(v["train"]["objective"]["mode"].as_str(), Some("vae"));
    assert_eq!(v["train"]["arch"]["latent_dim"].as_integer(), Some(8));
}

#[test]
fn unknown_config_keys_are_rejected_by_name() {
    let f = fixture();
    let bad = f.root.join("bad.toml");
    std::fs::write(&bad, "[train]\nlerning_rate_encoder = 1e-4\n").unwrap();
    let out = run(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr_of(&out).contains("lerning_rate_encoder"), "{}", stderr_of(&out));
}

#[test]
fn score_on_an_empty_directory_writes_a_header_only_csv() {
    let f = fixture();
    let arch = ra_core::model::Arch {
        image_h: 32,
        image_w: 32,
        depth: 3,
        base_channels: 4,
        channel_cap: 16,
        latent_dim: 8,
    };
    let model = ra_core::model::Model::<f32>::new(&arch, 1).unwrap();
    let ckpt_path = f.root.join("m.ra");
    ra_core::checkpoint::Checkpoint::from_model(&model, 1, 0).save(&ckpt_path).unwrap();

    let empty = f.root.join("empty");
    std::fs::create_dir(&empty).unwrap();
    let out_dir = f.root.join("scores");
    let out = run(&[
        "score",
        "--checkpoint",
        ckpt_path.to_str().unwrap(),
        "--input",
        empty.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr_of(&out));
    let csv = std::fs::read_to_string(out_dir.join("scores.csv")).unwrap();
    assert_eq!(csv.trim(), "image,class,image_score,ssim,lpips");
}

#[test]
fn score_skips_incompatible_inputs_and_continues() {
    let f = fixture();
    let arch = ra_core::model::Arch {
        image_h: 32,
        image_w: 32,
        depth: 3,
        base_channels: 4,
        channel_cap: 16,
        latent_dim: 8,
    };
    let model = ra_core::model::Model::<f32>::new(&arch, 1).unwrap();
    let ckpt_path = f.root.join("m.ra");
    ra_core::checkpoint::Checkpoint::from_model(&model, 1, 0).save(&ckpt_path).unwrap();

    let inputs = f.root.join("inputs");
    std::fs::create_dir(&inputs).unwrap();
    let good = ra_core::image::Image::zeros(32, 32);
    good.save_png(&inputs.join("good.png")).unwrap();
    let wrong = ra_core::image::Image::zeros(16, 16);
    wrong.save_png(&inputs.join("wrong_size.png")).unwrap();
    std::fs::write(inputs.join("corrupt.png"), b"not a png").unwrap();

    let out_dir = f.root.join("scores");
    let out = run(&[
        "score",
        "--checkpoint",
        ckpt_path.to_str().unwrap(),
        "--input",
        inputs.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr_of(&out));
    let csv = std::fs::read_to_string(out_dir.join("scores.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "only the valid image lands in the csv:\n{csv}");
    assert!(csv.lines().nth(1).unwrap().starts_with("good,"));
    let err = stderr_of(&out);
    assert!(err.contains("wrong_size") && err.contains("corrupt"), "{err}");
}

#[test]
fn score_features_flag_selects_the_perceptual_backend() {
    let f = fixture();
    let data = synth(&f);
    let run_dir = train(&f, &data, &[]);
    let ckpt = run_dir.join("ckpt_best.ra");
    let score = |out_dir: &Path, features: &str| {
        run(&[
            "score",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--input",
            data.join("test.json").to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--features",
            features,
        ])
    };

    let bank_dir = f.root.join("s-bank");
    let out = score(&bank_dir, "bank");
    assert_eq!(code(&out), 0, "{}", stderr_of(&out));
    let snapshot = std::fs::read_to_string(bank_dir.join("effective-config.toml")).unwrap();
    assert!(snapshot.contains("features = \"bank\""), "{snapshot}");

    // The same bank exported as an ra-feat-v1 file loads as backend too.
    let file = f.root.join("bank.ra-feat");
    ra_core::perceptual::FeatureNet::generic_bank().save(&file).unwrap();
    let out = score(&f.root.join("s-file"), file.to_str().unwrap());
    assert_eq!(code(&out), 0, "{}", stderr_of(&out));

    // A missing feature file is a state error naming the backend.
    let out = score(&f.root.join("s-missing"), "/nonexistent/feat.ra");
    assert_eq!(code(&out), 3, "{}", stderr_of(&out));
    assert!(stderr_of(&out).contains("perceptual backend"), "{}", stderr_of(&out));
}

#[test]
fn evaluate_fails_loudly_when_a_map_is_missing() {
    let f = fixture();
    let scores = f.root.join("scores");
    std::fs::create_dir_all(scores.join("maps")).unwrap();
    let manifest = f.root.join("test.json");
    std::fs::write(
        &manifest,
        r#"{"schema_version":1,"split":"test","seed":0,"entries":[
            {"image":"images/h_00000.png","class_label":"healthy"}]}"#,
    )
    .unwrap();
    let out = run(&[
        "evaluate",
        "--scores",
        scores.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
    assert!(stderr_of(&out).contains("h_00000"), "{}", stderr_of(&out));
}

#[test]
fn train_refuses_anomalous_entries_in_the_training_split() {
    let f = fixture();
    let data = synth(&f);
    // Sabotage: pass the test manifest (which contains anomalous images)
    // off as the training split.
    std::fs::copy(data.join("test.json"), data.join("train.json")).unwrap();
    let out = run(&[
        "train",
        "--config",
        f.config.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        f.root.join("run").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
    assert!(stderr_of(&out).contains("healthy"), "{}", stderr_of(&out));
}

#[test]
fn worker_count_env_is_validated() {
    let f = fixture();
    let out = ra()
        .args(["synth", "--config", f.config.to_str().unwrap(), "--out", f.root.join("d").to_str().unwrap()])
        .env("RA_NUM_WORKERS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert!(stderr_of(&out).contains("RA_NUM_WORKERS"), "{}", stderr_of(&out));

    let out = ra()
        .args(["synth", "--config", f.config.to_str().unwrap(), "--out", f.root.join("d2").to_str().unwrap()])
        .env("RA_NUM_WORKERS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr_of(&out));
}
