//! In-process end-to-end pipeline on a tiny architecture: synthesize a
//! dataset, train briefly, score the test split, calibrate a threshold,
//! and assemble an evaluation report.

use ra_core::checkpoint::Checkpoint;
use ra_core::data::{generate_synthetic, load_entries};
use ra_core::metrics::{
    assemble_report, calibrate_threshold, detect_regions, ssim, Annotation, AnnotatedRegion,
    ImageEval, MaskRegion, Region,
};
use ra_core::model::Arch;
use ra_core::scoring::{AnomalyMap, Scorer, ScoringConfig};
use ra_core::synth::SynthConfig;
use ra_core::trainer::{fit, TrainConfig};

fn tiny_arch() -> Arch {
    Arch { image_h: 32, image_w: 32, depth: 3, base_channels: 4, channel_cap: 16, latent_dim: 8 }
}

fn tiny_synth() -> SynthConfig {
    SynthConfig {
        image_size: 32,
        n_healthy: 24,
        n_val: 4,
        n_test_healthy: 6,
        n_anomalous: 10,
        seed: 7,
        ..SynthConfig::default()
    }
}

#[test]
fn synth_train_score_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let (train_m, val_m, test_m) = generate_synthetic(&tiny_synth(), &data_dir).unwrap();
    assert_eq!(train_m.entries.len(), 24);
    assert_eq!(val_m.entries.len(), 4);
    assert_eq!(test_m.entries.len(), 16);

    let train = load_entries(&train_m, &data_dir).unwrap();
    let val = load_entries(&val_m, &data_dir).unwrap();
    let test = load_entries(&test_m, &data_dir).unwrap();
    assert!(train.iter().all(|e| e.mask.is_none()));

    let cfg = TrainConfig {
        arch: tiny_arch(),
        steps: 30,
        batch_size: 4,
        checkpoint_every: 15,
        validation_every: 10,
        seed: 3,
        ..TrainConfig::default()
    };
    let train_imgs: Vec<_> = train.iter().map(|e| e.image.clone()).collect();
    let val_imgs: Vec<_> = val.iter().map(|e| e.image.clone()).collect();
    let run_dir = dir.path().join("run");
    let result = fit::<f32>(&cfg, &train_imgs, &val_imgs, &run_dir).unwrap();
    assert_eq!(result.final_step, 30);
    assert!(result.best_checkpoint.exists() && result.last_checkpoint.exists());

    // The log is one JSON record per line, losses all finite.
    let log = std::fs::read_to_string(&result.log_path).unwrap();
    assert!(log.lines().count() >= 30);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if let Some(t) = v.get("encoder").and_then(|e| e.get("total")) {
            assert!(t.as_f64().unwrap().is_finite());
        }
    }

    let ckpt = Checkpoint::load(&result.best_checkpoint).unwrap();
    let scorer = Scorer::new(ckpt.to_model::<f32>().unwrap(), ScoringConfig::default()).unwrap();

    // Calibrate on validation maps, then evaluate the test split.
    let val_maps: Vec<AnomalyMap> = val
        .iter()
        .map(|e| scorer.score(&e.image, &e.id).unwrap().0)
        .collect();
    let threshold = calibrate_threshold(&val_maps, 98.0).unwrap();
    assert!(threshold.is_finite() && threshold >= 0.0);

    let mut evals = Vec::new();
    for entry in &test {
        let (map, x_ph) = scorer.score(&entry.image, &entry.id).unwrap();
        let ann = match &entry.mask {
            Some(mask) => Annotation {
                regions: vec![AnnotatedRegion {
                    class_label: entry.class_label.clone(),
                    region: Region::Mask(MaskRegion::from(mask)),
                }],
            },
            None => Annotation::empty(),
        };
        let outcome = detect_regions(&map, &ann, threshold).unwrap();
        evals.push(ImageEval {
            id: entry.id.clone(),
            class_label: if entry.class_label == ra_core::data::HEALTHY_LABEL {
                None
            } else {
                Some(entry.class_label.clone())
            },
            image_score: scorer.image_score(&map),
            outcome,
            ssim: Some(ssim(&entry.image, &x_ph).unwrap()),
            perceptual: None,
        });
    }
    let report = assemble_report(&evals, threshold);
    assert_eq!(report.n_healthy, 6);
    assert_eq!(report.n_anomalous, 10);
    assert_eq!(report.total.regions, 10);
    assert!(report.image_auroc.is_some());
    let auroc = report.image_auroc.unwrap();
    assert!((0.0..=1.0).contains(&auroc));
    assert!(report.healthy_ssim_mean.is_some());
    assert!(!report.per_class.is_empty());
    let text = report.render_text();
    assert!(text.contains("image AUROC"));
}

#[test]
fn training_is_deterministic_for_a_fixed_seed() {
    let synth = tiny_synth();
    let imgs: Vec<_> =
        (0..8).map(|i| ra_core::synth::healthy_phantom(&synth, i).unwrap()).collect();
    let cfg = TrainConfig {
        arch: tiny_arch(),
        steps: 8,
        batch_size: 2,
        checkpoint_every: 8,
        validation_every: 8,
        seed: 11,
        ..TrainConfig::default()
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    fit::<f32>(&cfg, &imgs[..6], &imgs[6..], d1.path()).unwrap();
    fit::<f32>(&cfg, &imgs[..6], &imgs[6..], d2.path()).unwrap();
    for name in [ra_core::trainer::BEST_CHECKPOINT, ra_core::trainer::LAST_CHECKPOINT] {
        let a = std::fs::read(d1.path().join(name)).unwrap();
        let b = std::fs::read(d2.path().join(name)).unwrap();
        assert!(a == b, "{name} differs between identical runs");
    }
}
