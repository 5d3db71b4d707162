use std::collections::HashMap;
use std::path::{Path, PathBuf};

use clap::Args;

use ra_core::data::{DatasetManifest, HEALTHY_LABEL};
use ra_core::image::Mask;
use ra_core::metrics::{
    assemble_report, calibrate_threshold, detect_regions_with, AnnotatedRegion, Annotation,
    ImageEval, MaskRegion, Region,
};
use ra_core::scoring::AnomalyMap;
use ra_core::{RaError, Result};

use crate::config::RunConfig;

#[derive(Args)]
pub struct EvaluateArgs {
    /// TOML config file (the [evaluate] and [scoring] sections apply)
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Directory written by `ra score` (expects maps/ and scores.csv)
    #[arg(long)]
    scores: PathBuf,
    /// Test manifest with class labels and ground-truth masks
    #[arg(long)]
    manifest: PathBuf,
    /// Report directory (defaults to the scores directory)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fixed pixel threshold (skips healthy-percentile calibration)
    #[arg(long)]
    threshold: Option<f64>,
    /// Calibration percentile over pooled healthy map scores
    #[arg(long)]
    percentile: Option<f64>,
    #[arg(long)]
    min_fp_area: Option<usize>,
    /// Fraction of top pixels that forms the image-level score
    #[arg(long)]
    top_fraction: Option<f64>,
}

/// ssim/lpips per image id, as written by `ra score`.
fn read_reconstruction_stats(csv_path: &Path) -> Result<HashMap<String, (Option<f64>, Option<f64>)>> {
    let mut out = HashMap::new();
    let mut rdr = csv::Reader::from_path(csv_path)
        .map_err(|e| RaError::Data(format!("{}: {e}", csv_path.display())))?;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| RaError::Data(format!("{}: {e}", csv_path.display())))?;
        let parse = |i: usize| -> Option<f64> { rec.get(i).and_then(|s| s.parse().ok()) };
        if let Some(id) = rec.get(0) {
            out.insert(id.to_string(), (parse(3), parse(4)));
        }
    }
    Ok(out)
}

pub fn run(args: EvaluateArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(v) = args.threshold {
        cfg.evaluate.threshold = Some(v);
    }
    if let Some(v) = args.percentile {
        cfg.evaluate.calibration_percentile = v;
    }
    if let Some(v) = args.min_fp_area {
        cfg.evaluate.min_fp_area = v;
    }
    if let Some(v) = args.top_fraction {
        cfg.scoring.top_fraction = v;
    }
    cfg.evaluate.validate()?;
    cfg.scoring.validate()?;

    let manifest = DatasetManifest::load(&args.manifest)?;
    if manifest.entries.is_empty() {
        return Err(RaError::Data(format!("manifest {} has no entries", args.manifest.display())));
    }
    let base = args.manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let maps_dir = args.scores.join("maps");

    let mut loaded = Vec::new();
    for entry in &manifest.entries {
        let id = entry.id();
        let ramp = maps_dir.join(format!("{id}.ramp"));
        if !ramp.is_file() {
            return Err(RaError::Data(format!(
                "no score for manifest entry '{}' (expected {})",
                entry.image,
                ramp.display()
            )));
        }
        let map = AnomalyMap::load_ramp(&ramp)?;
        let annotation = match &entry.mask {
            Some(rel) => {
                let mask = Mask::load_png(&base.join(rel))?;
                Annotation {
                    regions: vec![AnnotatedRegion {
                        class_label: entry.class_label.clone(),
                        region: Region::Mask(MaskRegion::from(&mask)),
                    }],
                }
            }
            None => Annotation::empty(),
        };
        loaded.push((id, entry.class_label.clone(), map, annotation));
    }

    let threshold = match cfg.evaluate.threshold {
        Some(t) => t,
        None => {
            let healthy: Vec<AnomalyMap> = loaded
                .iter()
                .filter(|(_, c, _, _)| c == HEALTHY_LABEL)
                .map(|(_, _, m, _)| m.clone())
                .collect();
            if healthy.is_empty() {
                return Err(RaError::Config(
                    "manifest has no healthy entries to calibrate on; pass --threshold".into(),
                ));
            }
            calibrate_threshold(&healthy, cfg.evaluate.calibration_percentile)?
        }
    };

    let csv_path = args.scores.join("scores.csv");
    let stats = if csv_path.is_file() {
        read_reconstruction_stats(&csv_path)?
    } else {
        eprintln!("note: {} not found; reconstruction stats omitted", csv_path.display());
        HashMap::new()
    };

    let mut evals = Vec::new();
    for (id, class_label, map, annotation) in &loaded {
        let outcome = detect_regions_with(map, annotation, threshold, cfg.evaluate.min_fp_area)?;
        let (ssim, perceptual) = stats.get(id).copied().unwrap_or((None, None));
        evals.push(ImageEval {
            id: id.clone(),
            class_label: (class_label != HEALTHY_LABEL).then(|| class_label.clone()),
            image_score: map.image_score(cfg.scoring.top_fraction),
            outcome,
            ssim,
            perceptual,
        });
    }

    let report = assemble_report(&evals, threshold);
    let out = args.out.unwrap_or_else(|| args.scores.clone());
    std::fs::create_dir_all(&out).map_err(|e| RaError::io(&out, e))?;
    cfg.write_effective(&out)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| RaError::Data(format!("cannot encode report: {e}")))?;
    let json_path = out.join("report.json");
    std::fs::write(&json_path, json + "\n").map_err(|e| RaError::io(&json_path, e))?;
    let text = report.render_text();
    let text_path = out.join("report.txt");
    std::fs::write(&text_path, &text).map_err(|e| RaError::io(&text_path, e))?;
    print!("{text}");
    println!("report written to {}", out.display());
    Ok(())
}
