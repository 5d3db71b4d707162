use std::path::{Path, PathBuf};

use clap::Args;

use ra_core::checkpoint::Checkpoint;
use ra_core::data::DatasetManifest;
use ra_core::image::Image;
use ra_core::metrics::{ssim, write_scores_csv, DetectionOutcome, ImageEval};
use ra_core::perceptual::FeatureNet;
use ra_core::scoring::{perceptual_map, AnomalyMap, Scorer};
use ra_core::{RaError, Result};

use crate::config::RunConfig;

#[derive(Args)]
pub struct ScoreArgs {
    /// TOML config file (the [scoring] section applies)
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Trained checkpoint (overrides [paths].checkpoint)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Directory of PNG images, or a dataset manifest (.json)
    #[arg(long)]
    input: PathBuf,
    /// Output directory (overrides [paths].out_dir)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Perceptual backend: an ra-feat-v1 file, or the keyword `bank` for the
    /// built-in generic filter bank (default: the checkpoint's own encoder)
    #[arg(long)]
    features: Option<PathBuf>,
}

/// One scoring input: id, class label when known, and where to load it from.
struct InputSpec {
    id: String,
    class_label: Option<String>,
    path: PathBuf,
}

fn collect_inputs(input: &Path) -> Result<Vec<InputSpec>> {
    if input.extension().is_some_and(|e| e == "json") {
        let manifest = DatasetManifest::load(input)?;
        let base = input.parent().unwrap_or(Path::new(".")).to_path_buf();
        return Ok(manifest
            .entries
            .iter()
            .map(|e| InputSpec {
                id: e.id(),
                class_label: (!e.is_healthy()).then(|| e.class_label.clone()),
                path: base.join(&e.image),
            })
            .collect());
    }
    if input.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(input)
            .map_err(|e| RaError::io(input, e))?
            .filter_map(|r| r.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "png"))
            .collect();
        files.sort();
        return Ok(files
            .into_iter()
            .map(|path| InputSpec {
                id: path.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
                class_label: None,
                path,
            })
            .collect());
    }
    Err(RaError::Config(format!(
        "input {} must be a directory of PNGs or a manifest .json",
        input.display()
    )))
}

fn score_one(
    scorer: &Scorer<f32>,
    spec: &InputSpec,
    out: &Path,
    top_fraction: f64,
) -> Result<ImageEval> {
    let img = Image::load_png(&spec.path)?;
    let (map, recon) = scorer.score(&img, &spec.id)?;
    recon.save_png(&out.join("recon").join(format!("{}.png", spec.id)))?;
    let ramp_path = out.join("maps").join(format!("{}.ramp", spec.id));
    map.save_ramp(&ramp_path)?;
    map.to_heatmap().save_png(&out.join("heatmaps").join(format!("{}.png", spec.id)))?;

    // Image-level score from the file just written (f32 at rest), so the CSV
    // matches what `evaluate` recomputes from the same artifact.
    let stored = AnomalyMap::load_ramp(&ramp_path)?;
    let structural = if img.h() >= 11 && img.w() >= 11 { Some(ssim(&img, &recon)?) } else { None };
    let perceptual = perceptual_map(scorer.features(), &img, &recon)?;
    let perceptual_mean = perceptual.iter().sum::<f64>() / perceptual.len() as f64;
    Ok(ImageEval {
        id: spec.id.clone(),
        class_label: spec.class_label.clone(),
        image_score: stored.image_score(top_fraction),
        outcome: DetectionOutcome::default(),
        ssim: structural,
        perceptual: Some(perceptual_mean),
    })
}

pub fn run(args: ScoreArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    cfg.scoring.validate()?;
    let ckpt_path = args
        .checkpoint
        .or_else(|| cfg.paths.checkpoint.clone())
        .ok_or_else(|| {
            RaError::Config("no checkpoint: pass --checkpoint or set [paths].checkpoint".into())
        })?;
    let out = args
        .out
        .or_else(|| cfg.paths.out_dir.clone())
        .ok_or_else(|| RaError::Config("no output directory: pass --out or set [paths].out_dir".into()))?;
    cfg.paths.checkpoint = Some(ckpt_path.clone());
    cfg.paths.out_dir = Some(out.clone());
    let features = args.features.or_else(|| cfg.paths.features.clone());
    cfg.paths.features = features.clone();

    let ckpt = Checkpoint::load(&ckpt_path)?;
    let model = ckpt.to_model::<f32>()?;
    let mut scorer = match &features {
        None => Scorer::new(model, cfg.scoring.clone())?,
        Some(sel) if sel.as_os_str() == "bank" => {
            Scorer::with_features(model, FeatureNet::generic_bank(), cfg.scoring.clone())?
        }
        Some(path) => Scorer::with_features(model, FeatureNet::load(path)?, cfg.scoring.clone())?,
    };
    let ckpt_name = ckpt_path.file_name().unwrap_or_default().to_string_lossy().into_owned();
    scorer.set_checkpoint_id(format!("{ckpt_name}#step{}", ckpt.step));

    let inputs = collect_inputs(&args.input)?;
    for sub in ["maps", "heatmaps", "recon"] {
        let dir = out.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| RaError::io(&dir, e))?;
    }
    cfg.write_effective(&out)?;

    let mut evals = Vec::new();
    let mut failures = 0usize;
    for spec in &inputs {
        match score_one(&scorer, spec, &out, cfg.scoring.top_fraction) {
            Ok(eval) => evals.push(eval),
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", spec.id);
                failures += 1;
            }
        }
    }
    write_scores_csv(&out.join("scores.csv"), &evals)?;
    println!("scored {}/{} images -> {}", evals.len(), inputs.len(), out.display());
    if failures > 0 && evals.is_empty() {
        return Err(RaError::Data(format!("all {failures} inputs failed to score")));
    }
    Ok(())
}
