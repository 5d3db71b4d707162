use std::path::PathBuf;

use clap::Args;

use ra_core::checkpoint::Checkpoint;
use ra_core::data::{load_images, DatasetManifest};
use ra_core::objectives::Mode;
use ra_core::trainer::{ablation_mode, fit, fit_from, validate_model, TrainState};
use ra_core::{RaError, Result};

use crate::config::RunConfig;

#[derive(Args)]
pub struct TrainArgs {
    /// TOML config file (the [train] section applies)
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Dataset root containing train.json and val.json (overrides
    /// [paths].data_root)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory for checkpoints and logs (overrides [paths].out_dir)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Objective ablation: full method or a baseline
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Continue from an existing checkpoint (bitwise-identical to an
    /// uninterrupted run of the same total steps)
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
pub enum ModeArg {
    Ra,
    Sivae,
    Vae,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Ra => Mode::Ra,
            ModeArg::Sivae => Mode::Sivae,
            ModeArg::Vae => Mode::Vae,
        }
    }
}

pub fn run(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(v) = args.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = args.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if let Some(m) = args.mode {
        cfg.train = ablation_mode(&cfg.train, m.into());
    }
    let data_root = args
        .data
        .or_else(|| cfg.paths.data_root.clone())
        .ok_or_else(|| RaError::Config("no dataset: pass --data or set [paths].data_root".into()))?;
    let out = args
        .out
        .or_else(|| cfg.paths.out_dir.clone())
        .ok_or_else(|| RaError::Config("no run directory: pass --out or set [paths].out_dir".into()))?;
    cfg.paths.data_root = Some(data_root.clone());
    cfg.paths.out_dir = Some(out.clone());
    cfg.train.validate()?;

    let train_manifest = DatasetManifest::load(&data_root.join("train.json"))?;
    let val_manifest = DatasetManifest::load(&data_root.join("val.json"))?;
    for (name, m) in [("train", &train_manifest), ("val", &val_manifest)] {
        if !m.healthy_only() {
            return Err(RaError::Data(format!(
                "{name} manifest contains non-healthy entries; training data must be healthy only"
            )));
        }
    }
    let train_imgs = load_images(&train_manifest, &data_root)?;
    let val_imgs = load_images(&val_manifest, &data_root)?;

    std::fs::create_dir_all(&out).map_err(|e| RaError::io(&out, e))?;
    cfg.write_effective(&out)?;

    let result = match &args.resume {
        None => fit::<f32>(&cfg.train, &train_imgs, &val_imgs, &out)?,
        Some(ckpt_path) => {
            let ckpt = Checkpoint::load(ckpt_path)?;
            if ckpt.arch != cfg.train.arch {
                return Err(RaError::Config(format!(
                    "checkpoint architecture {:?} does not match configured {:?}",
                    ckpt.arch, cfg.train.arch
                )));
            }
            if ckpt.step >= cfg.train.steps {
                return Err(RaError::Config(format!(
                    "checkpoint is already at step {} >= configured steps {}",
                    ckpt.step, cfg.train.steps
                )));
            }
            if ckpt.seed != cfg.train.seed {
                eprintln!(
                    "note: resuming with checkpoint seed {} (config says {})",
                    ckpt.seed, cfg.train.seed
                );
            }
            let state = TrainState::<f32>::from_checkpoint(&ckpt)?;
            fit_from(state, &cfg.train, &train_imgs, &val_imgs, &out)?
        }
    };

    let best = Checkpoint::load(&result.best_checkpoint)?;
    let model = best.to_model::<f32>()?;
    let vm = validate_model(&model, &val_imgs)?;
    println!("training finished at step {}", result.final_step);
    println!("  best checkpoint: {} (step {})", result.best_checkpoint.display(), best.step);
    println!("  last checkpoint: {}", result.last_checkpoint.display());
    println!("  log: {}", result.log_path.display());
    let ssim = vm.ssim.map_or("n/a".to_string(), |s| format!("{s:.4}"));
    println!("  best-model validation: L1 {:.6}  SSIM {ssim}", vm.l1);
    Ok(())
}
