use std::path::PathBuf;

use clap::Args;

use ra_core::data::generate_synthetic;
use ra_core::{RaError, Result};

use crate::config::RunConfig;

#[derive(Args)]
pub struct SynthArgs {
    /// TOML config file (the [synth] section applies)
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Dataset output directory (overrides [paths].data_root)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    n_healthy: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test_healthy: Option<usize>,
    #[arg(long)]
    n_anomalous: Option<usize>,
}

pub fn run(args: SynthArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.config.as_deref())?;
    if let Some(v) = args.seed {
        cfg.synth.seed = v;
    }
    if let Some(v) = args.image_size {
        cfg.synth.image_size = v;
    }
    if let Some(v) = args.n_healthy {
        cfg.synth.n_healthy = v;
    }
    if let Some(v) = args.n_val {
        cfg.synth.n_val = v;
    }
    if let Some(v) = args.n_test_healthy {
        cfg.synth.n_test_healthy = v;
    }
    if let Some(v) = args.n_anomalous {
        cfg.synth.n_anomalous = v;
    }
    let out = args
        .out
        .or_else(|| cfg.paths.data_root.clone())
        .ok_or_else(|| RaError::Config("no output directory: pass --out or set [paths].data_root".into()))?;
    cfg.paths.data_root = Some(out.clone());
    cfg.synth.validate()?;

    std::fs::create_dir_all(&out).map_err(|e| RaError::io(&out, e))?;
    let (train, val, test) = generate_synthetic(&cfg.synth, &out)?;
    cfg.write_effective(&out)?;

    let anomalous = test.entries.iter().filter(|e| !e.is_healthy()).count();
    println!("dataset written to {}", out.display());
    println!("  train: {} healthy", train.entries.len());
    println!("  val:   {} healthy", val.entries.len());
    println!("  test:  {} images ({anomalous} anomalous with masks)", test.entries.len());
    Ok(())
}
