//! Dataset manifests, the synthetic benchmark generator, folder ingestion,
//! and deterministic split assignment.
//!
//! A manifest is a small JSON file listing images (paths relative to the
//! manifest's directory), optional ground-truth masks, and class labels.
//! Everything that touches randomness goes through counter-based streams, so
//! the same seed reproduces the same bytes on disk.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{RaError, Result};
use crate::image::{Image, Mask};
use crate::rng::stream;
use crate::synth::{anomalous_phantom, healthy_phantom, SynthConfig};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const HEALTHY_LABEL: &str = "healthy";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    All,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::All => "all",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Image path relative to the manifest's directory.
    pub image: String,
    /// Ground-truth anomaly mask, when one exists.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    pub class_label: String,
}

impl ManifestEntry {
    pub fn is_healthy(&self) -> bool {
        self.class_label == HEALTHY_LABEL
    }

    /// Identifier derived from the image file stem.
    pub fn id(&self) -> String {
        Path::new(&self.image)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.image.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub split: Split,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(split: Split, seed: u64) -> Self {
        DatasetManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            split,
            seed,
            warnings: Vec::new(),
            entries: Vec::new(),
        }
    }

    pub fn healthy_only(&self) -> bool {
        self.entries.iter().all(|e| e.is_healthy())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| RaError::Data(format!("cannot encode manifest: {e}")))?;
        fs::write(path, text + "\n").map_err(|e| RaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| RaError::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| RaError::Data(format!("invalid manifest {}: {e}", path.display())))?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(RaError::Data(format!(
                "unsupported manifest schema_version {} in {} (expected {})",
                m.schema_version,
                path.display(),
                MANIFEST_SCHEMA_VERSION
            )));
        }
        Ok(m)
    }
}

/// A manifest entry loaded into memory for scoring or evaluation.
pub struct LoadedEntry {
    pub id: String,
    pub class_label: String,
    pub image: Image,
    pub mask: Option<Mask>,
}

/// Load every entry, resolving paths against `base` (usually the manifest's
/// directory).
pub fn load_entries(manifest: &DatasetManifest, base: &Path) -> Result<Vec<LoadedEntry>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let image = Image::load_png(&base.join(&e.image))?;
            let mask = match &e.mask {
                Some(p) => Some(Mask::load_png(&base.join(p))?),
                None => None,
            };
            Ok(LoadedEntry { id: e.id(), class_label: e.class_label.clone(), image, mask })
        })
        .collect()
}

/// Load just the images, in manifest order.
pub fn load_images(manifest: &DatasetManifest, base: &Path) -> Result<Vec<Image>> {
    manifest.entries.iter().map(|e| Image::load_png(&base.join(&e.image))).collect()
}

fn image_rel_path(name: &str) -> String {
    format!("images/{name}")
}

/// Render the synthetic benchmark into `out_dir` and write `train.json`,
/// `val.json`, and `test.json` manifests.
///
/// Healthy phantoms fill train/val/test in index order; anomalous samples
/// (test only) are injected into held-out phantoms and come with exact masks.
pub fn generate_synthetic(
    cfg: &SynthConfig,
    out_dir: &Path,
) -> Result<(DatasetManifest, DatasetManifest, DatasetManifest)> {
    cfg.validate()?;
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| RaError::io(&images_dir, e))?;
    let masks_dir = out_dir.join("masks");
    if cfg.n_anomalous > 0 {
        fs::create_dir_all(&masks_dir).map_err(|e| RaError::io(&masks_dir, e))?;
    }

    let total = cfg.total_healthy();
    let healthy: Vec<Image> = (0..total as u64)
        .into_par_iter()
        .map(|i| healthy_phantom(cfg, i))
        .collect::<Result<_>>()?;
    for (i, img) in healthy.iter().enumerate() {
        img.save_png(&images_dir.join(format!("healthy_{i:05}.png")))?;
    }

    let anomalous: Vec<_> = (0..cfg.n_anomalous as u64)
        .into_par_iter()
        .map(|i| anomalous_phantom(cfg, i))
        .collect::<Result<_>>()?;
    for (i, s) in anomalous.iter().enumerate() {
        s.image.save_png(&images_dir.join(format!("anomalous_{i:05}.png")))?;
        s.mask.save_png(&masks_dir.join(format!("anomalous_{i:05}.png")))?;
    }

    let healthy_entry = |i: usize| ManifestEntry {
        image: image_rel_path(&format!("healthy_{i:05}.png")),
        mask: None,
        class_label: HEALTHY_LABEL.to_string(),
    };

    let mut train = DatasetManifest::new(Split::Train, cfg.seed);
    train.entries = (0..cfg.n_healthy).map(healthy_entry).collect();
    let mut val = DatasetManifest::new(Split::Val, cfg.seed);
    val.entries = (cfg.n_healthy..cfg.n_healthy + cfg.n_val).map(healthy_entry).collect();
    let mut test = DatasetManifest::new(Split::Test, cfg.seed);
    test.entries = (cfg.n_healthy + cfg.n_val..total).map(healthy_entry).collect();
    test.entries.extend(anomalous.iter().enumerate().map(|(i, s)| ManifestEntry {
        image: image_rel_path(&format!("anomalous_{i:05}.png")),
        mask: Some(format!("masks/anomalous_{i:05}.png")),
        class_label: s.kind.label().to_string(),
    }));

    train.save(&out_dir.join("train.json"))?;
    val.save(&out_dir.join("val.json"))?;
    test.save(&out_dir.join("test.json"))?;
    Ok((train, val, test))
}

/// Percentile over unsorted values; `p` in [0, 100], linear interpolation.
fn percentile(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n == 1 {
        return values[0];
    }
    let rank = p / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    values[lo] * (1.0 - frac) + values[hi.min(n - 1)] * frac
}

/// Normalize one image: percentile clip, then rescale the clipped span to
/// [0, 1]. A constant image maps to all zeros.
fn normalize(img: &Image, target: (usize, usize), clip: (f64, f64)) -> Image {
    let (th, tw) = target;
    let resized = crate::image::bilinear_resize(img.data(), img.h(), img.w(), th, tw);
    let mut sorted = resized.clone();
    let lo = percentile(&mut sorted, clip.0);
    let hi = percentile(&mut sorted, clip.1);
    let span = hi - lo;
    let data = if span > 0.0 {
        resized.iter().map(|v| ((v.clamp(lo, hi) - lo) / span).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; th * tw]
    };
    Image::from_vec(th, tw, data)
}

/// Ingest a folder of images: resize to `target`, percentile-clip with
/// `clip = (low, high)` percentiles, min-max normalize, and write 8-bit PNG
/// exports under `out_dir/images/`. Unreadable files are skipped and recorded
/// as warnings in the returned manifest.
pub fn ingest(
    src_dir: &Path,
    out_dir: &Path,
    target: (usize, usize),
    clip: (f64, f64),
) -> Result<DatasetManifest> {
    if target.0 == 0 || target.1 == 0 {
        return Err(RaError::Config("ingest target size must be non-zero".into()));
    }
    if !(0.0..=100.0).contains(&clip.0) || !(0.0..=100.0).contains(&clip.1) || clip.0 >= clip.1 {
        return Err(RaError::Config(format!(
            "clip percentiles ({}, {}) must satisfy 0 <= low < high <= 100",
            clip.0, clip.1
        )));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(src_dir)
        .map_err(|e| RaError::io(src_dir, e))?
        .filter_map(|r| r.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.path())
        .collect();
    files.sort();

    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| RaError::io(&images_dir, e))?;

    let mut manifest = DatasetManifest::new(Split::All, 0);
    for path in &files {
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        match Image::load_png(path) {
            Ok(img) => {
                let stem = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| name.clone());
                let out_name = format!("{stem}.png");
                normalize(&img, target, clip).save_png(&images_dir.join(&out_name))?;
                manifest.entries.push(ManifestEntry {
                    image: image_rel_path(&out_name),
                    mask: None,
                    class_label: HEALTHY_LABEL.to_string(),
                });
            }
            Err(e) => manifest.warnings.push(format!("skipped {name}: {e}")),
        }
    }
    if manifest.entries.is_empty() {
        return Err(RaError::Data(format!(
            "no readable images in {} ({} files skipped)",
            src_dir.display(),
            manifest.warnings.len()
        )));
    }
    Ok(manifest)
}

/// Shuffle-then-partition into train/val/test. `fractions` must sum to 1;
/// split sizes round to the nearest integer. Non-healthy entries assigned to
/// train or val are moved to test so that only test carries anomalies.
pub fn split_manifest(
    manifest: &DatasetManifest,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest, DatasetManifest)> {
    let (ft, fv, fs_) = fractions;
    for f in [ft, fv, fs_] {
        if !f.is_finite() || !(0.0..=1.0).contains(&f) {
            return Err(RaError::Config(format!("split fraction {f} must lie in [0, 1]")));
        }
    }
    if (ft + fv + fs_ - 1.0).abs() > 1e-9 {
        return Err(RaError::Config(format!(
            "split fractions ({ft}, {fv}, {fs_}) must sum to 1"
        )));
    }

    let n = manifest.entries.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, "split", 0);
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }

    let n_train = (ft * n as f64 + 0.5).floor() as usize;
    let n_val = ((fv * n as f64 + 0.5).floor() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);

    let mut train = DatasetManifest::new(Split::Train, seed);
    let mut val = DatasetManifest::new(Split::Val, seed);
    let mut test = DatasetManifest::new(Split::Test, seed);
    for (rank, &idx) in order.iter().enumerate() {
        let entry = manifest.entries[idx].clone();
        if rank < n_train {
            if entry.is_healthy() {
                train.entries.push(entry);
            } else {
                test.entries.push(entry);
            }
        } else if rank < n_train + n_val {
            if entry.is_healthy() {
                val.entries.push(entry);
            } else {
                test.entries.push(entry);
            }
        } else {
            test.entries.push(entry);
        }
    }
    Ok((train, val, test))
}
