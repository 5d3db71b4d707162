//! Synthetic anatomy phantoms with ground-truth anomaly masks.
//!
//! A phantom is five nested ellipse structures — skull shell, shaded brain,
//! two ventricles, and a bright nucleus — composited back-to-front with
//! smoothstep edges over a noisy, gently shaded background. Per-sample pose
//! and intensity jitter comes from counter-based streams, so a given (seed,
//! index) renders bit-identically on every platform.
//!
//! Anomalous samples modify one healthy phantom inside an exact region: the
//! emitted mask covers every pixel that may differ, and everything outside it
//! is carried over unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{RaError, Result};
use crate::image::{Image, Mask};
use crate::rng::{stream, SplitMix64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    BrightBlob,
    DarkBlob,
    TexturePatch,
    StructureDeletion,
    StructureEnlargement,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 5] = [
        AnomalyKind::BrightBlob,
        AnomalyKind::DarkBlob,
        AnomalyKind::TexturePatch,
        AnomalyKind::StructureDeletion,
        AnomalyKind::StructureEnlargement,
    ];

    /// Class label used in manifests and evaluation reports.
    pub fn label(&self) -> &'static str {
        match self {
            AnomalyKind::BrightBlob => "bright_blob",
            AnomalyKind::DarkBlob => "dark_blob",
            AnomalyKind::TexturePatch => "texture_patch",
            AnomalyKind::StructureDeletion => "structure_deletion",
            AnomalyKind::StructureEnlargement => "structure_enlargement",
        }
    }
}

impl std::fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Square image side length.
    pub image_size: usize,
    /// Healthy training images.
    pub n_healthy: usize,
    /// Healthy validation images.
    pub n_val: usize,
    /// Healthy test images.
    pub n_test_healthy: usize,
    /// Anomalous test images (kinds cycle in order).
    pub n_anomalous: usize,
    pub kinds: Vec<AnomalyKind>,
    /// Blob/patch radius range as a fraction of the image side.
    pub blob_radius_range: (f64, f64),
    pub bright_intensity_range: (f64, f64),
    pub dark_intensity_range: (f64, f64),
    pub texture_amplitude_range: (f64, f64),
    pub enlargement_factor_range: (f64, f64),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            n_healthy: 600,
            n_val: 60,
            n_test_healthy: 60,
            n_anomalous: 100,
            kinds: AnomalyKind::ALL.to_vec(),
            blob_radius_range: (0.05, 0.11),
            bright_intensity_range: (0.75, 0.95),
            dark_intensity_range: (0.05, 0.30),
            texture_amplitude_range: (0.15, 0.30),
            enlargement_factor_range: (1.6, 2.2),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(RaError::Config(format!(
                "image_size must be >= 16, got {}",
                self.image_size
            )));
        }
        if self.n_anomalous > 0 && self.kinds.is_empty() {
            return Err(RaError::Config("anomalous samples requested but kinds is empty".into()));
        }
        let ordered = |name: &str, (lo, hi): (f64, f64)| {
            if lo.is_finite() && hi.is_finite() && lo <= hi {
                Ok(())
            } else {
                Err(RaError::Config(format!("{name} range ({lo}, {hi}) is invalid")))
            }
        };
        ordered("blob_radius", self.blob_radius_range)?;
        ordered("bright_intensity", self.bright_intensity_range)?;
        ordered("dark_intensity", self.dark_intensity_range)?;
        ordered("texture_amplitude", self.texture_amplitude_range)?;
        ordered("enlargement_factor", self.enlargement_factor_range)?;
        if !(self.blob_radius_range.0 > 0.0 && self.blob_radius_range.1 <= 0.25) {
            return Err(RaError::Config(format!(
                "blob_radius range ({}, {}) must lie in (0, 0.25] of the image side",
                self.blob_radius_range.0, self.blob_radius_range.1
            )));
        }
        if self.enlargement_factor_range.0 < 1.0 || self.enlargement_factor_range.1 > 2.5 {
            return Err(RaError::Config(format!(
                "enlargement_factor range ({}, {}) must lie in [1, 2.5]",
                self.enlargement_factor_range.0, self.enlargement_factor_range.1
            )));
        }
        for r in [
            self.bright_intensity_range,
            self.dark_intensity_range,
            self.texture_amplitude_range,
        ] {
            if r.0 < 0.0 || r.1 > 1.0 {
                return Err(RaError::Config(format!(
                    "intensity/amplitude range ({}, {}) must lie in [0, 1]",
                    r.0, r.1
                )));
            }
        }
        Ok(())
    }

    /// Total number of healthy phantoms across all splits.
    pub fn total_healthy(&self) -> usize {
        self.n_healthy + self.n_val + self.n_test_healthy
    }
}

#[derive(Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    theta: f64,
}

impl Ellipse {
    fn norm_radius(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (c, s) = (self.theta.cos(), self.theta.sin());
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        ((u / self.rx) * (u / self.rx) + (v / self.ry) * (v / self.ry)).sqrt()
    }

    /// ~1.5-pixel smoothstep edge; exactly 0 outside `r = 1 + edge`.
    fn edge(&self) -> f64 {
        (1.5 / self.rx.min(self.ry)).min(0.5)
    }

    fn alpha_at(&self, r: f64) -> f64 {
        let e = self.edge();
        let t = ((1.0 + e - r) / (2.0 * e)).clamp(0.0, 1.0);
        t * t * (3.0 - 2.0 * t)
    }

    fn alpha(&self, x: f64, y: f64) -> f64 {
        self.alpha_at(self.norm_radius(x, y))
    }

    fn supports(&self, x: f64, y: f64) -> bool {
        self.norm_radius(x, y) < 1.0 + self.edge()
    }

    fn scaled(&self, factor: f64) -> Ellipse {
        Ellipse { rx: self.rx * factor, ry: self.ry * factor, ..*self }
    }
}

struct Structure {
    ell: Ellipse,
    intensity: f64,
    /// Darkens toward the rim: intensity · (1 − shade·r²).
    radial_shade: f64,
}

/// One phantom's sampled pose, intensities, and background field.
struct Phantom {
    size: usize,
    structures: Vec<Structure>,
    grad_angle: f64,
    grad_strength: f64,
    noise: Vec<f64>,
}

const BRAIN: usize = 1;
/// Structures eligible for deletion/enlargement anomalies.
const MUTABLE: [usize; 3] = [2, 3, 4];

fn build_phantom(cfg: &SynthConfig, phantom_idx: u64) -> Phantom {
    let s_px = cfg.image_size as f64;
    let mut rng = stream(cfg.seed, "phantom", phantom_idx);
    let scale = 0.92 + 0.16 * rng.next_f64();
    let dcx = -0.025 + 0.05 * rng.next_f64();
    let dcy = -0.025 + 0.05 * rng.next_f64();
    let theta = -0.12 + 0.24 * rng.next_f64();
    let jit: Vec<f64> = (0..5).map(|_| -0.04 + 0.08 * rng.next_f64()).collect();
    let grad_angle = rng.next_f64() * std::f64::consts::TAU;
    let grad_strength = 0.05 * rng.next_f64();
    let noise_amp = 0.004 + 0.008 * rng.next_f64();

    let (cx0, cy0) = ((0.5 + dcx) * s_px, (0.5 + dcy) * s_px);
    let (ct, st) = (theta.cos(), theta.sin());
    // (offset x, offset y, rx, ry, own angle, intensity, shade) in fractions
    // of the image side; offsets rotate with the global pose.
    let layout: [(f64, f64, f64, f64, f64, f64, f64); 5] = [
        (0.0, 0.0, 0.40, 0.34, 0.0, 0.95, 0.0),
        (0.0, 0.0, 0.335, 0.275, 0.0, 0.55, 0.25),
        (-0.10, -0.045, 0.052, 0.092, 0.25, 0.15, 0.0),
        (0.10, -0.045, 0.052, 0.092, -0.25, 0.15, 0.0),
        (0.0, 0.155, 0.075, 0.055, 0.0, 0.80, 0.0),
    ];
    let structures = layout
        .iter()
        .zip(&jit)
        .map(|((ox, oy, rx, ry, own, inten, shade), j)| Structure {
            ell: Ellipse {
                cx: cx0 + scale * s_px * (ox * ct - oy * st),
                cy: cy0 + scale * s_px * (ox * st + oy * ct),
                rx: rx * scale * s_px,
                ry: ry * scale * s_px,
                theta: theta + own,
            },
            intensity: inten + j,
            radial_shade: *shade,
        })
        .collect();

    let mut nrng = stream(cfg.seed, "phantom-noise", phantom_idx);
    let noise = (0..cfg.image_size * cfg.image_size)
        .map(|_| noise_amp * (2.0 * nrng.next_f64() - 1.0))
        .collect();
    Phantom { size: cfg.image_size, structures, grad_angle, grad_strength, noise }
}

/// Composite the structure stack; `skip` removes one structure,
/// `enlarge` scales one structure's radii.
fn render(p: &Phantom, skip: Option<usize>, enlarge: Option<(usize, f64)>) -> Image {
    let s = p.size;
    let (ga_c, ga_s) = (p.grad_angle.cos(), p.grad_angle.sin());
    let mut data = Vec::with_capacity(s * s);
    for yi in 0..s {
        for xi in 0..s {
            let (x, y) = (xi as f64 + 0.5, yi as f64 + 0.5);
            let proj = ((x / s as f64) * ga_c + (y / s as f64) * ga_s + 1.0) / 2.0;
            let mut v = 0.03 + p.grad_strength * proj + p.noise[yi * s + xi];
            for (i, st) in p.structures.iter().enumerate() {
                if skip == Some(i) {
                    continue;
                }
                let ell = match enlarge {
                    Some((j, f)) if j == i => st.ell.scaled(f),
                    _ => st.ell,
                };
                let r = ell.norm_radius(x, y);
                let a = ell.alpha_at(r);
                if a > 0.0 {
                    let shade = 1.0 - st.radial_shade * (r * r).min(1.0);
                    v = a * (st.intensity * shade) + (1.0 - a) * v;
                }
            }
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Image::from_vec(s, s, data)
}

/// Deterministic healthy phantom for `(cfg.seed, idx)`.
pub fn healthy_phantom(cfg: &SynthConfig, idx: u64) -> Result<Image> {
    cfg.validate()?;
    Ok(render(&build_phantom(cfg, idx), None, None))
}

/// An anomalous sample plus everything needed to verify it.
pub struct AnomalousSample {
    /// The healthy phantom the anomaly was injected into.
    pub source: Image,
    pub image: Image,
    /// Covers every pixel that may differ from `source`.
    pub mask: Mask,
    pub kind: AnomalyKind,
}

fn support_mask(size: usize, pred: impl Fn(f64, f64) -> bool) -> Mask {
    let mut m = Mask::zeros(size, size);
    for yi in 0..size {
        for xi in 0..size {
            if pred(xi as f64 + 0.5, yi as f64 + 0.5) {
                m.set(yi, xi, true);
            }
        }
    }
    m
}

fn range_draw(rng: &mut SplitMix64, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.next_f64()
}

/// Anomalous test sample `idx`: injects one anomaly (kinds cycle in config
/// order) into a dedicated healthy phantom that belongs to no other split.
pub fn anomalous_phantom(cfg: &SynthConfig, idx: u64) -> Result<AnomalousSample> {
    cfg.validate()?;
    if cfg.kinds.is_empty() {
        return Err(RaError::Config("no anomaly kinds configured".into()));
    }
    let phantom = build_phantom(cfg, cfg.total_healthy() as u64 + idx);
    let source = render(&phantom, None, None);
    let kind = cfg.kinds[(idx as usize) % cfg.kinds.len()];
    let mut rng = stream(cfg.seed, "anomaly", idx);
    let size = cfg.image_size;
    let s_px = size as f64;
    let brain = phantom.structures[BRAIN].ell;

    let blob_geometry = |rng: &mut SplitMix64| -> Ellipse {
        let ox = -0.16 + 0.32 * rng.next_f64();
        let oy = -0.16 + 0.32 * rng.next_f64();
        let rx = range_draw(rng, cfg.blob_radius_range) * s_px;
        let ry = range_draw(rng, cfg.blob_radius_range) * s_px;
        let th = rng.next_f64() * std::f64::consts::PI;
        // Offsets follow the phantom pose so blobs stay inside the brain.
        let (c, s) = (brain.theta.cos(), brain.theta.sin());
        Ellipse {
            cx: brain.cx + s_px * (ox * c - oy * s),
            cy: brain.cy + s_px * (ox * s + oy * c),
            rx,
            ry,
            theta: th,
        }
    };

    let (image, mask) = match kind {
        AnomalyKind::BrightBlob | AnomalyKind::DarkBlob => {
            let ell = blob_geometry(&mut rng);
            let intensity = range_draw(
                &mut rng,
                if kind == AnomalyKind::BrightBlob {
                    cfg.bright_intensity_range
                } else {
                    cfg.dark_intensity_range
                },
            );
            let mut data = source.data().to_vec();
            for yi in 0..size {
                for xi in 0..size {
                    let a = ell.alpha(xi as f64 + 0.5, yi as f64 + 0.5);
                    if a > 0.0 {
                        let i = yi * size + xi;
                        data[i] = (a * intensity + (1.0 - a) * data[i]).clamp(0.0, 1.0);
                    }
                }
            }
            (Image::from_vec(size, size, data), support_mask(size, |x, y| ell.supports(x, y)))
        }
        AnomalyKind::TexturePatch => {
            let ell = blob_geometry(&mut rng);
            let amp = range_draw(&mut rng, cfg.texture_amplitude_range);
            let mut data = source.data().to_vec();
            for yi in 0..size {
                for xi in 0..size {
                    let a = ell.alpha(xi as f64 + 0.5, yi as f64 + 0.5);
                    if a > 0.0 {
                        let i = yi * size + xi;
                        let n = 2.0 * rng.next_f64() - 1.0;
                        data[i] = (data[i] + a * amp * n).clamp(0.0, 1.0);
                    }
                }
            }
            (Image::from_vec(size, size, data), support_mask(size, |x, y| ell.supports(x, y)))
        }
        AnomalyKind::StructureDeletion => {
            let target = MUTABLE[(rng.next_u64() % MUTABLE.len() as u64) as usize];
            let ell = phantom.structures[target].ell;
            (render(&phantom, Some(target), None), support_mask(size, |x, y| ell.supports(x, y)))
        }
        AnomalyKind::StructureEnlargement => {
            let target = MUTABLE[(rng.next_u64() % MUTABLE.len() as u64) as usize];
            let factor = range_draw(&mut rng, cfg.enlargement_factor_range);
            let old = phantom.structures[target].ell;
            let new = old.scaled(factor);
            (
                render(&phantom, None, Some((target, factor))),
                support_mask(size, |x, y| old.supports(x, y) || new.supports(x, y)),
            )
        }
    };
    debug_assert!(mask.any(), "anomaly mask must be non-empty");
    Ok(AnomalousSample { source, image, mask, kind })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> SynthConfig {
        SynthConfig {
            image_size: 32,
            n_healthy: 4,
            n_val: 2,
            n_test_healthy: 2,
            n_anomalous: 5,
            seed: 11,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn healthy_phantoms_are_deterministic_and_in_range() {
        let cfg = tiny_cfg();
        let a = healthy_phantom(&cfg, 3).unwrap();
        let b = healthy_phantom(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.validate_range().is_ok());
        let c = healthy_phantom(&cfg, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn anomalies_differ_only_inside_their_masks() {
        let cfg = tiny_cfg();
        let mut seen = Vec::new();
        for idx in 0..5 {
            let s = anomalous_phantom(&cfg, idx).unwrap();
            assert!(s.mask.any(), "kind {:?} empty mask", s.kind);
            assert!(s.image.validate_range().is_ok());
            let mut changed_inside = false;
            for i in 0..32 * 32 {
                let inside = s.mask.data()[i];
                let (a, b) = (s.source.data()[i], s.image.data()[i]);
                if !inside {
                    assert_eq!(a.to_bits(), b.to_bits(), "kind {:?} pixel {i}", s.kind);
                } else if a != b {
                    changed_inside = true;
                }
            }
            assert!(changed_inside, "kind {:?} changed nothing", s.kind);
            seen.push(s.kind);
        }
        assert_eq!(seen, AnomalyKind::ALL.to_vec());
    }

    #[test]
    fn anomalous_samples_are_deterministic() {
        let cfg = tiny_cfg();
        let a = anomalous_phantom(&cfg, 2).unwrap();
        let b = anomalous_phantom(&cfg, 2).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig::default().validate().is_ok());
        let bad = SynthConfig { image_size: 8, ..SynthConfig::default() };
        assert_eq!(bad.validate().unwrap_err().exit_code(), 2);
        let bad = SynthConfig { blob_radius_range: (0.1, 0.4), ..SynthConfig::default() };
        assert!(bad.validate().is_err());
        let bad = SynthConfig { kinds: vec![], n_anomalous: 1, ..SynthConfig::default() };
        assert!(bad.validate().is_err());
        let ok = SynthConfig { kinds: vec![], n_anomalous: 0, ..SynthConfig::default() };
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn labels_are_stable_slugs() {
        assert_eq!(AnomalyKind::BrightBlob.label(), "bright_blob");
        assert_eq!(AnomalyKind::StructureEnlargement.to_string(), "structure_enlargement");
    }
}
