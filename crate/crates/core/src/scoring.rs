//! Anomaly maps from (input, pseudo-healthy reconstruction) pairs.
//!
//! The per-pixel score is the contrast-equalized residual gated by perceptual
//! dissimilarity, computed on both the raw and the equalized pair:
//!
//! ```text
//! s = |eq(x_ph) − eq(x)| ⊙ P(x_ph, x) ⊙ P(eq(x_ph), eq(x))
//! ```
//!
//! where `eq` is CLAHE ([`crate::clahe`]) and `P` a spatial perceptual
//! distance ([`FeatureNet::distance_map`]). A median filter suppresses
//! single-pixel speckle. Both factors vanish when `x_ph = x`, so healthy
//! inputs with faithful reconstructions score near zero everywhere.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use crate::clahe::{equalize, EqualizationConfig};
use crate::error::{RaError, Result};
use crate::image::Image;
use crate::model::Model;
use crate::perceptual::FeatureNet;
use crate::tensor::Scalar;

const RAMP_MAGIC: &[u8; 4] = b"RAMP";
const RAMP_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub equalization: EqualizationConfig,
    /// Odd side length of the median smoothing window; `1` disables it.
    pub median_window: usize,
    /// Fraction of highest-scoring pixels averaged into the image-level
    /// score (at least one pixel is always used).
    pub top_fraction: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            equalization: EqualizationConfig::default(),
            median_window: 5,
            top_fraction: 0.01,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        self.equalization.validate()?;
        if self.median_window == 0 || self.median_window % 2 == 0 {
            return Err(RaError::Config(format!(
                "median_window must be odd and positive, got {}",
                self.median_window
            )));
        }
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return Err(RaError::Config(format!(
                "top_fraction must lie in (0, 1], got {}",
                self.top_fraction
            )));
        }
        Ok(())
    }
}

/// Where an anomaly map came from, carried into exports and reports.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct Provenance {
    pub input: String,
    pub checkpoint: String,
}

/// Non-negative per-pixel anomaly scores, same shape as the source image.
#[derive(Clone, Debug)]
pub struct AnomalyMap {
    h: usize,
    w: usize,
    scores: Vec<f64>,
    pub provenance: Provenance,
}

impl AnomalyMap {
    pub fn new(h: usize, w: usize, scores: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if scores.len() != h * w {
            return Err(RaError::Shape(format!(
                "anomaly map: {} scores for {h}x{w}",
                scores.len()
            )));
        }
        if !scores.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(RaError::Data("anomaly map scores must be finite and non-negative".into()));
        }
        Ok(AnomalyMap { h, w, scores, provenance })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Mean of the `top_fraction` highest-scoring pixels (≥ 1 pixel).
    /// Monotone: pixelwise domination implies score domination.
    pub fn image_score(&self, top_fraction: f64) -> f64 {
        let n = self.scores.len();
        let k = ((top_fraction * n as f64).ceil() as usize).clamp(1, n);
        let mut v = self.scores.clone();
        v.select_nth_unstable_by(k - 1, |a, b| b.partial_cmp(a).unwrap());
        v[..k].iter().sum::<f64>() / k as f64
    }

    /// Portable raw-grid export: 16-byte header (magic `RAMP`, version, H, W
    /// as little-endian u32) followed by row-major little-endian f32 scores.
    pub fn save_ramp(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(16 + 4 * self.scores.len());
        out.extend_from_slice(RAMP_MAGIC);
        out.extend_from_slice(&RAMP_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.h as u32).to_le_bytes());
        out.extend_from_slice(&(self.w as u32).to_le_bytes());
        for v in &self.scores {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| RaError::io(path, e))?;
        f.write_all(&out).map_err(|e| RaError::io(path, e))
    }

    pub fn load_ramp(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| RaError::io(path, e))?;
        let bad = |what: &str| RaError::Data(format!("{}: {what}", path.display()));
        if bytes.len() < 16 || &bytes[..4] != RAMP_MAGIC {
            return Err(bad("not a RAMP file"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        if word(4) != RAMP_VERSION {
            return Err(bad("unsupported RAMP version"));
        }
        let (h, w) = (word(8) as usize, word(12) as usize);
        if bytes.len() != 16 + 4 * h * w {
            return Err(bad("size does not match header"));
        }
        let scores = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        AnomalyMap::new(h, w, scores, Provenance::default())
    }

    /// 8-bit visualization: min–max normalized to [0,1] (an all-constant map
    /// renders as black) — for inspection only, not comparable across maps.
    pub fn to_heatmap(&self) -> Image {
        let lo = self.scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let data = if span <= 0.0 {
            vec![0.0; self.scores.len()]
        } else {
            self.scores.iter().map(|v| (v - lo) / span).collect()
        };
        Image::from_vec(self.h, self.w, data)
    }
}

/// Spatial perceptual distance between two images (non-negative, symmetric).
pub fn perceptual_map(net: &FeatureNet, a: &Image, b: &Image) -> Result<Vec<f64>> {
    net.distance_map(a, b)
}

/// Equalized residual gated by the perceptual distance of the raw and the
/// equalized pair, median-smoothed.
pub fn anomaly_map(
    x: &Image,
    x_ph: &Image,
    net: &FeatureNet,
    cfg: &ScoringConfig,
    provenance: Provenance,
) -> Result<AnomalyMap> {
    cfg.validate()?;
    if x.h() != x_ph.h() || x.w() != x_ph.w() {
        return Err(RaError::Shape(format!(
            "anomaly_map: {}x{} vs {}x{}",
            x.h(),
            x.w(),
            x_ph.h(),
            x_ph.w()
        )));
    }
    let eq_x = equalize(x, &cfg.equalization)?;
    let eq_ph = equalize(x_ph, &cfg.equalization)?;
    let p_raw = net.distance_map(x_ph, x)?;
    let p_eq = net.distance_map(&eq_ph, &eq_x)?;
    let mut scores: Vec<f64> = eq_ph
        .data()
        .iter()
        .zip(eq_x.data())
        .zip(p_raw.iter().zip(&p_eq))
        .map(|((a, b), (p1, p2))| (a - b).abs() * p1 * p2)
        .collect();
    if cfg.median_window > 1 {
        scores = median_filter(&scores, x.h(), x.w(), cfg.median_window);
    }
    AnomalyMap::new(x.h(), x.w(), scores, provenance)
}

/// Median filter with replicate borders; `window` must be odd.
fn median_filter(src: &[f64], h: usize, w: usize, window: usize) -> Vec<f64> {
    let r = (window / 2) as isize;
    let mut out = vec![0.0; h * w];
    let mut buf = Vec::with_capacity(window * window);
    for y in 0..h as isize {
        for x in 0..w as isize {
            buf.clear();
            for dy in -r..=r {
                let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                for dx in -r..=r {
                    let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                    buf.push(src[yy * w + xx]);
                }
            }
            let mid = buf.len() / 2;
            buf.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).unwrap());
            out[y as usize * w + x as usize] = buf[mid];
        }
    }
    out
}

/// A trained model plus perceptual backend and scoring configuration.
pub struct Scorer<F: Scalar> {
    model: Model<F>,
    features: FeatureNet,
    config: ScoringConfig,
    checkpoint_id: String,
}

impl<F: Scalar> Scorer<F> {
    /// Self-contained backend: the model's own frozen encoder supplies the
    /// perceptual features.
    pub fn new(model: Model<F>, config: ScoringConfig) -> Result<Self> {
        config.validate()?;
        let features = FeatureNet::from_model(&model);
        Ok(Scorer { model, features, config, checkpoint_id: String::new() })
    }

    /// External backend loaded from an `ra-feat-v1` file.
    pub fn with_features(
        model: Model<F>,
        features: FeatureNet,
        config: ScoringConfig,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Scorer { model, features, config, checkpoint_id: String::new() })
    }

    pub fn set_checkpoint_id(&mut self, id: impl Into<String>) {
        self.checkpoint_id = id.into();
    }

    pub fn model(&self) -> &Model<F> {
        &self.model
    }

    pub fn config(&self) -> &ScoringConfig {
        &self.config
    }

    pub fn features(&self) -> &FeatureNet {
        &self.features
    }

    /// Pseudo-healthy reconstruction plus anomaly map for one input.
    pub fn score(&self, x: &Image, input_id: &str) -> Result<(AnomalyMap, Image)> {
        let x_ph = self.model.reconstruct(x)?;
        let map = anomaly_map(
            x,
            &x_ph,
            &self.features,
            &self.config,
            Provenance { input: input_id.into(), checkpoint: self.checkpoint_id.clone() },
        )?;
        Ok((map, x_ph))
    }

    pub fn image_score(&self, map: &AnomalyMap) -> f64 {
        map.image_score(self.config.top_fraction)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;
    use crate::rng::stream;

    fn tiny_arch() -> Arch {
        Arch {
            image_h: 32,
            image_w: 32,
            depth: 2,
            base_channels: 2,
            channel_cap: 8,
            latent_dim: 4,
        }
    }

    fn net() -> FeatureNet {
        FeatureNet::from_model(&Model::<f64>::new(&tiny_arch(), 23).unwrap())
    }

    fn noisy(seed: u64) -> Image {
        let mut rng = stream(seed, "simg", 0);
        Image::from_vec(32, 32, (0..32 * 32).map(|_| rng.next_f64()).collect())
    }

    #[test]
    fn identical_pair_scores_zero_everywhere() {
        let x = noisy(1);
        let m =
            anomaly_map(&x, &x, &net(), &ScoringConfig::default(), Provenance::default()).unwrap();
        assert!(m.scores().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn map_is_zero_wherever_the_equalized_residual_is_zero() {
        let cfg = ScoringConfig { median_window: 1, ..ScoringConfig::default() };
        let n = net();
        for seed in 0..20 {
            let (x, ph) = (noisy(100 + seed), noisy(200 + seed));
            let eq_x = equalize(&x, &cfg.equalization).unwrap();
            let eq_ph = equalize(&ph, &cfg.equalization).unwrap();
            let m = anomaly_map(&x, &ph, &n, &cfg, Provenance::default()).unwrap();
            for i in 0..32 * 32 {
                if eq_ph.data()[i] == eq_x.data()[i] {
                    assert_eq!(m.scores()[i], 0.0);
                }
            }
        }
    }

    #[test]
    fn image_score_contract() {
        let zero = AnomalyMap::new(10, 10, vec![0.0; 100], Provenance::default()).unwrap();
        assert_eq!(zero.image_score(0.01), 0.0);

        let mut one = vec![0.0; 100];
        one[37] = 1.0;
        let spike = AnomalyMap::new(10, 10, one, Provenance::default()).unwrap();
        assert_eq!(spike.image_score(0.01), 1.0);

        let mut rng = stream(9, "mono", 0);
        let a: Vec<f64> = (0..100).map(|_| rng.next_f64()).collect();
        let b: Vec<f64> = a.iter().map(|v| v + 0.25).collect();
        let ma = AnomalyMap::new(10, 10, a, Provenance::default()).unwrap();
        let mb = AnomalyMap::new(10, 10, b, Provenance::default()).unwrap();
        for k in [0.01, 0.1, 0.5, 1.0] {
            assert!(ma.image_score(k) <= mb.image_score(k));
        }
    }

    #[test]
    fn median_filter_removes_single_pixel_speckle() {
        let mut v = vec![0.0; 64];
        v[27] = 5.0;
        let out = median_filter(&v, 8, 8, 3);
        assert!(out.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn ramp_roundtrip_and_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ramp");
        let scores: Vec<f64> = (0..24).map(|i| i as f64 / 23.0).collect();
        let m = AnomalyMap::new(4, 6, scores, Provenance::default()).unwrap();
        m.save_ramp(&path).unwrap();
        let back = AnomalyMap::load_ramp(&path).unwrap();
        assert_eq!((back.h(), back.w()), (4, 6));
        for (a, b) in m.scores().iter().zip(back.scores()) {
            assert!((a - b).abs() < 1e-7);
        }
        std::fs::write(&path, b"RAMPxxxx").unwrap();
        assert!(AnomalyMap::load_ramp(&path).is_err());
    }

    #[test]
    fn heatmap_normalization() {
        let m = AnomalyMap::new(2, 2, vec![1.0, 3.0, 2.0, 1.0], Provenance::default()).unwrap();
        let hm = m.to_heatmap();
        assert_eq!(hm.data(), &[0.0, 1.0, 0.5, 0.0]);
        let flat = AnomalyMap::new(2, 2, vec![0.7; 4], Provenance::default()).unwrap();
        assert!(flat.to_heatmap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scorer_runs_end_to_end_on_an_untrained_model() {
        let model = Model::<f64>::new(&tiny_arch(), 31).unwrap();
        let mut scorer = Scorer::new(model, ScoringConfig::default()).unwrap();
        scorer.set_checkpoint_id("test-ckpt");
        let x = noisy(55);
        let (map, x_ph) = scorer.score(&x, "img-0").unwrap();
        assert_eq!((map.h(), map.w()), (32, 32));
        assert_eq!((x_ph.h(), x_ph.w()), (32, 32));
        assert!(map.scores().iter().all(|v| v.is_finite() && *v >= 0.0));
        assert_eq!(map.provenance.input, "img-0");
        assert_eq!(map.provenance.checkpoint, "test-ckpt");
        assert!(scorer.image_score(&map) >= 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(ScoringConfig::default().validate().is_ok());
        let bad = ScoringConfig { median_window: 4, ..ScoringConfig::default() };
        assert_eq!(bad.validate().unwrap_err().exit_code(), 2);
        let bad = ScoringConfig { top_fraction: 0.0, ..ScoringConfig::default() };
        assert!(bad.validate().is_err());
    }
}
