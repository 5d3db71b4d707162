//! Contrast-limited adaptive histogram equalization on `[0,1]` images.
//!
//! Per-tile histograms are clipped and renormalized into float lookup tables;
//! each output pixel bilinearly interpolates between the four surrounding
//! tile mappings. Images whose sides are not divisible by the tile grid are
//! reflect-extended (border-excluding reflection) and cropped afterwards.
//!
//! A tile whose pixels all fall into a single histogram bin carries no
//! contrast information; its mapping is defined as the identity, which makes
//! a constant image come back exactly unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{RaError, Result};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EqualizationConfig {
    /// (rows, cols) of the tile grid.
    pub tile_grid: (usize, usize),
    /// Histogram clip limit as a multiple of the uniform bin height.
    pub clip_limit: f64,
    pub bins: usize,
}

impl Default for EqualizationConfig {
    fn default() -> Self {
        EqualizationConfig { tile_grid: (8, 8), clip_limit: 2.0, bins: 256 }
    }
}

impl EqualizationConfig {
    pub fn validate(&self) -> Result<()> {
        let (r, c) = self.tile_grid;
        if r == 0 || c == 0 {
            return Err(RaError::Config("tile_grid entries must be >= 1".into()));
        }
        if self.bins < 2 {
            return Err(RaError::Config(format!("bins must be >= 2, got {}", self.bins)));
        }
        if !(self.clip_limit > 0.0) {
            return Err(RaError::Config(format!(
                "clip_limit must be > 0, got {}",
                self.clip_limit
            )));
        }
        Ok(())
    }
}

struct TileLut {
    /// None marks a degenerate tile (single occupied bin): identity mapping.
    lut: Option<Vec<f64>>,
}

pub fn equalize(x: &Image, cfg: &EqualizationConfig) -> Result<Image> {
    cfg.validate()?;
    let (rows, cols) = cfg.tile_grid;
    let (h, w) = (x.h(), x.w());

    // Reflect-extend so the grid divides evenly.
    let eh = h.div_ceil(rows) * rows;
    let ew = w.div_ceil(cols) * cols;
    let tile_h = eh / rows;
    let tile_w = ew / cols;
    if tile_h < 2 || tile_w < 2 {
        return Err(RaError::Config(format!(
            "tile grid {rows}x{cols} gives degenerate {tile_h}x{tile_w} tiles on a {h}x{w} image"
        )));
    }
    let ext = extend_reflect101(x, eh, ew);

    let bins = cfg.bins;
    let area = tile_h * tile_w;
    let bin_of = |v: f64| -> usize { ((v * bins as f64) as usize).min(bins - 1) };

    // Per-tile clipped histogram -> cumulative float LUT.
    let mut tiles = Vec::with_capacity(rows * cols);
    for tr in 0..rows {
        for tc in 0..cols {
            let mut hist = vec![0usize; bins];
            for y in tr * tile_h..(tr + 1) * tile_h {
                for xx in tc * tile_w..(tc + 1) * tile_w {
                    hist[bin_of(ext[y * ew + xx])] += 1;
                }
            }
            if hist.iter().filter(|c| **c > 0).count() <= 1 {
                tiles.push(TileLut { lut: None });
                continue;
            }
            let clip = (((cfg.clip_limit * area as f64) / bins as f64) as usize).max(1);
            let mut excess = 0usize;
            for c in hist.iter_mut() {
                if *c > clip {
                    excess += *c - clip;
                    *c = clip;
                }
            }
            // Redistribute: flat share first, remainder in evenly spaced steps.
            let batch = excess / bins;
            let residual = excess % bins;
            for c in hist.iter_mut() {
                *c += batch;
            }
            if residual > 0 {
                let step = (bins / residual).max(1);
                let mut given = 0;
                let mut i = 0;
                while given < residual && i < bins {
                    hist[i] += 1;
                    given += 1;
                    i += step;
                }
                // If the stride ran off the end (possible when step rounds
                // up), sweep the remainder from the front.
                let mut i = 0;
                while given < residual {
                    hist[i] += 1;
                    given += 1;
                    i += 1;
                }
            }
            let total: usize = hist.iter().sum();
            let mut lut = Vec::with_capacity(bins);
            let mut cum = 0usize;
            for c in &hist {
                cum += *c;
                lut.push(cum as f64 / total as f64);
            }
            tiles.push(TileLut { lut: Some(lut) });
        }
    }

    // Bilinear interpolation between the four neighboring tile mappings.
    let inv_th = 1.0 / tile_h as f64;
    let inv_tw = 1.0 / tile_w as f64;
    let mut out = Image::zeros(h, w);
    for y in 0..h {
        let tyf = (y as f64 + 0.5) * inv_th - 0.5;
        let ty1 = tyf.floor();
        let ya = tyf - ty1;
        let ty1c = (ty1.max(0.0) as usize).min(rows - 1);
        let ty2c = (((ty1 as isize) + 1).max(0) as usize).min(rows - 1);
        for xx in 0..w {
            let txf = (xx as f64 + 0.5) * inv_tw - 0.5;
            let tx1 = txf.floor();
            let xa = txf - tx1;
            let tx1c = (tx1.max(0.0) as usize).min(cols - 1);
            let tx2c = (((tx1 as isize) + 1).max(0) as usize).min(cols - 1);

            let v = x.at(y, xx);
            let b = bin_of(v);
            let sample = |tr: usize, tc: usize| -> f64 {
                match &tiles[tr * cols + tc].lut {
                    Some(lut) => lut[b],
                    None => v,
                }
            };
            let top = sample(ty1c, tx1c) * (1.0 - xa) + sample(ty1c, tx2c) * xa;
            let bot = sample(ty2c, tx1c) * (1.0 - xa) + sample(ty2c, tx2c) * xa;
            out.set(y, xx, (top * (1.0 - ya) + bot * ya).clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

/// Extends an image to `eh x ew` by border-excluding reflection
/// (`a b c -> a b c b a ...` on the trailing edge).
fn extend_reflect101(x: &Image, eh: usize, ew: usize) -> Vec<f64> {
    let (h, w) = (x.h(), x.w());
    let reflect = |i: usize, n: usize| -> usize {
        if i < n {
            i
        } else if n == 1 {
            0
        } else {
            let m = 2 * n - 2;
            let r = i % m;
            if r < n {
                r
            } else {
                m - r
            }
        }
    };
    let mut out = vec![0.0; eh * ew];
    for y in 0..eh {
        let sy = reflect(y, h);
        for xx in 0..ew {
            out[y * ew + xx] = x.at(sy, reflect(xx, w));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn constant_image_is_unchanged() {
        for v in [0.0, 0.3, 1.0] {
            let img = Image::from_vec(32, 32, vec![v; 32 * 32]);
            let eq = equalize(&img, &EqualizationConfig::default()).unwrap();
            assert_eq!(eq, img, "constant {v}");
        }
    }

    #[test]
    fn global_equalization_of_uniform_ramp_is_near_identity() {
        // Horizontal ramp over [0,1]: already histogram-uniform, so global
        // (1x1 grid, unclipped) equalization moves values < one bin width.
        let w = 256;
        let img = Image::from_vec(
            4,
            w,
            (0..4 * w).map(|i| (i % w) as f64 / (w - 1) as f64).collect(),
        );
        let cfg = EqualizationConfig {
            tile_grid: (1, 1),
            clip_limit: 1e9, // effectively unclipped
            bins: 256,
        };
        let eq = equalize(&img, &cfg).unwrap();
        for (a, b) in img.data().iter().zip(eq.data()) {
            assert!(
                (a - b).abs() <= 1.0 / 256.0 + 1e-9,
                "ramp moved too far: {a} -> {b}"
            );
        }
    }

    #[test]
    fn output_stays_in_unit_range_and_same_shape() {
        let mut rng = stream(1, "clahe", 0);
        let img = Image::from_vec(50, 70, (0..50 * 70).map(|_| rng.next_f64().powi(3)).collect());
        let eq = equalize(&img, &EqualizationConfig::default()).unwrap();
        assert_eq!((eq.h(), eq.w()), (50, 70));
        eq.validate_range().unwrap();
    }

    #[test]
    fn equalization_spreads_a_compressed_histogram() {
        // Values squeezed into [0.4, 0.6] should cover a wider range after.
        let mut rng = stream(2, "clahe", 0);
        let img =
            Image::from_vec(64, 64, (0..64 * 64).map(|_| rng.uniform(0.4, 0.6)).collect());
        let eq = equalize(&img, &EqualizationConfig::default()).unwrap();
        let (lo0, hi0) = img.min_max();
        let (lo1, hi1) = eq.min_max();
        assert!(hi1 - lo1 > (hi0 - lo0) * 1.5);
    }

    #[test]
    fn degenerate_tiles_are_rejected() {
        let img = Image::zeros(8, 8);
        let cfg = EqualizationConfig { tile_grid: (8, 8), ..Default::default() };
        let err = equalize(&img, &cfg).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(EqualizationConfig { bins: 1, ..Default::default() }.validate().is_err());
        assert!(EqualizationConfig { tile_grid: (0, 2), ..Default::default() }
            .validate()
            .is_err());
    }

    #[test]
    fn non_divisible_sizes_are_handled_by_reflection() {
        let mut rng = stream(3, "clahe", 0);
        let img = Image::from_vec(37, 53, (0..37 * 53).map(|_| rng.next_f64()).collect());
        let eq = equalize(&img, &EqualizationConfig::default()).unwrap();
        assert_eq!((eq.h(), eq.w()), (37, 53));
        eq.validate_range().unwrap();
    }
}
