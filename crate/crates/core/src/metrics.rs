//! Evaluation protocol: region-level detection counting with F1, threshold
//! calibration on healthy maps, ranking metrics (AUROC, average precision,
//! FP@TP), and windowed SSIM for reconstruction quality.
//!
//! Detection uses an overlap rule rather than IoU: binarize the map, find
//! 8-connected components, and count an annotated region as detected when any
//! component touches it. Components touching no region are false-positive
//! blobs; blobs below a minimum area are ignored (speckle guard).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{RaError, Result};
use crate::image::{Image, Mask};
use crate::scoring::AnomalyMap;

/// Blobs smaller than this never count as false positives.
pub const DEFAULT_MIN_FP_AREA: usize = 5;
pub const DEFAULT_CALIBRATION_PERCENTILE: f64 = 98.0;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Region {
    /// Arbitrary-shape region; mask dimensions must match the scored image.
    Mask(MaskRegion),
    /// Axis-aligned box, `x`/`y` top-left corner, in pixels.
    Box { x: usize, y: usize, w: usize, h: usize },
}

/// Serializable wrapper: masks are stored as flat row-major booleans.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaskRegion {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl From<&Mask> for MaskRegion {
    fn from(m: &Mask) -> Self {
        MaskRegion { h: m.h(), w: m.w(), data: m.data().to_vec() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnnotatedRegion {
    pub class_label: String,
    pub region: Region,
}

/// Ground-truth regions for one image.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Annotation {
    pub regions: Vec<AnnotatedRegion>,
}

impl Annotation {
    pub fn empty() -> Self {
        Annotation { regions: Vec::new() }
    }

    /// Bounds and non-emptiness against an `h`×`w` image.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        for (i, r) in self.regions.iter().enumerate() {
            match &r.region {
                Region::Mask(m) => {
                    if m.h != h || m.w != w || m.data.len() != m.h * m.w {
                        return Err(RaError::Shape(format!(
                            "annotation region {i}: mask {}x{} for image {h}x{w}",
                            m.h, m.w
                        )));
                    }
                    if !m.data.iter().any(|b| *b) {
                        return Err(RaError::Data(format!("annotation region {i}: empty mask")));
                    }
                }
                Region::Box { x, y, w: bw, h: bh } => {
                    if *bw == 0 || *bh == 0 {
                        return Err(RaError::Data(format!("annotation region {i}: empty box")));
                    }
                    if x + bw > w || y + bh > h {
                        return Err(RaError::Shape(format!(
                            "annotation region {i}: box ({x},{y})+{bw}x{bh} outside {h}x{w}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Region-level counts for one image. `TP + FN` equals the number of
/// annotated regions; FP counts unmatched binarized blobs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionOutcome {
    pub true_positive_regions: usize,
    pub false_negative_regions: usize,
    pub false_positive_blobs: usize,
}

/// `detect_regions` with the default minimum false-positive blob area.
pub fn detect_regions(
    map: &AnomalyMap,
    ann: &Annotation,
    threshold: f64,
) -> Result<DetectionOutcome> {
    detect_regions_with(map, ann, threshold, DEFAULT_MIN_FP_AREA)
}

/// Binarize strictly above `threshold`, label 8-connected components, and
/// match them against annotated regions by any-pixel overlap. The area floor
/// applies only to false-positive counting — a tiny blob can still detect a
/// region.
pub fn detect_regions_with(
    map: &AnomalyMap,
    ann: &Annotation,
    threshold: f64,
    min_fp_area: usize,
) -> Result<DetectionOutcome> {
    if !threshold.is_finite() {
        return Err(RaError::Config(format!("detection threshold must be finite, got {threshold}")));
    }
    let (h, w) = (map.h(), map.w());
    ann.validate(h, w)?;
    let hot: Vec<bool> = map.scores().iter().map(|v| *v > threshold).collect();
    let comps = connected_components(&hot, h, w);

    let mut region_hit = vec![false; ann.regions.len()];
    let mut fp = 0usize;
    for comp in &comps {
        let mut matched = false;
        for (ri, r) in ann.regions.iter().enumerate() {
            let overlaps = match &r.region {
                Region::Mask(m) => comp.iter().any(|i| m.data[*i]),
                Region::Box { x, y, w: bw, h: bh } => comp.iter().any(|i| {
                    let (py, px) = (i / w, i % w);
                    px >= *x && px < x + bw && py >= *y && py < y + bh
                }),
            };
            if overlaps {
                region_hit[ri] = true;
                matched = true;
            }
        }
        if !matched && comp.len() >= min_fp_area {
            fp += 1;
        }
    }
    let tp = region_hit.iter().filter(|b| **b).count();
    Ok(DetectionOutcome {
        true_positive_regions: tp,
        false_negative_regions: ann.regions.len() - tp,
        false_positive_blobs: fp,
    })
}

/// 8-connected components of the hot pixels, as lists of flat indices.
fn connected_components(hot: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; hot.len()];
    let mut comps = Vec::new();
    let mut queue = Vec::new();
    for start in 0..hot.len() {
        if !hot[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.clear();
        queue.push(start);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop() {
            comp.push(i);
            let (y, x) = (i / w, i % w);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if hot[j] && !seen[j] {
                        seen[j] = true;
                        queue.push(j);
                    }
                }
            }
        }
        comps.push(comp);
    }
    comps
}

/// Aggregate counts first, then compute rates; `0/0` is defined as `0`.
/// Returns `(recall, precision, f1)`.
pub fn f1_from_outcomes(outcomes: &[DetectionOutcome]) -> (f64, f64, f64) {
    let tp: usize = outcomes.iter().map(|o| o.true_positive_regions).sum();
    let fn_: usize = outcomes.iter().map(|o| o.false_negative_regions).sum();
    let fp: usize = outcomes.iter().map(|o| o.false_positive_blobs).sum();
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let recall = ratio(tp, tp + fn_);
    let precision = ratio(tp, tp + fp);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (recall, precision, f1)
}

/// Percentile of the pooled healthy pixel-score distribution, linearly
/// interpolated between order statistics (rank `p/100 · (n−1)`).
pub fn calibrate_threshold(healthy_maps: &[AnomalyMap], percentile: f64) -> Result<f64> {
    if !(percentile > 0.0 && percentile < 100.0) {
        return Err(RaError::Config(format!(
            "calibration percentile must lie in (0, 100), got {percentile}"
        )));
    }
    let mut pool: Vec<f64> = healthy_maps.iter().flat_map(|m| m.scores().iter().copied()).collect();
    if pool.is_empty() {
        return Err(RaError::Data("threshold calibration needs a non-empty healthy set".into()));
    }
    pool.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = percentile / 100.0 * (pool.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Ok(pool[lo] * (1.0 - frac) + pool[hi] * frac)
}

fn check_nonempty(healthy: &[f64], anomalous: &[f64]) -> Result<()> {
    if healthy.is_empty() || anomalous.is_empty() {
        return Err(RaError::Data("ranking metrics need non-empty healthy and anomalous sets".into()));
    }
    Ok(())
}

/// Mann–Whitney AUROC: fraction of (anomalous, healthy) pairs ranked
/// correctly, ties counting one half.
pub fn auroc(healthy: &[f64], anomalous: &[f64]) -> Result<f64> {
    check_nonempty(healthy, anomalous)?;
    let mut pooled: Vec<(f64, bool)> = healthy
        .iter()
        .map(|s| (*s, false))
        .chain(anomalous.iter().map(|s| (*s, true)))
        .collect();
    pooled.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    // Average ranks within tie groups (1-based ranks).
    let mut rank_sum_anom = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j < pooled.len() && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for e in &pooled[i..j] {
            if e.1 {
                rank_sum_anom += avg_rank;
            }
        }
        i = j;
    }
    let (na, nh) = (anomalous.len() as f64, healthy.len() as f64);
    let u = rank_sum_anom - na * (na + 1.0) / 2.0;
    Ok(u / (na * nh))
}

/// Average precision over thresholds at the observed scores, descending
/// (step-wise interpolation, anomalous = positive class).
pub fn auprc(healthy: &[f64], anomalous: &[f64]) -> Result<f64> {
    check_nonempty(healthy, anomalous)?;
    let mut pooled: Vec<(f64, bool)> = healthy
        .iter()
        .map(|s| (*s, false))
        .chain(anomalous.iter().map(|s| (*s, true)))
        .collect();
    pooled.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let n_pos = anomalous.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        // All scores tied at this value enter the positive set together.
        while j < pooled.len() && pooled[j].0 == pooled[i].0 {
            if pooled[j].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / n_pos;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}

/// False-positive rate at the most selective threshold still reaching the
/// requested sensitivity (positives score `≥ θ`).
pub fn fp_at_tp(healthy: &[f64], anomalous: &[f64], tp_rate: f64) -> Result<f64> {
    check_nonempty(healthy, anomalous)?;
    if !(tp_rate > 0.0 && tp_rate <= 1.0) {
        return Err(RaError::Config(format!("tp_rate must lie in (0, 1], got {tp_rate}")));
    }
    // Candidate thresholds: observed anomalous scores, descending. TPR(θ) is
    // non-decreasing as θ walks down; stop at the first feasible θ, which
    // minimizes the false-positive rate subject to TPR ≥ tp_rate.
    let mut cand = anomalous.to_vec();
    cand.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let na = anomalous.len() as f64;
    for theta in cand {
        let tpr = anomalous.iter().filter(|s| **s >= theta).count() as f64 / na;
        if tpr >= tp_rate {
            let fpr = healthy.iter().filter(|s| **s >= theta).count() as f64;
            return Ok(fpr / healthy.len() as f64);
        }
    }
    Ok(1.0)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean structural similarity over 11×11 Gaussian windows (σ = 1.5),
/// stabilizers scaled to the `[0,1]` range, windows fully inside the image.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.h() != b.h() || a.w() != b.w() {
        return Err(RaError::Shape(format!(
            "ssim: {}x{} vs {}x{}",
            a.h(),
            a.w(),
            b.h(),
            b.w()
        )));
    }
    let (h, w) = (a.h(), a.w());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(RaError::Shape(format!(
            "ssim needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let r = SSIM_WINDOW / 2;
    let mut kernel = [0.0; SSIM_WINDOW];
    for (i, k) in kernel.iter_mut().enumerate() {
        let d = i as f64 - r as f64;
        *k = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }

    let (da, db) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for cy in r..h - r {
        for cx in r..w - r {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..SSIM_WINDOW {
                let wy = kernel[dy];
                let row = (cy + dy - r) * w + cx - r;
                for dx in 0..SSIM_WINDOW {
                    let wgt = wy * kernel[dx];
                    let (va, vb) = (da[row + dx], db[row + dx]);
                    ma += wgt * va;
                    mb += wgt * vb;
                    saa += wgt * va * va;
                    sbb += wgt * vb * vb;
                    sab += wgt * va * vb;
                }
            }
            let (va, vb, vab) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            let s = ((2.0 * ma * mb + SSIM_C1) * (2.0 * vab + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Everything the report needs about one evaluated image.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageEval {
    pub id: String,
    /// `None` for healthy images, the anomaly class otherwise.
    pub class_label: Option<String>,
    pub image_score: f64,
    pub outcome: DetectionOutcome,
    /// SSIM between the input and its pseudo-healthy reconstruction.
    pub ssim: Option<f64>,
    /// Mean perceptual distance between input and reconstruction.
    pub perceptual: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub regions: usize,
    pub detected: usize,
    pub false_positives: usize,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

fn detection_metrics(outcomes: &[DetectionOutcome]) -> DetectionMetrics {
    let (recall, precision, f1) = f1_from_outcomes(outcomes);
    DetectionMetrics {
        regions: outcomes
            .iter()
            .map(|o| o.true_positive_regions + o.false_negative_regions)
            .sum(),
        detected: outcomes.iter().map(|o| o.true_positive_regions).sum(),
        false_positives: outcomes.iter().map(|o| o.false_positive_blobs).sum(),
        recall,
        precision,
        f1,
    }
}

/// Aggregated evaluation over a test set. Image-level ranking metrics are
/// present only when both healthy and anomalous images were evaluated.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub total: DetectionMetrics,
    /// Keyed by anomaly class; each row aggregates the images of that class.
    pub per_class: BTreeMap<String, DetectionMetrics>,
    pub image_auroc: Option<f64>,
    pub image_auprc: Option<f64>,
    pub fp_at_tp95: Option<f64>,
    pub fp_at_tp99: Option<f64>,
    pub healthy_ssim_mean: Option<f64>,
    pub healthy_perceptual_mean: Option<f64>,
    pub n_healthy: usize,
    pub n_anomalous: usize,
}

/// Aggregate per-image evaluations into a report.
pub fn assemble_report(evals: &[ImageEval], threshold: f64) -> EvalReport {
    let all: Vec<DetectionOutcome> = evals.iter().map(|e| e.outcome).collect();
    let mut by_class: BTreeMap<String, Vec<DetectionOutcome>> = BTreeMap::new();
    let (mut healthy_scores, mut anom_scores) = (Vec::new(), Vec::new());
    let (mut ssims, mut percs) = (Vec::new(), Vec::new());
    for e in evals {
        match &e.class_label {
            Some(c) => {
                by_class.entry(c.clone()).or_default().push(e.outcome);
                anom_scores.push(e.image_score);
            }
            None => {
                healthy_scores.push(e.image_score);
                if let Some(s) = e.ssim {
                    ssims.push(s);
                }
                if let Some(p) = e.perceptual {
                    percs.push(p);
                }
            }
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let ranking = !healthy_scores.is_empty() && !anom_scores.is_empty();
    EvalReport {
        threshold,
        total: detection_metrics(&all),
        per_class: by_class.iter().map(|(k, v)| (k.clone(), detection_metrics(v))).collect(),
        image_auroc: ranking.then(|| auroc(&healthy_scores, &anom_scores).unwrap()),
        image_auprc: ranking.then(|| auprc(&healthy_scores, &anom_scores).unwrap()),
        fp_at_tp95: ranking.then(|| fp_at_tp(&healthy_scores, &anom_scores, 0.95).unwrap()),
        fp_at_tp99: ranking.then(|| fp_at_tp(&healthy_scores, &anom_scores, 0.99).unwrap()),
        healthy_ssim_mean: mean(&ssims),
        healthy_perceptual_mean: mean(&percs),
        n_healthy: healthy_scores.len(),
        n_anomalous: anom_scores.len(),
    }
}

impl EvalReport {
    /// Human-readable rendering for the report file.
    pub fn render_text(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(s, "evaluation report");
        let _ = writeln!(s, "  images: {} healthy, {} anomalous", self.n_healthy, self.n_anomalous);
        let _ = writeln!(s, "  pixel threshold: {:.6}", self.threshold);
        let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        let _ = writeln!(s, "  image AUROC: {}   AUPRC: {}", opt(self.image_auroc), opt(self.image_auprc));
        let _ = writeln!(s, "  FP@TP95: {}   FP@TP99: {}", opt(self.fp_at_tp95), opt(self.fp_at_tp99));
        let _ = writeln!(
            s,
            "  healthy reconstruction: SSIM {}   perceptual {}",
            opt(self.healthy_ssim_mean),
            opt(self.healthy_perceptual_mean)
        );
        let _ = writeln!(s, "  detection (threshold {:.6}):", self.threshold);
        let row = |s: &mut String, name: &str, m: &DetectionMetrics| {
            let _ = writeln!(
                s,
                "    {name:<24} det {:>4}/{:<4} FP {:>4}  recall {:.4} precision {:.4} F1 {:.4}",
                m.detected, m.regions, m.false_positives, m.recall, m.precision, m.f1
            );
        };
        row(&mut s, "total", &self.total);
        for (c, m) in &self.per_class {
            row(&mut s, c, m);
        }
        s
    }
}

/// Flat per-image CSV (`image,class,image_score,ssim,lpips`) for plotting.
pub fn write_scores_csv(path: &Path, evals: &[ImageEval]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| RaError::Data(format!("{}: {e}", path.display())))?;
    w.write_record(["image", "class", "image_score", "ssim", "lpips"])
        .map_err(|e| RaError::Data(format!("csv: {e}")))?;
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
    for e in evals {
        w.write_record([
            e.id.clone(),
            e.class_label.clone().unwrap_or_default(),
            format!("{}", e.image_score),
            fmt(e.ssim),
            fmt(e.perceptual),
        ])
        .map_err(|e| RaError::Data(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| RaError::io(path, e))
}
