//! Learned-perceptual-style distance maps.
//!
//! A [`FeatureNet`] is a stack of convolutions with SiLU taps; the distance
//! between two images is computed per tap: unit-normalize each spatial
//! position's channel vector, take the squared difference, average channels
//! under per-channel calibration weights, upsample to input resolution, and
//! sum across taps. Two backends produce a net:
//!
//! * [`FeatureNet::from_model`] — a frozen copy of the anomaly model's own
//!   encoder with unit calibration weights. Self-contained: no extra files.
//! * [`FeatureNet::load`] — an external `ra-feat-v1` file carrying a conv
//!   stack plus calibration weights (for pretrained perceptual features).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{RaError, Result};
use crate::graph::Graph;
use crate::image::{bilinear_resize, Image};
use crate::model::Model;
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 10] = b"ra-feat-v1";
const NORM_EPS: f64 = 1e-10;

struct Layer {
    w: Tensor<f64>, // [cout, cin, k, k]
    b: Tensor<f64>, // [cout]
    stride: usize,
}

/// `size`×`size` Gaussian kernel normalized to sum 1, row-major.
fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 - c, (i % size) as f64 - c);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

pub struct FeatureNet {
    /// Provenance tag ("encoder" or the source file name).
    pub id: String,
    layers: Vec<Layer>,
    level_weights: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct LayerMeta {
    cout: usize,
    cin: usize,
    k: usize,
    stride: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    layers: Vec<LayerMeta>,
}

impl FeatureNet {
    /// Freezes the model's encoder convolutions (stem + stride-2 blocks) as
    /// the feature stack, with unit calibration weights.
    pub fn from_model<F: Scalar>(model: &Model<F>) -> FeatureNet {
        let arch = model.arch();
        let p = model.params();
        let mut layers = Vec::with_capacity(arch.depth + 1);
        let mut level_weights = Vec::with_capacity(arch.depth + 1);
        for l in 0..=arch.depth {
            let wi = arch.enc_conv_w(l);
            let w = p.tensor(wi);
            let b = p.tensor(wi + 1);
            layers.push(Layer {
                w: Tensor::from_f64(w.shape(), &w.to_f64_vec()),
                b: Tensor::from_f64(b.shape(), &b.to_f64_vec()),
                stride: if l == 0 { 1 } else { 2 },
            });
            level_weights.push(vec![1.0; arch.channels(l)]);
        }
        FeatureNet { id: "encoder".into(), layers, level_weights }
    }

    /// Fixed generic filter bank for single-channel images in [0,1]: soft
    /// intensity bands plus signed center-surround channels at level 0, and a
    /// stride-2 level pooling the rectified pairs into phase-insensitive
    /// texture energies alongside coarse intensity bands. No training data
    /// went into it; the weights below are closed-form.
    pub fn generic_bank() -> FeatureNet {
        let g5 = gaussian_kernel(5, 1.2);
        let g5w = gaussian_kernel(5, 1.8);
        // Center-surround at two scales: identity minus a Gaussian.
        let cs = |sigma: f64| {
            let g = gaussian_kernel(5, sigma);
            let mut k = g.iter().map(|v| -v).collect::<Vec<f64>>();
            k[12] += 1.0;
            k
        };
        let (cs_a, cs_b) = (cs(1.2), cs(0.7));

        let bands = [0.15, 0.3, 0.45, 0.6, 0.75, 0.9];
        let mut w1 = Vec::new();
        let mut b1 = Vec::new();
        for t in bands {
            w1.extend(g5.iter().map(|v| 8.0 * v));
            b1.push(-8.0 * t);
        }
        for (kern, gain) in [(&cs_a, 6.0), (&cs_a, -6.0), (&cs_b, 6.0), (&cs_b, -6.0)] {
            w1.extend(kern.iter().map(|v| gain * v));
            b1.push(0.0);
        }

        // Level 2: channel 0/1 pool the rectified center-surround pairs into
        // texture energy at each scale; channels 2..6 pool four of the bands.
        let c1 = 10;
        let mut w2 = vec![0.0; 6 * c1 * 25];
        let mut b2 = vec![0.0; 6];
        let mut put = |cout: usize, cin: usize, kern: &[f64], gain: f64| {
            let off = (cout * c1 + cin) * 25;
            for (i, v) in kern.iter().enumerate() {
                w2[off + i] += gain * v;
            }
        };
        put(0, 6, &g5w, 3.0);
        put(0, 7, &g5w, 3.0);
        b2[0] = -0.3;
        put(1, 8, &g5w, 3.0);
        put(1, 9, &g5w, 3.0);
        b2[1] = -0.3;
        for (cout, cin) in [(2, 1), (3, 2), (4, 3), (5, 4)] {
            put(cout, cin, &g5w, 1.0);
        }

        FeatureNet {
            id: "generic-bank".into(),
            layers: vec![
                Layer { w: Tensor::from_vec(&[10, 1, 5, 5], w1), b: Tensor::from_vec(&[10], b1), stride: 1 },
                Layer { w: Tensor::from_vec(&[6, c1, 5, 5], w2), b: Tensor::from_vec(&[6], b2), stride: 2 },
            ],
            level_weights: vec![vec![1.0; 10], vec![1.0; 6]],
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            format: "ra-feat-v1".into(),
            layers: self
                .layers
                .iter()
                .map(|l| {
                    let s = l.w.shape();
                    LayerMeta { cout: s[0], cin: s[1], k: s[2], stride: l.stride }
                })
                .collect(),
        };
        let hjson = serde_json::to_vec(&header)
            .map_err(|e| RaError::Data(format!("feature header encode: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&hjson);
        let mut push = |vals: &[f64]| {
            for v in vals {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        };
        for l in &self.layers {
            push(l.w.data());
            push(l.b.data());
        }
        for w in &self.level_weights {
            push(w);
        }
        let mut f = std::fs::File::create(path).map_err(|e| RaError::io(path, e))?;
        f.write_all(&out).map_err(|e| RaError::io(path, e))
    }

    /// Loads an `ra-feat-v1` feature file. A missing or unreadable file is a
    /// state error (the backend was configured but is unavailable).
    pub fn load(path: &Path) -> Result<FeatureNet> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| {
                RaError::State(format!(
                    "external perceptual backend unavailable: cannot read {}: {e}",
                    path.display()
                ))
            })?;
        let bad = |what: &str| RaError::Data(format!("{}: {what}", path.display()));
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("not an ra-feat-v1 file"));
        }
        let mut off = MAGIC.len();
        let hlen = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize;
        off += 8;
        if bytes.len() < off + hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[off..off + hlen])
            .map_err(|e| bad(&format!("malformed header: {e}")))?;
        if header.format != "ra-feat-v1" {
            return Err(bad("wrong format tag"));
        }
        off += hlen;

        let mut take = |n: usize| -> Result<Vec<f64>> {
            let need = n * 4;
            if bytes.len() < off + need {
                return Err(bad("truncated tensor data"));
            }
            let vals = bytes[off..off + need]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            off += need;
            Ok(vals)
        };
        let mut layers = Vec::with_capacity(header.layers.len());
        for m in &header.layers {
            if m.stride == 0 || m.k == 0 || m.cin == 0 || m.cout == 0 {
                return Err(bad("invalid layer dimensions"));
            }
            let w = take(m.cout * m.cin * m.k * m.k)?;
            let b = take(m.cout)?;
            layers.push(Layer {
                w: Tensor::from_f64(&[m.cout, m.cin, m.k, m.k], &w),
                b: Tensor::from_f64(&[m.cout], &b),
                stride: m.stride,
            });
        }
        let mut level_weights = Vec::with_capacity(header.layers.len());
        for m in &header.layers {
            level_weights.push(take(m.cout)?);
        }
        if off != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let id = path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        Ok(FeatureNet { id, layers, level_weights })
    }

    /// SiLU tap after every convolution, shapes `[C_l, H_l, W_l]`.
    pub fn features(&self, img: &Image) -> Vec<Tensor<f64>> {
        let mut g = Graph::<f64>::new();
        let mut h = g.leaf(Tensor::from_f64(&[1, 1, img.h(), img.w()], img.data()));
        let mut taps = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let w = g.leaf(l.w.clone());
            let b = g.leaf(l.b.clone());
            let k = l.w.shape()[2];
            let c = g.conv2d(h, w, b, l.stride, k / 2);
            h = g.silu(c);
            let v = g.value(h);
            let s = v.shape();
            taps.push(Tensor::from_f64(&[s[1], s[2], s[3]], &v.to_f64_vec()));
        }
        taps
    }

    /// Spatial perceptual distance: non-negative, symmetric, zero iff the
    /// two images produce identical features.
    pub fn distance_map(&self, a: &Image, b: &Image) -> Result<Vec<f64>> {
        if a.h() != b.h() || a.w() != b.w() {
            return Err(RaError::Shape(format!(
                "perceptual distance: {}x{} vs {}x{}",
                a.h(),
                a.w(),
                b.h(),
                b.w()
            )));
        }
        let (h, w) = (a.h(), a.w());
        let fa = self.features(a);
        let fb = self.features(b);
        let mut acc = vec![0.0; h * w];
        for (l, (ta, tb)) in fa.iter().zip(&fb).enumerate() {
            let s = ta.shape();
            let (c, lh, lw) = (s[0], s[1], s[2]);
            let weights = &self.level_weights[l];
            let wsum: f64 = weights.iter().sum();
            let (da, db) = (ta.data(), tb.data());
            let mut level = vec![0.0; lh * lw];
            for p in 0..lh * lw {
                let (mut na, mut nb) = (0.0, 0.0);
                for ci in 0..c {
                    let (va, vb) = (da[ci * lh * lw + p], db[ci * lh * lw + p]);
                    na += va * va;
                    nb += vb * vb;
                }
                let (na, nb) = (na.sqrt() + NORM_EPS, nb.sqrt() + NORM_EPS);
                let mut d = 0.0;
                for ci in 0..c {
                    let ua = da[ci * lh * lw + p] / na;
                    let ub = db[ci * lh * lw + p] / nb;
                    d += weights[ci] * (ua - ub) * (ua - ub);
                }
                level[p] = d / wsum;
            }
            let up = bilinear_resize(&level, lh, lw, h, w);
            for (o, v) in acc.iter_mut().zip(&up) {
                *o += *v;
            }
        }
        Ok(acc)
    }
}
