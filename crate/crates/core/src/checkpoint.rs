//! The `ra-ckpt-v1` checkpoint container.
//!
//! Layout: 10 magic bytes, a little-endian `u64` header length, a JSON
//! header (format tag, architecture, optional training config, seed, step,
//! best validation SSIM, tensor table), then every tensor's data as
//! little-endian `f32` in table order. Model parameters use their canonical
//! names; optimizer moments are stored as `opt.m.<param>` / `opt.v.<param>`.
//!
//! Writing is deterministic: the same state serializes to identical bytes.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{RaError, Result};
use crate::model::{Arch, Model, ModelParams};
use crate::tensor::Scalar;
use crate::trainer::TrainConfig;

const MAGIC: &[u8; 10] = b"ra-ckpt-v1";

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    arch: Arch,
    train_config: Option<TrainConfig>,
    seed: u64,
    step: u64,
    best_val_ssim: Option<f64>,
    tensors: Vec<TensorMeta>,
}

pub struct Checkpoint {
    pub arch: Arch,
    pub train_config: Option<TrainConfig>,
    pub seed: u64,
    pub step: u64,
    pub best_val_ssim: Option<f64>,
    tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new(arch: Arch, seed: u64, step: u64) -> Self {
        Checkpoint { arch, train_config: None, seed, step, best_val_ssim: None, tensors: Vec::new() }
    }

    /// Inference-only checkpoint: model parameters, no optimizer state.
    pub fn from_model<F: Scalar>(model: &Model<F>, seed: u64, step: u64) -> Self {
        let p = model.params();
        let mut ckpt = Checkpoint::new(p.arch().clone(), seed, step);
        for i in 0..p.len() {
            let t = p.tensor(i);
            ckpt.push_tensor(
                p.name(i),
                t.shape().to_vec(),
                t.data().iter().map(|v| v.to_f64() as f32).collect(),
            );
        }
        ckpt
    }

    pub fn push_tensor(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor {name} size mismatch");
        self.tensors.push((name.to_string(), shape, data));
    }

    pub fn tensor(&self, name: &str) -> Option<(&[usize], &[f32])> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _, _)| n.as_str())
    }

    /// Rebuilds the model; fails if any canonical tensor is missing,
    /// misshapen, or non-finite.
    pub fn to_model<F: Scalar>(&self) -> Result<Model<F>> {
        let params = ModelParams::from_named(&self.arch, &|name| {
            self.tensor(name)
                .map(|(s, d)| (s.to_vec(), d.iter().map(|v| F::from_f64(*v as f64)).collect()))
        })?;
        Ok(Model::from_params(params))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            format: "ra-ckpt-v1".into(),
            arch: self.arch.clone(),
            train_config: self.train_config.clone(),
            seed: self.seed,
            step: self.step,
            best_val_ssim: self.best_val_ssim,
            tensors: self
                .tensors
                .iter()
                .map(|(n, s, _)| TensorMeta { name: n.clone(), shape: s.clone() })
                .collect(),
        };
        let hjson = serde_json::to_vec(&header)
            .map_err(|e| RaError::Data(format!("checkpoint header encode: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(hjson.len() as u64).to_le_bytes());
        out.extend_from_slice(&hjson);
        for (_, _, data) in &self.tensors {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        // Write-then-rename so a crash can't leave a torn checkpoint behind.
        let tmp = path.with_extension("tmp");
        std::fs::File::create(&tmp)
            .and_then(|mut f| f.write_all(&out))
            .and_then(|_| std::fs::rename(&tmp, path))
            .map_err(|e| RaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| RaError::io(path, e))?;
        let bad = |what: &str| RaError::Data(format!("{}: {what}", path.display()));
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("not an ra-ckpt-v1 checkpoint"));
        }
        let mut off = MAGIC.len();
        let hlen = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize;
        off += 8;
        if bytes.len() < off + hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[off..off + hlen])
            .map_err(|e| bad(&format!("malformed header: {e}")))?;
        if header.format != "ra-ckpt-v1" {
            return Err(bad("wrong format tag"));
        }
        off += hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for m in header.tensors {
            let n: usize = m.shape.iter().product();
            let need = n * 4;
            if bytes.len() < off + need {
                return Err(bad("truncated tensor data"));
            }
            let data: Vec<f32> = bytes[off..off + need]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            off += need;
            tensors.push((m.name, m.shape, data));
        }
        if off != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Checkpoint {
            arch: header.arch,
            train_config: header.train_config,
            seed: header.seed,
            step: header.step,
            best_val_ssim: header.best_val_ssim,
            tensors,
        })
    }
}
