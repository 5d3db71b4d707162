//! Encoder/decoder pair with multi-scale embedding taps.
//!
//! The encoder is a stem convolution (pyramid level 0) followed by `depth`
//! stride-2 blocks (levels 1..=depth), then two linear heads producing the
//! posterior mean and log-variance. The decoder mirrors it: a linear layer
//! from the latent code, `depth` convolution + nearest-upsample blocks, and a
//! final sigmoid convolution back to one channel. No normalization layers;
//! SiLU activations throughout.
//!
//! Parameters live in a single canonically-ordered list ([`Arch`] index
//! helpers are the source of truth), which keeps optimizer state, checkpoint
//! tensors, and graph leaves aligned by construction.

use serde::{Deserialize, Serialize};

use crate::error::{RaError, Result};
use crate::graph::{Graph, NodeId};
use crate::image::Image;
use crate::rng::{stream, SplitMix64};
use crate::tensor::{Scalar, Tensor};

/// Log-variance is clamped to `[-LOGVAR_CLAMP, LOGVAR_CLAMP]` to keep
/// `exp` finite in the reparameterization and KL terms.
pub const LOGVAR_CLAMP: f64 = 10.0;

/// Architecture descriptor. Round-trips through checkpoints bit-exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    pub image_h: usize,
    pub image_w: usize,
    /// Number of stride-2 encoder blocks (pyramid has `depth + 1` levels).
    pub depth: usize,
    pub base_channels: usize,
    pub channel_cap: usize,
    pub latent_dim: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Arch {
            image_h: 128,
            image_w: 128,
            depth: 4,
            base_channels: 32,
            channel_cap: 256,
            latent_dim: 128,
        }
    }
}

impl Arch {
    /// Small configuration for CPU desk-scale runs on 64x64 inputs. Sized so
    /// a 2,000-step run at batch 16 stays inside a 15-minute single-core
    /// budget.
    pub fn desk() -> Self {
        Arch {
            image_h: 64,
            image_w: 64,
            depth: 4,
            base_channels: 4,
            channel_cap: 32,
            latent_dim: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(RaError::Config("depth must be >= 1".into()));
        }
        if self.base_channels == 0 || self.channel_cap < self.base_channels {
            return Err(RaError::Config(format!(
                "invalid channel plan: base {} cap {}",
                self.base_channels, self.channel_cap
            )));
        }
        if self.latent_dim == 0 {
            return Err(RaError::Config("latent_dim must be >= 1".into()));
        }
        let f = 1usize << self.depth;
        if self.image_h == 0 || self.image_w == 0 || self.image_h % f != 0 || self.image_w % f != 0
        {
            return Err(RaError::Config(format!(
                "image {}x{} must be a positive multiple of 2^depth = {f}",
                self.image_h, self.image_w
            )));
        }
        Ok(())
    }

    /// Channel count of pyramid level `l` (0 = stem).
    pub fn channels(&self, l: usize) -> usize {
        (self.base_channels << l).min(self.channel_cap)
    }

    /// Spatial size of the deepest feature map.
    pub fn latent_hw(&self) -> (usize, usize) {
        (self.image_h >> self.depth, self.image_w >> self.depth)
    }

    fn flat_dim(&self) -> usize {
        let (h, w) = self.latent_hw();
        self.channels(self.depth) * h * w
    }

    // -- canonical parameter indices -------------------------------------

    pub(crate) fn n_tensors(&self) -> usize {
        4 * self.depth + 10
    }

    pub(crate) fn enc_conv_w(&self, l: usize) -> usize {
        2 * l
    }

    pub(crate) fn fc_mu_w(&self) -> usize {
        2 * (self.depth + 1)
    }

    pub(crate) fn fc_logvar_w(&self) -> usize {
        self.fc_mu_w() + 2
    }

    /// First decoder tensor; everything before it belongs to the encoder.
    pub(crate) fn dec_base(&self) -> usize {
        self.fc_mu_w() + 4
    }

    pub(crate) fn dec_conv_w(&self, i: usize) -> usize {
        self.dec_base() + 2 + 2 * i
    }

    pub(crate) fn dec_out_w(&self) -> usize {
        self.dec_conv_w(self.depth)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Encoder,
    Decoder,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    /// 0 marks a bias (zero-initialized).
    fan_in: usize,
    part: Part,
}

fn layout(arch: &Arch) -> Vec<ParamSpec> {
    let mut specs = Vec::with_capacity(arch.n_tensors());
    let mut pair = |name: &str, shape: Vec<usize>, fan_in: usize, part: Part| {
        specs.push(ParamSpec { name: format!("{name}.w"), shape: shape.clone(), fan_in, part });
        let b = match part {
            _ if shape.len() == 4 => shape[0],
            _ => shape[0],
        };
        specs.push(ParamSpec { name: format!("{name}.b"), shape: vec![b], fan_in: 0, part });
    };

    for l in 0..=arch.depth {
        let cin = if l == 0 { 1 } else { arch.channels(l - 1) };
        let cout = arch.channels(l);
        pair(&format!("enc.conv{l}"), vec![cout, cin, 3, 3], cin * 9, Part::Encoder);
    }
    let flat = arch.flat_dim();
    let d = arch.latent_dim;
    pair("enc.fc_mu", vec![d, flat], flat, Part::Encoder);
    pair("enc.fc_logvar", vec![d, flat], flat, Part::Encoder);
    pair("dec.fc", vec![flat, d], d, Part::Decoder);
    for i in 0..arch.depth {
        let cin = arch.channels(arch.depth - i);
        let cout = arch.channels(arch.depth - i - 1);
        pair(&format!("dec.conv{i}"), vec![cout, cin, 3, 3], cin * 9, Part::Decoder);
    }
    pair("dec.out", vec![1, arch.channels(0), 3, 3], arch.channels(0) * 9, Part::Decoder);
    specs
}

/// All trainable tensors in canonical order.
pub struct ModelParams<F: Scalar> {
    arch: Arch,
    names: Vec<String>,
    parts: Vec<Part>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> ModelParams<F> {
    /// He-style initialization: weights N(0, 2/fan_in), biases zero. Each
    /// tensor draws from its own counter-based stream, so the layout index —
    /// not the draw order — determines its values.
    pub fn init(arch: &Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let specs = layout(arch);
        let mut names = Vec::with_capacity(specs.len());
        let mut parts = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (idx, s) in specs.iter().enumerate() {
            names.push(s.name.clone());
            parts.push(s.part);
            let n: usize = s.shape.iter().product();
            if s.fan_in == 0 {
                tensors.push(Tensor::zeros(&s.shape));
            } else {
                let mut rng = stream(seed, "init", idx as u64);
                let std = (2.0 / s.fan_in as f64).sqrt();
                let data: Vec<F> = (0..n)
                    .map(|_| F::from_f64(rng.next_gaussian() * std))
                    .collect();
                tensors.push(Tensor::from_vec(&s.shape, data));
            }
        }
        Ok(ModelParams { arch: arch.clone(), names, parts, tensors })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn part(&self, i: usize) -> Part {
        self.parts[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor<F> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<F> {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Indices owned by one network half.
    pub fn part_indices(&self, part: Part) -> Vec<usize> {
        (0..self.len()).filter(|i| self.parts[*i] == part).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_all_finite())
    }

    /// FNV-1a over the exact bit patterns; used to assert that an update
    /// touched only its own half.
    pub fn checksum(&self, part: Part) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for i in self.part_indices(part) {
            for v in self.tensors[i].data() {
                for byte in v.to_f64().to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Rebuilds from named tensors (checkpoint load path). Every tensor of
    /// the canonical layout must be present with the right shape.
    pub fn from_named(arch: &Arch, lookup: &dyn Fn(&str) -> Option<(Vec<usize>, Vec<F>)>) -> Result<Self> {
        arch.validate()?;
        let specs = layout(arch);
        let mut names = Vec::new();
        let mut parts = Vec::new();
        let mut tensors = Vec::new();
        for s in &specs {
            let (shape, data) = lookup(&s.name).ok_or_else(|| {
                RaError::Data(format!("checkpoint is missing tensor {}", s.name))
            })?;
            if shape != s.shape {
                return Err(RaError::Data(format!(
                    "checkpoint tensor {} has shape {:?}, expected {:?}",
                    s.name, shape, s.shape
                )));
            }
            names.push(s.name.clone());
            parts.push(s.part);
            tensors.push(Tensor::from_vec(&s.shape, data));
        }
        let params = ModelParams { arch: arch.clone(), names, parts, tensors };
        if !params.all_finite() {
            return Err(RaError::Data("checkpoint contains non-finite parameters".into()));
        }
        Ok(params)
    }
}

/// Posterior (or prior) parameters over the latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDistribution {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub z: Vec<f64>,
}

/// Encoder feature maps, level `l` shaped `[channels(l), H/2^l, W/2^l]`.
#[derive(Clone, Debug)]
pub struct EmbeddingPyramid {
    pub levels: Vec<Tensor<f64>>,
}

/// `z = mean + exp(0.5 * log_variance) * eps`, `eps ~ N(0, I)`.
pub fn reparameterize(d: &LatentDistribution, rng: &mut SplitMix64) -> LatentCode {
    assert_eq!(d.mean.len(), d.log_variance.len());
    let z = d
        .mean
        .iter()
        .zip(&d.log_variance)
        .map(|(m, lv)| m + (0.5 * lv).exp() * rng.next_gaussian())
        .collect();
    LatentCode { z }
}

// ---------------------------------------------------------------------------
// Graph builders shared by inference and the training objectives.
// ---------------------------------------------------------------------------

pub(crate) struct EncOut {
    pub pyramid: Vec<NodeId>,
    pub mu: NodeId,
    pub logvar: NodeId,
}

/// Pushes every parameter as a leaf, in canonical order.
pub(crate) fn param_leaves<F: Scalar>(g: &mut Graph<F>, params: &ModelParams<F>) -> Vec<NodeId> {
    (0..params.len()).map(|i| g.leaf(params.tensor(i).clone())).collect()
}

pub(crate) fn enc_forward<F: Scalar>(
    arch: &Arch,
    g: &mut Graph<F>,
    pids: &[NodeId],
    x: NodeId,
) -> EncOut {
    let mut pyramid = Vec::with_capacity(arch.depth + 1);
    let mut h = x;
    for l in 0..=arch.depth {
        let stride = if l == 0 { 1 } else { 2 };
        let wi = arch.enc_conv_w(l);
        let c = g.conv2d(h, pids[wi], pids[wi + 1], stride, 1);
        h = g.silu(c);
        pyramid.push(h);
    }
    let n = g.value(h).shape()[0];
    let flat = g.reshape(h, &[n, arch.flat_dim()]);
    let mu = g.linear(flat, pids[arch.fc_mu_w()], pids[arch.fc_mu_w() + 1]);
    let lv_raw = g.linear(flat, pids[arch.fc_logvar_w()], pids[arch.fc_logvar_w() + 1]);
    let logvar = g.clamp(lv_raw, -LOGVAR_CLAMP, LOGVAR_CLAMP);
    EncOut { pyramid, mu, logvar }
}

pub(crate) fn dec_forward<F: Scalar>(
    arch: &Arch,
    g: &mut Graph<F>,
    pids: &[NodeId],
    z: NodeId,
) -> NodeId {
    let n = g.value(z).shape()[0];
    let (lh, lw) = arch.latent_hw();
    let fc = g.linear(z, pids[arch.dec_base()], pids[arch.dec_base() + 1]);
    let act = g.silu(fc);
    let mut h = g.reshape(act, &[n, arch.channels(arch.depth), lh, lw]);
    for i in 0..arch.depth {
        let wi = arch.dec_conv_w(i);
        let c = g.conv2d(h, pids[wi], pids[wi + 1], 1, 1);
        let s = g.silu(c);
        h = g.upsample2(s);
    }
    let wi = arch.dec_out_w();
    let out = g.conv2d(h, pids[wi], pids[wi + 1], 1, 1);
    g.sigmoid(out)
}

/// Stacks images into an NCHW batch tensor.
pub(crate) fn batch_tensor<F: Scalar>(images: &[&Image], arch: &Arch) -> Result<Tensor<F>> {
    if images.is_empty() {
        return Err(RaError::Data("empty image batch".into()));
    }
    let (h, w) = (arch.image_h, arch.image_w);
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.h() != h || img.w() != w {
            return Err(RaError::Shape(format!(
                "image {}x{} does not match model input {h}x{w}",
                img.h(),
                img.w()
            )));
        }
        data.extend(img.data().iter().map(|v| F::from_f64(*v)));
    }
    Ok(Tensor::from_vec(&[images.len(), 1, h, w], data))
}

fn tensor_to_image<F: Scalar>(t: &Tensor<F>, ni: usize, h: usize, w: usize) -> Image {
    let base = ni * h * w;
    Image::from_vec(
        h,
        w,
        t.data()[base..base + h * w].iter().map(|v| v.to_f64()).collect(),
    )
}

// ---------------------------------------------------------------------------
// Public model
// ---------------------------------------------------------------------------

pub struct Model<F: Scalar> {
    params: ModelParams<F>,
}

impl<F: Scalar> Model<F> {
    pub fn new(arch: &Arch, seed: u64) -> Result<Self> {
        Ok(Model { params: ModelParams::init(arch, seed)? })
    }

    pub fn from_params(params: ModelParams<F>) -> Self {
        Model { params }
    }

    pub fn arch(&self) -> &Arch {
        &self.params.arch
    }

    pub fn params(&self) -> &ModelParams<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams<F> {
        &mut self.params
    }

    /// Runs the encoder, returning the embedding pyramid and the posterior.
    pub fn encode(&self, x: &Image) -> Result<(EmbeddingPyramid, LatentDistribution)> {
        let xb = batch_tensor::<F>(&[x], self.arch())?;
        let mut g = Graph::new();
        let pids = param_leaves(&mut g, &self.params);
        let xn = g.leaf(xb);
        let out = enc_forward(self.arch(), &mut g, &pids, xn);
        let levels = out
            .pyramid
            .iter()
            .map(|id| {
                let v = g.value(*id);
                let s = v.shape();
                Tensor::from_f64(&[s[1], s[2], s[3]], &v.to_f64_vec())
            })
            .collect();
        Ok((
            EmbeddingPyramid { levels },
            LatentDistribution {
                mean: g.value(out.mu).to_f64_vec(),
                log_variance: g.value(out.logvar).to_f64_vec(),
            },
        ))
    }

    pub fn decode(&self, z: &LatentCode) -> Result<Image> {
        if z.z.len() != self.arch().latent_dim {
            return Err(RaError::Config(format!(
                "latent code has dimension {}, model expects {}",
                z.z.len(),
                self.arch().latent_dim
            )));
        }
        let mut g = Graph::new();
        let pids = param_leaves(&mut g, &self.params);
        let zn = g.leaf(Tensor::from_f64(&[1, z.z.len()], &z.z));
        let out = dec_forward(self.arch(), &mut g, &pids, zn);
        Ok(tensor_to_image(g.value(out), 0, self.arch().image_h, self.arch().image_w))
    }

    /// Pseudo-healthy reconstruction: decodes the posterior mean — fully
    /// deterministic, no sampling.
    pub fn reconstruct(&self, x: &Image) -> Result<Image> {
        Ok(self.reconstruct_batch(std::slice::from_ref(x))?.pop().expect("one image in"))
    }

    /// Batched [`Model::reconstruct`]; chunks internally to bound memory.
    pub fn reconstruct_batch(&self, xs: &[Image]) -> Result<Vec<Image>> {
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(16) {
            let refs: Vec<&Image> = chunk.iter().collect();
            let xb = batch_tensor::<F>(&refs, self.arch())?;
            let mut g = Graph::new();
            let pids = param_leaves(&mut g, &self.params);
            let xn = g.leaf(xb);
            let enc = enc_forward(self.arch(), &mut g, &pids, xn);
            let dec = dec_forward(self.arch(), &mut g, &pids, enc.mu);
            let v = g.value(dec);
            for ni in 0..chunk.len() {
                out.push(tensor_to_image(v, ni, self.arch().image_h, self.arch().image_w));
            }
        }
        Ok(out)
    }

    /// Decodes `n` latent codes drawn from the standard-normal prior.
    pub fn sample_prior(&self, rng: &mut SplitMix64, n: usize) -> Result<Vec<Image>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        let d = self.arch().latent_dim;
        let z: Vec<f64> = (0..n * d).map(|_| rng.next_gaussian()).collect();
        let mut g = Graph::new();
        let pids = param_leaves(&mut g, &self.params);
        let zn = g.leaf(Tensor::from_f64(&[n, d], &z));
        let out = dec_forward(self.arch(), &mut g, &pids, zn);
        let v = g.value(out);
        Ok((0..n)
            .map(|ni| tensor_to_image(v, ni, self.arch().image_h, self.arch().image_w))
            .collect())
    }
}
