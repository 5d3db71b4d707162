//! Training objectives.
//!
//! Everything is expressed as a minimization loss. With
//! `ELBO(x) = recon_term(x) - beta_kl * KL(x)` (both estimated with a single
//! latent sample), the two networks minimize
//!
//! ```text
//! encoder: -ELBO(x) + (1/alpha) * exp(alpha * ELBO(D(z_fake))) + lambda * L_rev(x)
//! decoder: -ELBO(x) - gamma * ELBO(D(z_fake))
//! ```
//!
//! so the encoder pushes generated samples toward low evidence while the
//! decoder pulls them toward high evidence. Since the reconstruction term is
//! non-positive and KL is non-negative, `ELBO <= 0` always, which bounds the
//! exponential in `(0, 1]` — it behaves as a soft hinge that only wakes up
//! once fakes reconstruct well.
//!
//! The reversed loss compares the encoder's feature pyramid on the input
//! against the pyramid on its own reconstruction:
//! `sum_l [(1 - cos_sim) + 0.5 * MSE]`.
//!
//! Stop-gradients follow the alternating game: the encoder update treats the
//! generated image as a constant (but differentiates through the decoder on
//! the reconstruction paths, discarding decoder-parameter gradients), and the
//! decoder update detaches the posterior over real images.

use serde::{Deserialize, Serialize};

use crate::error::{RaError, Result};
use crate::graph::{Graph, NodeId};
use crate::image::Image;
use crate::model::{
    batch_tensor, dec_forward, enc_forward, param_leaves, Arch, EmbeddingPyramid, LatentCode,
    LatentDistribution, Model, ModelParams,
};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Vae,
    Sivae,
    Ra,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Vae => "vae",
            Mode::Sivae => "sivae",
            Mode::Ra => "ra",
        })
    }
}

/// Reduction used by the MSE half of the reversed loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MseReduction {
    /// Per-element mean: loss magnitude independent of feature-map size.
    Mean,
    Sum,
}

/// Where the latent codes behind generated ("fake") images come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FakeSource {
    Prior,
    /// Detached posterior samples of the current batch.
    Posterior,
    /// Half prior, half posterior.
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub mode: Mode,
    pub alpha: f64,
    pub gamma: f64,
    pub lambda_reversed: f64,
    pub beta_kl: f64,
    pub sigma_rec: f64,
    pub reversed_mse: MseReduction,
    pub fake_source: FakeSource,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            mode: Mode::Ra,
            alpha: 2.0,
            gamma: 1.0,
            lambda_reversed: 1.0,
            beta_kl: 1.0,
            sigma_rec: 1.0,
            reversed_mse: MseReduction::Mean,
            fake_source: FakeSource::Prior,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode != Mode::Vae && !(self.alpha > 0.0) {
            return Err(RaError::Config(format!(
                "alpha must be > 0 in mode {}, got {}",
                self.mode, self.alpha
            )));
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("lambda_reversed", self.lambda_reversed),
            ("beta_kl", self.beta_kl),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(RaError::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.sigma_rec > 0.0) {
            return Err(RaError::Config(format!(
                "sigma_rec must be > 0, got {}",
                self.sigma_rec
            )));
        }
        Ok(())
    }
}

/// One objective evaluation, decomposed. Fields are batch means and satisfy
/// `elbo = recon_term - kl_term` and
/// `total = -elbo + adversarial_term + lambda * reversed_term`
/// (`kl_term` carries the `beta_kl` weight; the adversarial term is the
/// exponential for the encoder and `-gamma * ELBO_fake` for the decoder).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon_term: f64,
    pub kl_term: f64,
    pub elbo: f64,
    pub adversarial_term: f64,
    pub reversed_term: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Name of the first non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("recon_term", self.recon_term),
            ("kl_term", self.kl_term),
            ("elbo", self.elbo),
            ("adversarial_term", self.adversarial_term),
            ("reversed_term", self.reversed_term),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

// ---------------------------------------------------------------------------
// Closed-form pieces
// ---------------------------------------------------------------------------

/// `KL(N(mean, exp(logvar)) || N(0, I))`, closed form, non-negative.
pub fn kl_divergence(d: &LatentDistribution) -> f64 {
    assert_eq!(d.mean.len(), d.log_variance.len());
    let mut acc = 0.0;
    for (m, lv) in d.mean.iter().zip(&d.log_variance) {
        acc += m * m + lv.exp() - 1.0 - lv;
    }
    0.5 * acc
}

/// Gaussian log-likelihood surrogate `-0.5 * sum (x - x_rec)^2 / sigma^2`.
/// Zero is the maximum, attained at `x_rec = x`.
pub fn reconstruction_term(x: &Image, x_rec: &Image, sigma_rec: f64) -> Result<f64> {
    if x.h() != x_rec.h() || x.w() != x_rec.w() {
        return Err(RaError::Shape(format!(
            "reconstruction_term: {}x{} vs {}x{}",
            x.h(),
            x.w(),
            x_rec.h(),
            x_rec.w()
        )));
    }
    let mut acc = 0.0;
    for (a, b) in x.data().iter().zip(x_rec.data()) {
        let d = a - b;
        acc += d * d;
    }
    Ok(-0.5 * acc / (sigma_rec * sigma_rec))
}

/// Reversed multi-scale embedding loss:
/// `sum_l [(1 - cos_sim(a_l, b_l)) + 0.5 * mean((a_l - b_l)^2)]`.
/// Symmetric; zero iff the pyramids are identical.
pub fn reversed_loss(a: &EmbeddingPyramid, b: &EmbeddingPyramid) -> Result<f64> {
    if a.levels.len() != b.levels.len() {
        return Err(RaError::Shape(format!(
            "pyramids have {} vs {} levels",
            a.levels.len(),
            b.levels.len()
        )));
    }
    let mut total = 0.0;
    for (l, (la, lb)) in a.levels.iter().zip(&b.levels).enumerate() {
        if la.shape() != lb.shape() {
            return Err(RaError::Shape(format!(
                "pyramid level {l}: {:?} vs {:?}",
                la.shape(),
                lb.shape()
            )));
        }
        let (mut dot, mut na2, mut nb2, mut sq) = (0.0, 0.0, 0.0, 0.0);
        for (x, y) in la.data().iter().zip(lb.data()) {
            dot += x * y;
            na2 += x * x;
            nb2 += y * y;
            let d = x - y;
            sq += d * d;
        }
        let den = (na2 * nb2).sqrt();
        let cos = if den < 1e-12 { 0.0 } else { dot / den };
        total += (1.0 - cos) + 0.5 * sq / la.numel() as f64;
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Batched loss graphs
// ---------------------------------------------------------------------------

/// A fully built loss graph plus the leaf ids of every model parameter
/// (canonical order), ready for one backward pass.
pub(crate) struct BatchLoss<F: Scalar> {
    pub graph: Graph<F>,
    pub total: NodeId,
    pub param_ids: Vec<NodeId>,
    pub breakdown: LossBreakdown,
}

struct ElboNodes {
    recon: NodeId,
    kl: NodeId,
    elbo: NodeId,
    x_rec: NodeId,
    pyramid: Vec<NodeId>,
}

fn elbo_path<F: Scalar>(
    g: &mut Graph<F>,
    arch: &Arch,
    pids: &[NodeId],
    x: NodeId,
    eps: &Tensor<F>,
    beta: f64,
    sigma: f64,
    detach_posterior: bool,
) -> ElboNodes {
    let enc = enc_forward(arch, g, pids, x);
    let (mu, lv) = if detach_posterior {
        (g.detach(enc.mu), g.detach(enc.logvar))
    } else {
        (enc.mu, enc.logvar)
    };
    let eps_n = g.leaf(eps.clone());
    let z = g.reparam(mu, lv, eps_n);
    let x_rec = dec_forward(arch, g, pids, z);
    let recon = g.sq_sum_per_n(x, x_rec, -0.5 / (sigma * sigma));
    let kl = g.kl_per_n(mu, lv);
    let elbo = g.lincomb(&[(recon, 1.0), (kl, -beta)], 0.0);
    ElboNodes { recon, kl, elbo, x_rec, pyramid: enc.pyramid }
}

fn reversed_nodes<F: Scalar>(
    g: &mut Graph<F>,
    pyr_a: &[NodeId],
    pyr_b: &[NodeId],
    red: MseReduction,
) -> NodeId {
    let mut level_terms = Vec::with_capacity(pyr_a.len());
    for (a, b) in pyr_a.iter().zip(pyr_b) {
        let shape = g.value(*a).shape().to_vec();
        let per: usize = shape[1..].iter().product();
        let scale = match red {
            MseReduction::Mean => 1.0 / per as f64,
            MseReduction::Sum => 1.0,
        };
        let cos = g.cos_sim_per_n(*a, *b);
        let mse = g.sq_sum_per_n(*a, *b, scale);
        let term = g.lincomb(&[(cos, -1.0), (mse, 0.5)], 1.0);
        level_terms.push((term, 1.0));
    }
    g.lincomb(&level_terms, 0.0)
}

fn batch_mean<F: Scalar>(g: &Graph<F>, id: NodeId) -> f64 {
    let v = g.value(id);
    v.sum_f64() / v.shape()[0] as f64
}

/// Builds the encoder's minimization loss over a batch.
///
/// `z_fake`/`eps_fake` are required unless `cfg.mode == Vae`. The generated
/// image is detached (decoder constant for this half); callers apply only
/// encoder-parameter gradients.
pub(crate) fn build_encoder_loss<F: Scalar>(
    params: &ModelParams<F>,
    x: &Tensor<F>,
    z_fake: Option<&Tensor<F>>,
    eps_real: &Tensor<F>,
    eps_fake: Option<&Tensor<F>>,
    cfg: &ObjectiveConfig,
) -> Result<BatchLoss<F>> {
    cfg.validate()?;
    let arch = params.arch();
    let mut g = Graph::new();
    let pids = param_leaves(&mut g, params);
    let xn = g.leaf(x.clone());
    let real = elbo_path(&mut g, arch, &pids, xn, eps_real, cfg.beta_kl, cfg.sigma_rec, false);

    let mut terms = vec![(real.elbo, -1.0)];
    let mut adv = None;
    if cfg.mode != Mode::Vae {
        let zf = z_fake
            .ok_or_else(|| RaError::Config("adversarial mode requires fake latents".into()))?;
        let epsf = eps_fake
            .ok_or_else(|| RaError::Config("adversarial mode requires fake-path noise".into()))?;
        let zfn = g.leaf(zf.clone());
        let x_gen = dec_forward(arch, &mut g, &pids, zfn);
        let x_fake = g.detach(x_gen);
        let fake = elbo_path(&mut g, arch, &pids, x_fake, epsf, cfg.beta_kl, cfg.sigma_rec, false);
        let a = g.exp_scale(fake.elbo, cfg.alpha);
        terms.push((a, 1.0));
        adv = Some(a);
    }
    let mut rev = None;
    if cfg.mode == Mode::Ra && cfg.lambda_reversed > 0.0 {
        let rec_enc = enc_forward(arch, &mut g, &pids, real.x_rec);
        let r = reversed_nodes(&mut g, &real.pyramid, &rec_enc.pyramid, cfg.reversed_mse);
        terms.push((r, cfg.lambda_reversed));
        rev = Some(r);
    }
    let per_n = g.lincomb(&terms, 0.0);
    let total = g.mean_all(per_n);

    let breakdown = LossBreakdown {
        recon_term: batch_mean(&g, real.recon),
        kl_term: cfg.beta_kl * batch_mean(&g, real.kl),
        elbo: batch_mean(&g, real.elbo),
        adversarial_term: adv.map(|a| batch_mean(&g, a)).unwrap_or(0.0),
        reversed_term: rev.map(|r| batch_mean(&g, r)).unwrap_or(0.0),
        total: g.value(total).item().to_f64(),
    };
    Ok(BatchLoss { graph: g, total, param_ids: pids, breakdown })
}

/// Builds the decoder's minimization loss over a batch. The posterior over
/// real images is detached; the fake path differentiates through generation
/// and re-encoding (encoder-parameter gradients are discarded by callers).
pub(crate) fn build_decoder_loss<F: Scalar>(
    params: &ModelParams<F>,
    x: &Tensor<F>,
    z_fake: Option<&Tensor<F>>,
    eps_real: &Tensor<F>,
    eps_fake: Option<&Tensor<F>>,
    cfg: &ObjectiveConfig,
) -> Result<BatchLoss<F>> {
    cfg.validate()?;
    let arch = params.arch();
    let mut g = Graph::new();
    let pids = param_leaves(&mut g, params);
    let xn = g.leaf(x.clone());
    let real = elbo_path(&mut g, arch, &pids, xn, eps_real, cfg.beta_kl, cfg.sigma_rec, true);

    let mut terms = vec![(real.elbo, -1.0)];
    let mut adv_value = 0.0;
    if cfg.mode != Mode::Vae {
        let zf = z_fake
            .ok_or_else(|| RaError::Config("adversarial mode requires fake latents".into()))?;
        let epsf = eps_fake
            .ok_or_else(|| RaError::Config("adversarial mode requires fake-path noise".into()))?;
        let zfn = g.leaf(zf.clone());
        let x_fake = dec_forward(arch, &mut g, &pids, zfn);
        let fake = elbo_path(&mut g, arch, &pids, x_fake, epsf, cfg.beta_kl, cfg.sigma_rec, false);
        terms.push((fake.elbo, -cfg.gamma));
        adv_value = -cfg.gamma * batch_mean(&g, fake.elbo);
    }
    let per_n = g.lincomb(&terms, 0.0);
    let total = g.mean_all(per_n);

    let breakdown = LossBreakdown {
        recon_term: batch_mean(&g, real.recon),
        kl_term: cfg.beta_kl * batch_mean(&g, real.kl),
        elbo: batch_mean(&g, real.elbo),
        adversarial_term: adv_value,
        reversed_term: 0.0,
        total: g.value(total).item().to_f64(),
    };
    Ok(BatchLoss { graph: g, total, param_ids: pids, breakdown })
}

// ---------------------------------------------------------------------------
// Public single-image objective evaluations
// ---------------------------------------------------------------------------

fn draw_eps<F: Scalar>(rng: &mut SplitMix64, n: usize, d: usize) -> Tensor<F> {
    Tensor::from_vec(&[n, d], (0..n * d).map(|_| F::from_f64(rng.next_gaussian())).collect())
}

/// Single-sample ELBO estimate of one image. `total` is the plain VAE
/// minimization loss `-elbo`.
pub fn elbo<F: Scalar>(
    x: &Image,
    model: &Model<F>,
    rng: &mut SplitMix64,
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    let vae_cfg = ObjectiveConfig { mode: Mode::Vae, lambda_reversed: 0.0, ..cfg.clone() };
    let xb = batch_tensor::<F>(&[x], model.arch())?;
    let eps = draw_eps::<F>(rng, 1, model.arch().latent_dim);
    let built = build_encoder_loss(model.params(), &xb, None, &eps, None, &vae_cfg)?;
    Ok(built.breakdown)
}

fn fake_inputs<F: Scalar>(
    z_fake: &LatentCode,
    model: &Model<F>,
    rng: &mut SplitMix64,
    cfg: &ObjectiveConfig,
) -> Result<(Option<Tensor<F>>, Option<Tensor<F>>)> {
    if cfg.mode == Mode::Vae {
        return Ok((None, None));
    }
    if z_fake.z.len() != model.arch().latent_dim {
        return Err(RaError::Config(format!(
            "fake latent has dimension {}, model expects {}",
            z_fake.z.len(),
            model.arch().latent_dim
        )));
    }
    let zf = Tensor::from_f64(&[1, z_fake.z.len()], &z_fake.z);
    let epsf = draw_eps::<F>(rng, 1, model.arch().latent_dim);
    Ok((Some(zf), Some(epsf)))
}

/// Encoder minimization loss for one image (noise drawn as: real-path eps,
/// then fake-path eps).
pub fn encoder_objective<F: Scalar>(
    x: &Image,
    z_fake: &LatentCode,
    cfg: &ObjectiveConfig,
    model: &Model<F>,
    rng: &mut SplitMix64,
) -> Result<LossBreakdown> {
    Ok(encoder_objective_with_grads(x, z_fake, cfg, model, rng)?.0)
}

/// Like [`encoder_objective`], also returning d(total)/d(parameter) for every
/// model tensor in canonical order (entries the loss never touches are None).
pub fn encoder_objective_with_grads<F: Scalar>(
    x: &Image,
    z_fake: &LatentCode,
    cfg: &ObjectiveConfig,
    model: &Model<F>,
    rng: &mut SplitMix64,
) -> Result<(LossBreakdown, Vec<Option<Tensor<F>>>)> {
    let xb = batch_tensor::<F>(&[x], model.arch())?;
    let eps = draw_eps::<F>(rng, 1, model.arch().latent_dim);
    let (zf, epsf) = fake_inputs(z_fake, model, rng, cfg)?;
    let built = build_encoder_loss(model.params(), &xb, zf.as_ref(), &eps, epsf.as_ref(), cfg)?;
    let grads = built.graph.backward(built.total);
    let out = built.param_ids.iter().map(|id| grads.get(*id).cloned()).collect();
    Ok((built.breakdown, out))
}

/// Decoder minimization loss for one image.
pub fn decoder_objective<F: Scalar>(
    x: &Image,
    z_fake: &LatentCode,
    cfg: &ObjectiveConfig,
    model: &Model<F>,
    rng: &mut SplitMix64,
) -> Result<LossBreakdown> {
    Ok(decoder_objective_with_grads(x, z_fake, cfg, model, rng)?.0)
}

/// Like [`decoder_objective`], also returning parameter gradients.
pub fn decoder_objective_with_grads<F: Scalar>(
    x: &Image,
    z_fake: &LatentCode,
    cfg: &ObjectiveConfig,
    model: &Model<F>,
    rng: &mut SplitMix64,
) -> Result<(LossBreakdown, Vec<Option<Tensor<F>>>)> {
    let xb = batch_tensor::<F>(&[x], model.arch())?;
    let eps = draw_eps::<F>(rng, 1, model.arch().latent_dim);
    let (zf, epsf) = fake_inputs(z_fake, model, rng, cfg)?;
    let built = build_decoder_loss(model.params(), &xb, zf.as_ref(), &eps, epsf.as_ref(), cfg)?;
    let grads = built.graph.backward(built.total);
    let out = built.param_ids.iter().map(|id| grads.get(*id).cloned()).collect();
    Ok((built.breakdown, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn tiny_arch() -> Arch {
        Arch {
            image_h: 8,
            image_w: 8,
            depth: 2,
            base_channels: 2,
            channel_cap: 4,
            latent_dim: 4,
        }
    }

    fn noisy_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = stream(seed, "img", 0);
        Image::from_vec(h, w, (0..h * w).map(|_| rng.next_f64()).collect())
    }

    #[test]
    fn kl_closed_form_values() {
        let zero = LatentDistribution { mean: vec![0.0; 3], log_variance: vec![0.0; 3] };
        assert_eq!(kl_divergence(&zero), 0.0);

        let unit = LatentDistribution { mean: vec![1.0], log_variance: vec![0.0] };
        assert!((kl_divergence(&unit) - 0.5).abs() < 1e-15);

        // Independently computed analytic value for a fixed 4-d case.
        let d = LatentDistribution {
            mean: vec![0.3, -0.7, 1.2, 0.05],
            log_variance: vec![0.1, -0.4, 0.6, -1.0],
        };
        assert!((kl_divergence(&d) - 1.343994602836619).abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_only_at_standard_normal() {
        let mut rng = stream(2, "kl", 0);
        for _ in 0..200 {
            let d = LatentDistribution {
                mean: (0..5).map(|_| rng.uniform(-2.0, 2.0)).collect(),
                log_variance: (0..5).map(|_| rng.uniform(-2.0, 2.0)).collect(),
            };
            let kl = kl_divergence(&d);
            assert!(kl >= 0.0);
            let off_center = d.mean.iter().any(|m| m.abs() > 1e-9)
                || d.log_variance.iter().any(|l| l.abs() > 1e-9);
            if off_center {
                assert!(kl > 0.0);
            }
        }
    }

    #[test]
    fn reconstruction_term_values_and_monotonicity() {
        let x = noisy_image(4, 4, 3);
        assert_eq!(reconstruction_term(&x, &x, 1.0).unwrap(), 0.0);

        let zeros = Image::zeros(2, 2);
        let ones = Image::from_vec(2, 2, vec![1.0; 4]);
        assert!((reconstruction_term(&zeros, &ones, 1.0).unwrap() + 2.0).abs() < 1e-15);

        // Strictly worse as noise amplitude grows.
        let mut prev = 0.0;
        for k in 1..6 {
            let amp = k as f64 * 0.05;
            let mut rec = x.clone();
            let mut rng = stream(4, "noise", 0);
            for v in rec.data_mut() {
                *v = (*v + rng.uniform(-amp, amp)).clamp(0.0, 1.0);
            }
            let t = reconstruction_term(&x, &rec, 1.0).unwrap();
            assert!(t < prev);
            prev = t;
        }

        assert!(reconstruction_term(&x, &zeros, 1.0).is_err());
    }

    fn one_level(v: &[f64]) -> EmbeddingPyramid {
        EmbeddingPyramid { levels: vec![Tensor::from_f64(&[1, 1, v.len()], v)] }
    }

    #[test]
    fn reversed_loss_reference_cases() {
        let a = one_level(&[1.0, 0.0]);
        assert_eq!(reversed_loss(&a, &a).unwrap(), 0.0);

        // Orthogonal unit vectors: (1 - 0) + 0.5 * mean([1,1]) = 1.5.
        let b = one_level(&[0.0, 1.0]);
        assert!((reversed_loss(&a, &b).unwrap() - 1.5).abs() < 1e-15);

        // Collinear: (1 - 1) + 0.5 * mean([1,0]) = 0.25.
        let c = one_level(&[2.0, 0.0]);
        assert!((reversed_loss(&a, &c).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn reversed_loss_symmetry_and_cosine_scale_invariance() {
        let mut rng = stream(5, "rev", 0);
        let av: Vec<f64> = (0..24).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let bv: Vec<f64> = (0..24).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mk = |v: &[f64]| EmbeddingPyramid {
            levels: vec![
                Tensor::from_f64(&[2, 2, 3], &v[..12]),
                Tensor::from_f64(&[4, 1, 3], &v[12..]),
            ],
        };
        let (a, b) = (mk(&av), mk(&bv));
        let ab = reversed_loss(&a, &b).unwrap();
        let ba = reversed_loss(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);

        // Scaling both pyramids leaves the cosine half unchanged; only the
        // MSE half scales (by c^2).
        let c = 3.0;
        let (ac, bc) = (
            mk(&av.iter().map(|v| v * c).collect::<Vec<_>>()),
            mk(&bv.iter().map(|v| v * c).collect::<Vec<_>>()),
        );
        let mse = |x: &EmbeddingPyramid, y: &EmbeddingPyramid| -> f64 {
            x.levels
                .iter()
                .zip(&y.levels)
                .map(|(lx, ly)| {
                    lx.data()
                        .iter()
                        .zip(ly.data())
                        .map(|(p, q)| (p - q) * (p - q))
                        .sum::<f64>()
                        / lx.numel() as f64
                })
                .sum()
        };
        let cos_part = ab - 0.5 * mse(&a, &b);
        let cos_part_scaled = reversed_loss(&ac, &bc).unwrap() - 0.5 * mse(&ac, &bc);
        assert!((cos_part - cos_part_scaled).abs() < 1e-10);

        // Mismatched pyramids are rejected.
        let short = EmbeddingPyramid { levels: vec![a.levels[0].clone()] };
        assert!(reversed_loss(&a, &short).is_err());
    }

    #[test]
    fn vae_mode_encoder_and_decoder_objectives_coincide() {
        let model = Model::<f64>::new(&tiny_arch(), 11).unwrap();
        let x = noisy_image(8, 8, 6);
        let cfg = ObjectiveConfig { mode: Mode::Vae, lambda_reversed: 0.0, ..Default::default() };
        let z_ignored = LatentCode { z: vec![9.0; 4] };
        let enc = encoder_objective(&x, &z_ignored, &cfg, &model, &mut stream(7, "e", 0)).unwrap();
        let dec = decoder_objective(&x, &z_ignored, &cfg, &model, &mut stream(7, "e", 0)).unwrap();
        assert!((enc.recon_term - dec.recon_term).abs() < 1e-12);
        assert!((enc.kl_term - dec.kl_term).abs() < 1e-12);
        assert!((enc.total - dec.total).abs() < 1e-12);
        // VAE: total is exactly -elbo; no adversarial or reversed parts.
        assert!((enc.total + enc.elbo).abs() < 1e-12);
        assert_eq!(enc.adversarial_term, 0.0);
        assert_eq!(enc.reversed_term, 0.0);
    }

    #[test]
    fn breakdown_composition_identities() {
        let model = Model::<f64>::new(&tiny_arch(), 12).unwrap();
        let x = noisy_image(8, 8, 8);
        let cfg = ObjectiveConfig { alpha: 0.5, ..Default::default() };
        let zf = LatentCode { z: vec![0.3, -0.2, 0.8, 0.1] };
        let b = encoder_objective(&x, &zf, &cfg, &model, &mut stream(13, "e", 0)).unwrap();
        assert!((b.elbo - (b.recon_term - b.kl_term)).abs() < 1e-9);
        assert!(
            (b.total - (-b.elbo + b.adversarial_term + cfg.lambda_reversed * b.reversed_term))
                .abs()
                < 1e-9
        );
        assert!(b.adversarial_term > 0.0); // (1/a) exp(...) is positive
        assert!(b.reversed_term >= 0.0);

        let d = decoder_objective(&x, &zf, &cfg, &model, &mut stream(13, "e", 0)).unwrap();
        assert!((d.elbo - (d.recon_term - d.kl_term)).abs() < 1e-9);
        assert!((d.total - (-d.elbo + d.adversarial_term)).abs() < 1e-9);
        assert_eq!(d.reversed_term, 0.0);
    }

    #[test]
    fn encoder_loss_rises_exactly_with_the_fake_elbo_term() {
        // Same image and noise, two different fake latents: every term but
        // the adversarial one is unchanged, so the total difference equals
        // the adversarial difference (monotone image of the fake ELBO).
        let model = Model::<f64>::new(&tiny_arch(), 21).unwrap();
        let x = noisy_image(8, 8, 22);
        let cfg = ObjectiveConfig { alpha: 0.5, ..Default::default() };
        let b1 = encoder_objective(
            &x,
            &LatentCode { z: vec![0.0; 4] },
            &cfg,
            &model,
            &mut stream(23, "e", 0),
        )
        .unwrap();
        let b2 = encoder_objective(
            &x,
            &LatentCode { z: vec![4.0, -4.0, 4.0, -4.0] },
            &cfg,
            &model,
            &mut stream(23, "e", 0),
        )
        .unwrap();
        assert!((b1.elbo - b2.elbo).abs() < 1e-12);
        assert!((b1.reversed_term - b2.reversed_term).abs() < 1e-12);
        assert!(b1.adversarial_term != b2.adversarial_term);
        assert!(((b1.total - b2.total) - (b1.adversarial_term - b2.adversarial_term)).abs() < 1e-9);
    }

    #[test]
    fn elbo_breakdown_is_consistent_with_closed_forms() {
        let model = Model::<f64>::new(&tiny_arch(), 31).unwrap();
        let x = noisy_image(8, 8, 32);
        let cfg = ObjectiveConfig::default();
        let b = elbo(&x, &model, &mut stream(33, "e", 0), &cfg).unwrap();
        assert!(b.recon_term <= 0.0);
        assert!(b.kl_term >= 0.0);
        assert!(b.elbo <= b.recon_term);
        assert!((b.total + b.elbo).abs() < 1e-12);

        // Cross-check KL against the closed form on the model's posterior.
        let (_, dist) = model.encode(&x).unwrap();
        assert!((b.kl_term - cfg.beta_kl * kl_divergence(&dist)).abs() < 1e-9);
    }

    #[test]
    fn config_validation() {
        assert!(ObjectiveConfig::default().validate().is_ok());
        assert!(ObjectiveConfig { alpha: 0.0, ..Default::default() }.validate().is_err());
        // alpha unused in VAE mode
        assert!(ObjectiveConfig { mode: Mode::Vae, alpha: 0.0, ..Default::default() }
            .validate()
            .is_ok());
        assert!(ObjectiveConfig { gamma: -1.0, ..Default::default() }.validate().is_err());
        assert!(ObjectiveConfig { sigma_rec: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn gradients_cover_expected_parameters() {
        let model = Model::<f64>::new(&tiny_arch(), 41).unwrap();
        let x = noisy_image(8, 8, 42);
        let cfg = ObjectiveConfig::default();
        let zf = LatentCode { z: vec![0.1; 4] };
        let (_, grads) =
            encoder_objective_with_grads(&x, &zf, &cfg, &model, &mut stream(43, "e", 0)).unwrap();
        // Every parameter participates in the RA encoder graph.
        for (i, gr) in grads.iter().enumerate() {
            assert!(gr.is_some(), "missing gradient for {}", model.params().name(i));
            assert!(gr.as_ref().unwrap().is_all_finite());
        }
    }
}
