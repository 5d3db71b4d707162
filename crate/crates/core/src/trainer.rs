//! Alternating encoder/decoder training.
//!
//! Each step runs, in order: sample fake latents, update the encoder on its
//! objective, resample fake latents, update the decoder on its objective.
//! Every random draw comes from a counter-based stream keyed by (seed,
//! purpose, step), so `(seed, config, data)` fully determine the run and a
//! resumed run continues bitwise-identically — optimizer moments are kept in
//! the model's arithmetic type so they survive the f32 checkpoint round-trip
//! unchanged.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{RaError, Result};
use crate::image::Image;
use crate::metrics::ssim;
use crate::model::{batch_tensor, reparameterize, Arch, Model, Part};
use crate::objectives::{
    build_decoder_loss, build_encoder_loss, FakeSource, LossBreakdown, Mode, ObjectiveConfig,
};
use crate::rng::{stream, SplitMix64};
use crate::tensor::{Scalar, Tensor};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

pub const BEST_CHECKPOINT: &str = "ckpt_best.ra";
pub const LAST_CHECKPOINT: &str = "ckpt_last.ra";
pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: Arch,
    pub objective: ObjectiveConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate_encoder: f64,
    pub learning_rate_decoder: f64,
    pub seed: u64,
    /// Refresh the last-checkpoint file every this many steps.
    pub checkpoint_every: u64,
    /// Run held-out validation (and best tracking) every this many steps.
    pub validation_every: u64,
    /// Fraction of `steps` over which λ ramps linearly up from zero.
    pub lambda_warmup_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: Arch::default(),
            objective: ObjectiveConfig::default(),
            steps: 2000,
            batch_size: 16,
            learning_rate_encoder: 2e-4,
            learning_rate_decoder: 2e-4,
            seed: 0,
            checkpoint_every: 500,
            validation_every: 250,
            lambda_warmup_frac: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.objective.validate()?;
        if self.steps == 0 {
            return Err(RaError::Config("steps must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(RaError::Config("batch_size must be >= 1".into()));
        }
        for (name, lr) in [
            ("learning_rate_encoder", self.learning_rate_encoder),
            ("learning_rate_decoder", self.learning_rate_decoder),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(RaError::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.checkpoint_every == 0 || self.validation_every == 0 {
            return Err(RaError::Config(
                "checkpoint_every and validation_every must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda_warmup_frac) {
            return Err(RaError::Config(format!(
                "lambda_warmup_frac must lie in [0, 1], got {}",
                self.lambda_warmup_frac
            )));
        }
        Ok(())
    }
}

/// Derives the config for one ablation arm: `Vae` turns the adversarial and
/// reversed terms off, `Sivae` keeps only the adversarial game, `Ra` is the
/// full method.
pub fn ablation_mode(cfg: &TrainConfig, mode: Mode) -> TrainConfig {
    let mut out = cfg.clone();
    out.objective.mode = mode;
    if mode != Mode::Ra {
        out.objective.lambda_reversed = 0.0;
    }
    out
}

/// Linear λ warm-up factor for step `s` (0-based).
fn lambda_scale(cfg: &TrainConfig, s: u64) -> f64 {
    let warm = (cfg.lambda_warmup_frac * cfg.steps as f64).round() as u64;
    if warm == 0 {
        1.0
    } else {
        (((s + 1) as f64) / warm as f64).min(1.0)
    }
}

fn effective_objective(cfg: &TrainConfig, s: u64) -> ObjectiveConfig {
    let mut obj = cfg.objective.clone();
    obj.lambda_reversed *= lambda_scale(cfg, s);
    obj
}

/// Model parameters, optimizer moments, and the step counter: everything a
/// resumed run needs.
pub struct TrainState<F: Scalar> {
    model: Model<F>,
    opt_m: Vec<Tensor<F>>,
    opt_v: Vec<Tensor<F>>,
    step: u64,
    seed: u64,
    best_val_ssim: Option<f64>,
}

impl<F: Scalar> TrainState<F> {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(&cfg.arch, cfg.seed)?;
        let zeros: Vec<Tensor<F>> =
            (0..model.params().len()).map(|i| Tensor::zeros(model.params().tensor(i).shape())).collect();
        Ok(TrainState {
            opt_m: zeros.clone(),
            opt_v: zeros,
            model,
            step: 0,
            seed: cfg.seed,
            best_val_ssim: None,
        })
    }

    pub fn model(&self) -> &Model<F> {
        &self.model
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn best_val_ssim(&self) -> Option<f64> {
        self.best_val_ssim
    }

    pub fn to_checkpoint(&self, cfg: Option<&TrainConfig>) -> Checkpoint {
        let mut ckpt = Checkpoint::from_model(&self.model, self.seed, self.step);
        ckpt.train_config = cfg.cloned();
        ckpt.best_val_ssim = self.best_val_ssim;
        let p = self.model.params();
        for (prefix, moments) in [("opt.m.", &self.opt_m), ("opt.v.", &self.opt_v)] {
            for (i, t) in moments.iter().enumerate() {
                ckpt.push_tensor(
                    &format!("{prefix}{}", p.name(i)),
                    t.shape().to_vec(),
                    t.data().iter().map(|v| v.to_f64() as f32).collect(),
                );
            }
        }
        ckpt
    }

    /// Restores a training state. Checkpoints without optimizer moments
    /// (inference exports) restart the moments at zero.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model: Model<F> = ckpt.to_model()?;
        let p = model.params();
        let load_moments = |prefix: &str| -> Result<Vec<Tensor<F>>> {
            let mut out = Vec::with_capacity(p.len());
            for i in 0..p.len() {
                let name = format!("{prefix}{}", p.name(i));
                match ckpt.tensor(&name) {
                    Some((shape, data)) => {
                        if shape != p.tensor(i).shape() {
                            return Err(RaError::Data(format!(
                                "checkpoint tensor {name} has shape {shape:?}, expected {:?}",
                                p.tensor(i).shape()
                            )));
                        }
                        out.push(Tensor::from_vec(
                            shape,
                            data.iter().map(|v| F::from_f64(*v as f64)).collect(),
                        ));
                    }
                    None => out.push(Tensor::zeros(p.tensor(i).shape())),
                }
            }
            Ok(out)
        };
        let opt_m = load_moments("opt.m.")?;
        let opt_v = load_moments("opt.v.")?;
        Ok(TrainState {
            model,
            opt_m,
            opt_v,
            step: ckpt.step,
            seed: ckpt.seed,
            best_val_ssim: ckpt.best_val_ssim,
        })
    }

    /// One Adam update over the tensors of `part`; `t` is the 1-based update
    /// count. Arithmetic stays in `F` so state round-trips through f32
    /// checkpoints exactly.
    fn apply_adam(&mut self, part: Part, grads: &[Option<Tensor<F>>], lr: f64, t: u64) {
        let b1 = F::from_f64(ADAM_BETA1);
        let b2 = F::from_f64(ADAM_BETA2);
        let one_b1 = F::from_f64(1.0 - ADAM_BETA1);
        let one_b2 = F::from_f64(1.0 - ADAM_BETA2);
        let eps = F::from_f64(ADAM_EPS);
        // Bias-corrected step size, folded into one factor.
        let lr_t =
            F::from_f64(lr * (1.0 - ADAM_BETA2.powi(t as i32)).sqrt() / (1.0 - ADAM_BETA1.powi(t as i32)));
        for i in self.model.params().part_indices(part) {
            let m = self.opt_m[i].data_mut();
            let v = self.opt_v[i].data_mut();
            let p = self.model.params_mut().tensor_mut(i).data_mut();
            match &grads[i] {
                Some(g) => {
                    for ((m, v), (p, g)) in
                        m.iter_mut().zip(v.iter_mut()).zip(p.iter_mut().zip(g.data()))
                    {
                        *m = b1 * *m + one_b1 * *g;
                        *v = b2 * *v + one_b2 * *g * *g;
                        *p -= lr_t * *m / (v.sqrt() + eps);
                    }
                }
                None => {
                    // No gradient this step: moments decay, parameters still
                    // move along the decayed first moment.
                    for ((m, v), p) in m.iter_mut().zip(v.iter_mut()).zip(p.iter_mut()) {
                        *m = b1 * *m;
                        *v = b2 * *v;
                        *p -= lr_t * *m / (v.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Fake latents for one half-step: from the prior, from the (detached)
/// posterior of the batch, or alternating between the two.
fn draw_fake_latents<F: Scalar>(
    model: &Model<F>,
    batch: &[&Image],
    obj: &ObjectiveConfig,
    rng: &mut SplitMix64,
) -> Result<Option<Tensor<F>>> {
    if obj.mode == Mode::Vae {
        return Ok(None);
    }
    let d = model.arch().latent_dim;
    let mut z = Vec::with_capacity(batch.len() * d);
    for (i, img) in batch.iter().enumerate() {
        let from_prior = match obj.fake_source {
            FakeSource::Prior => true,
            FakeSource::Posterior => false,
            FakeSource::Both => i % 2 == 0,
        };
        if from_prior {
            for _ in 0..d {
                z.push(F::from_f64(rng.next_gaussian()));
            }
        } else {
            let (_, dist) = model.encode(img)?;
            let code = reparameterize(&dist, rng);
            z.extend(code.z.iter().map(|v| F::from_f64(*v)));
        }
    }
    Ok(Some(Tensor::from_vec(&[batch.len(), d], z)))
}

fn draw_eps<F: Scalar>(rng: &mut SplitMix64, n: usize, d: usize) -> Tensor<F> {
    Tensor::from_vec(&[n, d], (0..n * d).map(|_| F::from_f64(rng.next_gaussian())).collect())
}

fn abort_on_non_finite(bd: &LossBreakdown, half: &str) -> Result<()> {
    if let Some(term) = bd.first_non_finite() {
        return Err(RaError::NonFinite { term: format!("{half} {term}") });
    }
    Ok(())
}

pub(crate) fn encoder_half_step<F: Scalar>(
    state: &mut TrainState<F>,
    x: &Tensor<F>,
    batch: &[&Image],
    obj: &ObjectiveConfig,
    lr: f64,
    s: u64,
) -> Result<LossBreakdown> {
    let seed = state.seed;
    let z_fake = draw_fake_latents(&state.model, batch, obj, &mut stream(seed, "z-fake-enc", s))?;
    let eps_real = draw_eps::<F>(&mut stream(seed, "eps-enc-real", s), batch.len(), state.model.arch().latent_dim);
    let eps_fake = (obj.mode != Mode::Vae)
        .then(|| draw_eps::<F>(&mut stream(seed, "eps-enc-fake", s), batch.len(), state.model.arch().latent_dim));
    let built =
        build_encoder_loss(state.model.params(), x, z_fake.as_ref(), &eps_real, eps_fake.as_ref(), obj)?;
    abort_on_non_finite(&built.breakdown, "encoder")?;
    let grads = built.graph.backward(built.total);
    let per_param: Vec<Option<Tensor<F>>> =
        built.param_ids.iter().map(|id| grads.get(*id).cloned()).collect();
    state.apply_adam(Part::Encoder, &per_param, lr, s + 1);
    Ok(built.breakdown)
}

pub(crate) fn decoder_half_step<F: Scalar>(
    state: &mut TrainState<F>,
    x: &Tensor<F>,
    batch: &[&Image],
    obj: &ObjectiveConfig,
    lr: f64,
    s: u64,
) -> Result<LossBreakdown> {
    let seed = state.seed;
    let z_fake = draw_fake_latents(&state.model, batch, obj, &mut stream(seed, "z-fake-dec", s))?;
    let eps_real = draw_eps::<F>(&mut stream(seed, "eps-dec-real", s), batch.len(), state.model.arch().latent_dim);
    let eps_fake = (obj.mode != Mode::Vae)
        .then(|| draw_eps::<F>(&mut stream(seed, "eps-dec-fake", s), batch.len(), state.model.arch().latent_dim));
    let built =
        build_decoder_loss(state.model.params(), x, z_fake.as_ref(), &eps_real, eps_fake.as_ref(), obj)?;
    abort_on_non_finite(&built.breakdown, "decoder")?;
    let grads = built.graph.backward(built.total);
    let per_param: Vec<Option<Tensor<F>>> =
        built.param_ids.iter().map(|id| grads.get(*id).cloned()).collect();
    state.apply_adam(Part::Decoder, &per_param, lr, s + 1);
    Ok(built.breakdown)
}

/// One full optimization step (encoder update, then decoder update with fresh
/// fake samples). Returns the encoder and decoder loss breakdowns.
pub fn train_step<F: Scalar>(
    state: &mut TrainState<F>,
    batch: &[Image],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, LossBreakdown)> {
    if batch.is_empty() {
        return Err(RaError::Data("train_step needs a non-empty batch".into()));
    }
    let refs: Vec<&Image> = batch.iter().collect();
    let x = batch_tensor::<F>(&refs, state.model.arch())?;
    let s = state.step;
    let obj = effective_objective(cfg, s);
    let enc = encoder_half_step(state, &x, &refs, &obj, cfg.learning_rate_encoder, s)?;
    let dec = decoder_half_step(state, &x, &refs, &obj, cfg.learning_rate_decoder, s)?;
    state.step = s + 1;
    Ok((enc, dec))
}

/// Deterministic held-out metrics: mean per-pixel L1 between inputs and
/// posterior-mean reconstructions, and mean SSIM when the images are big
/// enough for the 11×11 window.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ValMetrics {
    pub l1: f64,
    pub ssim: Option<f64>,
}

pub fn validate_model<F: Scalar>(model: &Model<F>, val: &[Image]) -> Result<ValMetrics> {
    if val.is_empty() {
        return Err(RaError::Data("validation set is empty".into()));
    }
    let recs = model.reconstruct_batch(val)?;
    let mut l1 = 0.0;
    let mut ssim_sum = 0.0;
    let can_ssim = val[0].h() >= 11 && val[0].w() >= 11;
    for (x, r) in val.iter().zip(&recs) {
        let n = (x.h() * x.w()) as f64;
        l1 += x.data().iter().zip(r.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
        if can_ssim {
            ssim_sum += ssim(x, r)?;
        }
    }
    let n = val.len() as f64;
    Ok(ValMetrics { l1: l1 / n, ssim: can_ssim.then(|| ssim_sum / n) })
}

pub struct FitResult {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub best_val_ssim: Option<f64>,
    pub final_step: u64,
}

/// Trains a fresh model. `train` must contain only healthy images — that is
/// the whole premise of the method.
pub fn fit<F: Scalar>(
    cfg: &TrainConfig,
    train: &[Image],
    val: &[Image],
    out_dir: &Path,
) -> Result<FitResult> {
    let state = TrainState::<F>::new(cfg)?;
    fit_from(state, cfg, train, val, out_dir)
}

/// Continues training from an existing state (resume path). Best-checkpoint
/// tracking is per run: the first validation of a resumed run always
/// establishes a fresh best.
pub fn fit_from<F: Scalar>(
    mut state: TrainState<F>,
    cfg: &TrainConfig,
    train: &[Image],
    val: &[Image],
    out_dir: &Path,
) -> Result<FitResult> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(RaError::Data("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(RaError::Data("validation set is empty".into()));
    }
    let (h, w) = (cfg.arch.image_h, cfg.arch.image_w);
    for img in train.iter().chain(val) {
        if img.h() != h || img.w() != w {
            return Err(RaError::Shape(format!(
                "dataset image is {}x{}, model expects {h}x{w}",
                img.h(),
                img.w()
            )));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| RaError::io(out_dir, e))?;
    let log_path = out_dir.join(TRAIN_LOG);
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let mut log = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| RaError::io(&log_path, e))?,
    );
    let mut write_log = |rec: serde_json::Value| -> Result<()> {
        serde_json::to_writer(&mut log, &rec).map_err(|e| RaError::Data(format!("log encode: {e}")))?;
        log.write_all(b"\n").and_then(|_| log.flush()).map_err(|e| RaError::io(&log_path, e))
    };

    state.best_val_ssim = None;
    let mut best_score: Option<f64> = None;
    while state.step < cfg.steps {
        let s = state.step;
        let mut rng = stream(cfg.seed, "batch", s);
        let batch: Vec<Image> = (0..cfg.batch_size)
            .map(|_| train[(rng.next_u64() % train.len() as u64) as usize].clone())
            .collect();
        let t0 = Instant::now();
        let (enc, dec) = train_step(&mut state, &batch, cfg)?;
        write_log(serde_json::json!({
            "step": s,
            "wall_ms": t0.elapsed().as_secs_f64() * 1e3,
            "lambda_scale": lambda_scale(cfg, s),
            "encoder": enc,
            "decoder": dec,
        }))?;

        let done = state.step == cfg.steps;
        if state.step % cfg.validation_every == 0 || done {
            let vm = validate_model(&state.model, val)?;
            write_log(serde_json::json!({
                "step": state.step,
                "event": "validation",
                "val_l1": vm.l1,
                "val_ssim": vm.ssim,
            }))?;
            let score = vm.ssim.unwrap_or(-vm.l1);
            if best_score.is_none_or(|b| score > b) {
                best_score = Some(score);
                state.best_val_ssim = vm.ssim;
                state.to_checkpoint(Some(cfg)).save(&best_path)?;
            }
        }
        if state.step % cfg.checkpoint_every == 0 || done {
            state.to_checkpoint(Some(cfg)).save(&last_path)?;
        }
    }
    Ok(FitResult {
        best_checkpoint: best_path,
        last_checkpoint: last_path,
        log_path,
        best_val_ssim: state.best_val_ssim,
        final_step: state.step,
    })
}
