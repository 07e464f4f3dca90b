//! Deterministic single-threaded training loops.

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::log_softmax;
use super::models::{
    trainable, Autoencoder, AutoencoderConfig, ClassifierConfig, EpsilonModel, EpsilonModelConfig, LatentCodec,
    Model, VideoClassifier,
};
use crate::diffusion::{lin2, NoiseSchedule};
use crate::rng::{derive_seed, rng_from_seed, NoiseStream};
use crate::video::LabeledClip;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTrainConfig {
    pub optim: OptimConfig,
    /// Timesteps are drawn uniformly from `[1, t_max]`.
    pub t_max: usize,
    pub model: EpsilonModelConfig,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig { epochs: 12, batch_size: 4, lr: 2e-3, weight_decay: 0.0, seed: 7 },
            t_max: 300,
            model: EpsilonModelConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub optim: OptimConfig,
    pub model: ClassifierConfig,
    /// Each training clip gets Gaussian noise with std drawn from `U[0, noise_augment]`, then a [0,1] clamp.
    #[serde(default)]
    pub noise_augment: f64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig { epochs: 30, batch_size: 8, lr: 3e-3, weight_decay: 1e-4, seed: 11 },
            model: ClassifierConfig::default(),
            noise_augment: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderTrainConfig {
    pub optim: OptimConfig,
    pub model: AutoencoderConfig,
}

impl Default for AutoencoderTrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig { epochs: 10, batch_size: 4, lr: 2e-3, weight_decay: 0.0, seed: 13 },
            model: AutoencoderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub kind: String,
    pub final_loss: f64,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    pub epochs: usize,
    pub steps: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub held_out_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub held_out_eps_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zero_predictor_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reconstruction_mae: Option<f64>,
    /// Mean drop in true-class probability when held-out clips are frame-shuffled.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub permutation_confidence_drop: Option<f64>,
}

impl TrainReport {
    fn new(kind: &str, seed: u64) -> Self {
        Self {
            kind: kind.into(),
            final_loss: f64::NAN,
            loss_curve: Vec::new(),
            epochs: 0,
            steps: 0,
            seed,
            held_out_accuracy: None,
            held_out_eps_mse: None,
            zero_predictor_mse: None,
            reconstruction_mae: None,
            permutation_confidence_drop: None,
        }
    }
}

fn check_common(clips: &[LabeledClip], o: &OptimConfig) -> Result<()> {
    if clips.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if o.epochs == 0 || o.batch_size == 0 || !(o.lr > 0.0) {
        return Err(Error::invalid("epochs, batch size and learning rate must be positive"));
    }
    let shape = clips[0].video.shape();
    if clips.iter().any(|c| c.video.shape() != shape) {
        return Err(Error::invalid("training clips must share one shape"));
    }
    Ok(())
}

struct Trainer {
    opt: AdamW,
    base_lr: f64,
    total: usize,
    step: usize,
}

impl Trainer {
    fn new(vars: Vec<Var>, o: &OptimConfig, total: usize) -> Result<Self> {
        let params = ParamsAdamW { lr: o.lr, weight_decay: o.weight_decay, ..Default::default() };
        Ok(Self { opt: AdamW::new(vars, params)?, base_lr: o.lr, total, step: 0 })
    }

    /// One update with a cosine-decayed learning rate; rejects non-finite losses.
    fn update(&mut self, loss: &Tensor) -> Result<f64> {
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Training { step: self.step, reason: format!("loss is {value}") });
        }
        let frac = self.step as f64 / self.total.max(1) as f64;
        self.opt.set_learning_rate(self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()));
        self.opt.backward_step(loss)?;
        self.step += 1;
        Ok(value)
    }
}

fn batches(n: usize, batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

fn stack_videos(clips: &[LabeledClip], idx: &[usize]) -> Result<Tensor> {
    let parts = idx.iter().map(|&i| clips[i].video.to_tensor(&Device::Cpu)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 0)?)
}

/// `x` holds whole clips of `frames` frames stacked along dim 0; one std per clip.
fn add_noise(x: &Tensor, frames: usize, max_std: f64, noise: &mut NoiseStream) -> Result<Tensor> {
    let n = x.dim(0)?;
    let mut stds = Vec::with_capacity(n);
    for _ in 0..n / frames {
        let s = noise.rng().random_range(0.0..=max_std) as f32;
        stds.extend(std::iter::repeat_n(s, frames));
    }
    let mut shape = vec![1; x.rank()];
    shape[0] = n;
    let std = Tensor::from_vec(stds, shape, x.device())?;
    let e = noise.normal_like(x)?.broadcast_mul(&std)?;
    Ok((x + e)?.clamp(0f32, 1f32)?)
}

/// Noisy latents for a batch: per clip `t ~ U[1, t_max]` and fresh `ε`.
fn noisy_batch(
    latents: &[Tensor],
    idx: &[usize],
    sched: &NoiseSchedule,
    t_max: usize,
    noise: &mut NoiseStream,
) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let (mut zs, mut es, mut ts) = (Vec::new(), Vec::new(), Vec::new());
    for &i in idx {
        let t = noise.rng().random_range(1..=t_max);
        let eps = noise.normal_like(&latents[i])?;
        let ab = sched.alpha_bar(t);
        zs.push(lin2(&latents[i], ab.sqrt(), &eps, (1.0 - ab).sqrt())?);
        es.push(eps);
        ts.push(t);
    }
    Ok((Tensor::cat(&zs, 0)?, Tensor::cat(&es, 0)?, ts))
}

/// Trains `ε_θ` on codec latents with the standard noise-prediction MSE.
pub fn train_epsilon_model(
    train: &[LabeledClip],
    held_out: &[LabeledClip],
    codec: &LatentCodec,
    sched: &NoiseSchedule,
    cfg: &DiffusionTrainConfig,
) -> Result<(EpsilonModel, TrainReport)> {
    let o = &cfg.optim;
    check_common(train, o)?;
    if cfg.t_max == 0 || cfg.t_max > sched.t_train() {
        return Err(Error::invalid(format!("t_max must be in [1, {}]", sched.t_train())));
    }
    let frames = train[0].video.shape().frames;
    let encode = |clips: &[LabeledClip]| -> Result<Vec<Tensor>> {
        clips.iter().map(|c| Ok(codec.encode(&c.video)?.into_tensor().detach())).collect()
    };
    let latents = encode(train)?;
    let mut model_cfg = cfg.model;
    model_cfg.channels = latents[0].dim(3)?;
    let (model, vars) = trainable::<EpsilonModel>(&model_cfg, derive_seed(o.seed, "eps-init", 0))?;
    let per_epoch = train.len().div_ceil(o.batch_size);
    let mut trainer = Trainer::new(vars, o, o.epochs * per_epoch)?;
    let mut order_rng = rng_from_seed(derive_seed(o.seed, "eps-order", 0));
    let mut noise = NoiseStream::new(derive_seed(o.seed, "eps-noise", 0));
    let mut report = TrainReport::new("epsilon_model", o.seed);
    for epoch in 0..o.epochs {
        let mut sum = 0.0;
        let mut count = 0;
        for idx in batches(train.len(), o.batch_size, &mut order_rng) {
            let (zt, eps, ts) = noisy_batch(&latents, &idx, sched, cfg.t_max, &mut noise)?;
            let pred = model.forward(&zt, frames, &ts)?;
            let loss = (pred - eps)?.sqr()?.mean_all()?;
            sum += trainer.update(&loss)?;
            count += 1;
        }
        report.loss_curve.push(sum / count as f64);
        log::info!("epsilon model epoch {epoch}: loss {:.4}", sum / count as f64);
    }
    let model = model.freeze()?;
    report.final_loss = *report.loss_curve.last().unwrap();
    report.epochs = o.epochs;
    report.steps = trainer.step;
    if !held_out.is_empty() {
        let (mse, zero) = held_out_eps_mse(&model, &encode(held_out)?, sched, cfg.t_max, o.seed)?;
        report.held_out_eps_mse = Some(mse);
        report.zero_predictor_mse = Some(zero);
    }
    Ok((model, report))
}

/// `(model MSE, zero-predictor MSE)` on held-out latents with a fixed noise stream.
pub fn held_out_eps_mse(
    model: &EpsilonModel,
    latents: &[Tensor],
    sched: &NoiseSchedule,
    t_max: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut noise = NoiseStream::new(derive_seed(seed, "eps-held-out", 0));
    let (mut m, mut z) = (0.0, 0.0);
    for i in 0..latents.len() {
        let (zt, eps, ts) = noisy_batch(latents, &[i], sched, t_max, &mut noise)?;
        let pred = model.forward(&zt, zt.dim(0)?, &ts)?;
        m += (pred - &eps)?.sqr()?.mean_all()?.to_scalar::<f32>()? as f64;
        z += eps.sqr()?.mean_all()?.to_scalar::<f32>()? as f64;
    }
    let n = latents.len() as f64;
    Ok((m / n, z / n))
}

/// Mean cross-entropy of `(B, K)` logits against labels.
pub(crate) fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let lp = log_softmax(logits)?;
    let idx = Tensor::from_vec(labels.iter().map(|&l| l as u32).collect::<Vec<_>>(), (labels.len(), 1), &Device::Cpu)?;
    Ok(lp.gather(&idx, 1)?.mean_all()?.neg()?)
}

pub fn train_classifier(
    train: &[LabeledClip],
    held_out: &[LabeledClip],
    cfg: &ClassifierTrainConfig,
) -> Result<(VideoClassifier, TrainReport)> {
    let o = &cfg.optim;
    check_common(train, o)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.channels = train[0].video.shape().channels;
    if let Some(c) = train.iter().find(|c| c.label >= model_cfg.classes) {
        return Err(Error::invalid(format!("label {} outside {} classes", c.label, model_cfg.classes)));
    }
    let frames = train[0].video.shape().frames;
    let (model, vars) = trainable::<VideoClassifier>(&model_cfg, derive_seed(o.seed, "clf-init", 0))?;
    let per_epoch = train.len().div_ceil(o.batch_size);
    let mut trainer = Trainer::new(vars, o, o.epochs * per_epoch)?;
    let mut order_rng = rng_from_seed(derive_seed(o.seed, "clf-order", 0));
    let mut report = TrainReport::new("video_classifier", o.seed);
    if !(cfg.noise_augment >= 0.0 && cfg.noise_augment.is_finite()) {
        return Err(Error::invalid("noise_augment must be a finite non-negative std"));
    }
    let mut aug = NoiseStream::new(derive_seed(o.seed, "clf-augment", 0));
    for epoch in 0..o.epochs {
        let (mut sum, mut count) = (0.0, 0);
        for idx in batches(train.len(), o.batch_size, &mut order_rng) {
            let mut x = stack_videos(train, &idx)?;
            if cfg.noise_augment > 0.0 {
                x = add_noise(&x, frames, cfg.noise_augment, &mut aug)?;
            }
            let labels: Vec<usize> = idx.iter().map(|&i| train[i].label).collect();
            let loss = cross_entropy(&model.forward(&x, frames)?, &labels)?;
            sum += trainer.update(&loss)?;
            count += 1;
        }
        report.loss_curve.push(sum / count as f64);
        log::info!("classifier epoch {epoch}: loss {:.4}", sum / count as f64);
    }
    let model = model.freeze()?;
    report.final_loss = *report.loss_curve.last().unwrap();
    report.epochs = o.epochs;
    report.steps = trainer.step;
    if !held_out.is_empty() {
        report.held_out_accuracy = Some(accuracy(&model, held_out)?);
        report.permutation_confidence_drop = Some(permutation_drop(&model, held_out, o.seed)?);
    }
    Ok((model, report))
}

pub fn accuracy(model: &VideoClassifier, clips: &[LabeledClip]) -> Result<f64> {
    let mut correct = 0;
    for c in clips {
        if super::classify(model, &c.video)?.1 == c.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / clips.len().max(1) as f64)
}

fn true_prob(model: &VideoClassifier, x: &crate::video::VideoTensor, label: usize) -> Result<f64> {
    let logits = super::classify(model, x)?.0;
    let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let z: f64 = logits.iter().map(|&l| (l as f64 - m).exp()).sum();
    Ok((logits[label] as f64 - m).exp() / z)
}

fn permutation_drop(model: &VideoClassifier, clips: &[LabeledClip], seed: u64) -> Result<f64> {
    let mut rng = rng_from_seed(derive_seed(seed, "clf-permute", 0));
    let mut total = 0.0;
    for c in clips {
        let mut order: Vec<usize> = (0..c.video.shape().frames).collect();
        order.shuffle(&mut rng);
        let shuffled = c.video.reorder_frames(&order)?;
        total += true_prob(model, &c.video, c.label)? - true_prob(model, &shuffled, c.label)?;
    }
    Ok(total / clips.len().max(1) as f64)
}

/// Trains the stride-4 autoencoder, then rescales its latents to unit standard deviation.
pub fn train_autoencoder(
    train: &[LabeledClip],
    held_out: &[LabeledClip],
    cfg: &AutoencoderTrainConfig,
) -> Result<(Autoencoder, TrainReport)> {
    let o = &cfg.optim;
    check_common(train, o)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.channels = train[0].video.shape().channels;
    model_cfg.scale = 1.0;
    let (model, vars) = trainable::<Autoencoder>(&model_cfg, derive_seed(o.seed, "ae-init", 0))?;
    let per_epoch = train.len().div_ceil(o.batch_size);
    let mut trainer = Trainer::new(vars, o, o.epochs * per_epoch)?;
    let mut order_rng = rng_from_seed(derive_seed(o.seed, "ae-order", 0));
    let mut report = TrainReport::new("autoencoder", o.seed);
    for _ in 0..o.epochs {
        let (mut sum, mut count) = (0.0, 0);
        for idx in batches(train.len(), o.batch_size, &mut order_rng) {
            let x = stack_videos(train, &idx)?;
            let loss = (model.decode(&model.encode(&x)?)? - &x)?.sqr()?.mean_all()?;
            sum += trainer.update(&loss)?;
            count += 1;
        }
        report.loss_curve.push(sum / count as f64);
    }
    let model = model.freeze()?;
    let mut sq = 0.0;
    let mut n = 0usize;
    for c in train {
        let z = model.encode(&c.video.to_tensor(&Device::Cpu)?)?;
        sq += z.sqr()?.sum_all()?.to_scalar::<f32>()? as f64;
        n += z.elem_count();
    }
    let rms = (sq / n as f64).sqrt();
    let model = model.with_scale(if rms > 0.0 { 1.0 / rms } else { 1.0 })?;
    report.final_loss = *report.loss_curve.last().unwrap();
    report.epochs = o.epochs;
    report.steps = trainer.step;
    if !held_out.is_empty() {
        let codec = LatentCodec::Autoencoder(Box::new(model.clone()));
        let mut mae = 0.0;
        for c in held_out {
            mae += codec.decode(&codec.encode(&c.video)?)?.mean_abs_diff(&c.video);
        }
        report.reconstruction_mae = Some(mae / held_out.len() as f64);
    }
    Ok((model, report))
}
