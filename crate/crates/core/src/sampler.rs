//! DDPM / DDIM stepping, DDIM inversion (standard and temporal) and the
//! full sampling loops with a per-step hook.

use std::sync::Arc;

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::diffusion::{lin2, predict_z0_at, LatentVideo, NoiseSchedule, RespacedSchedule};
use crate::rng::NoiseStream;
use crate::{Error, Result};

/// `ε_θ(z_t, t)`; `t` is a training-schedule timestep.
///
/// Implementations must return a tensor of `z_t`'s shape and keep autodiff
/// history when `z_t` carries it.
pub trait EpsilonPredictor: Send + Sync {
    fn predict(&self, z_t: &Tensor, t: usize) -> Result<Tensor>;
}

impl<F> EpsilonPredictor for F
where
    F: Fn(&Tensor, usize) -> Result<Tensor> + Send + Sync,
{
    fn predict(&self, z_t: &Tensor, t: usize) -> Result<Tensor> {
        self(z_t, t)
    }
}

/// `ε_θ ≡ 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroEps;

impl EpsilonPredictor for ZeroEps {
    fn predict(&self, z_t: &Tensor, _t: usize) -> Result<Tensor> {
        Ok(z_t.zeros_like()?)
    }
}

/// `ε_θ ≡ c`.
#[derive(Debug, Clone, Copy)]
pub struct ConstantEps(pub f64);

impl EpsilonPredictor for ConstantEps {
    fn predict(&self, z_t: &Tensor, _t: usize) -> Result<Tensor> {
        Ok(z_t.ones_like()?.affine(self.0, 0.0)?)
    }
}

fn eval_eps(model: &dyn EpsilonPredictor, z: &Tensor, t: usize) -> Result<Tensor> {
    let eps = model.predict(z, t)?;
    if eps.dims() != z.dims() {
        return Err(Error::invalid(format!(
            "epsilon model returned shape {:?} for input {:?}",
            eps.dims(),
            z.dims()
        )));
    }
    Ok(eps)
}

/// DDPM reverse step with posterior variance; `noise` is ignored at `t = 1`.
pub fn ddpm_step(
    z_t: &LatentVideo,
    t: usize,
    model: &dyn EpsilonPredictor,
    sched: &NoiseSchedule,
    noise: &Tensor,
) -> Result<LatentVideo> {
    if t == 0 || t > sched.t_train() {
        return Err(Error::invalid(format!("DDPM step t={t} outside [1, {}]", sched.t_train())));
    }
    let z = z_t.tensor();
    if noise.dims() != z.dims() {
        return Err(Error::invalid("DDPM noise shape differs from z_t"));
    }
    let eps = eval_eps(model, z, t)?;
    let a = sched.alpha(t);
    let inv = 1.0 / a.sqrt();
    let mean = lin2(z, inv, &eps, -inv * (1.0 - a) / (1.0 - sched.alpha_bar(t)).sqrt())?;
    if t == 1 {
        return LatentVideo::new(mean);
    }
    let sigma = sched.posterior_variance(t)?.sqrt();
    LatentVideo::new((mean + noise.affine(sigma, 0.0)?)?)
}

/// DDIM update given a precomputed `ε̂`.
pub fn ddim_step_with_eps(z_t: &Tensor, eps: &Tensor, t: usize, t_prev: usize, sched: &RespacedSchedule) -> Result<Tensor> {
    if t_prev >= t {
        return Err(Error::invalid(format!("DDIM step needs t_prev < t, got {t_prev} >= {t}")));
    }
    let z0 = predict_z0_at(z_t, eps, sched.alpha_bar(t))?;
    let ap = sched.alpha_bar(t_prev);
    lin2(&z0, ap.sqrt(), eps, (1.0 - ap).sqrt())
}

pub fn ddim_step(
    z_t: &LatentVideo,
    t: usize,
    t_prev: usize,
    model: &dyn EpsilonPredictor,
    sched: &RespacedSchedule,
) -> Result<LatentVideo> {
    if t_prev >= t {
        return Err(Error::invalid(format!("DDIM step needs t_prev < t, got {t_prev} >= {t}")));
    }
    let eps = eval_eps(model, z_t.tensor(), t)?;
    LatentVideo::new(ddim_step_with_eps(z_t.tensor(), &eps, t, t_prev, sched)?)
}

fn invert_with_eps(z_prev: &Tensor, eps: &Tensor, t: usize, t_prev: usize, sched: &RespacedSchedule) -> Result<Tensor> {
    let z0 = predict_z0_at(z_prev, eps, sched.alpha_bar(t_prev))?;
    let a = sched.alpha_bar(t);
    lin2(&z0, a.sqrt(), eps, (1.0 - a).sqrt())
}

fn check_invert(t: usize, t_prev: usize) -> Result<()> {
    if t_prev >= t {
        return Err(Error::invalid(format!("inversion step needs t_prev < t, got {t_prev} >= {t}")));
    }
    Ok(())
}

/// One DDIM inversion step `z_{t_prev} → z_t`, with `ε̂ = ε_θ(z_{t_prev}, t)`.
pub fn ddim_invert_step(
    z_prev: &LatentVideo,
    t: usize,
    t_prev: usize,
    model: &dyn EpsilonPredictor,
    sched: &RespacedSchedule,
) -> Result<LatentVideo> {
    check_invert(t, t_prev)?;
    let eps = eval_eps(model, z_prev.tensor(), t)?;
    LatentVideo::new(invert_with_eps(z_prev.tensor(), &eps, t, t_prev, sched)?)
}

/// Frame 0's noise prediction repeated over all frames.
pub fn first_frame_noise(eps: &Tensor) -> Result<Tensor> {
    Ok(eps.narrow(0, 0, 1)?.broadcast_as(eps.shape())?.contiguous()?)
}

/// Inversion step whose noise is the first frame's `ε̂` broadcast to every frame.
pub fn temporal_ddim_invert_step(
    z_prev: &LatentVideo,
    t: usize,
    t_prev: usize,
    model: &dyn EpsilonPredictor,
    sched: &RespacedSchedule,
) -> Result<LatentVideo> {
    check_invert(t, t_prev)?;
    let eps = first_frame_noise(&eval_eps(model, z_prev.tensor(), t)?)?;
    LatentVideo::new(invert_with_eps(z_prev.tensor(), &eps, t, t_prev, sched)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    Ddpm,
    Ddim,
}

/// `t_star` counts respaced steps in DDIM mode and training steps in DDPM mode.
#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub t_star: usize,
    pub sched: Arc<RespacedSchedule>,
    pub mode: SamplerMode,
}

impl SamplerConfig {
    pub fn ddim(t_star: usize, sched: Arc<RespacedSchedule>) -> Self {
        Self { t_star, sched, mode: SamplerMode::Ddim }
    }

    pub fn ddpm(t_star: usize, sched: Arc<RespacedSchedule>) -> Self {
        Self { t_star, sched, mode: SamplerMode::Ddpm }
    }

    pub fn validate(&self) -> Result<()> {
        let max = match self.mode {
            SamplerMode::Ddim => self.sched.t_ddim(),
            SamplerMode::Ddpm => self.sched.base().t_train(),
        };
        if self.t_star > max {
            return Err(Error::invalid(format!("t_star {} exceeds {max} for {:?}", self.t_star, self.mode)));
        }
        Ok(())
    }

    /// The training timestep the chain starts from.
    pub fn start_timestep(&self) -> Result<usize> {
        match self.mode {
            SamplerMode::Ddim => self.sched.timestep(self.t_star),
            SamplerMode::Ddpm => Ok(self.t_star),
        }
    }
}

/// DDIM inversion from `z0` up to respaced step `t_star`.
pub fn run_inversion(
    z0: &LatentVideo,
    cfg: &SamplerConfig,
    model: &dyn EpsilonPredictor,
    temporal: bool,
) -> Result<LatentVideo> {
    if cfg.mode != SamplerMode::Ddim {
        return Err(Error::invalid("inversion requires a DDIM sampler config"));
    }
    cfg.validate()?;
    let mut z = z0.clone();
    for k in 1..=cfg.t_star {
        let (t, t_prev) = (cfg.sched.timestep(k)?, cfg.sched.timestep(k - 1)?);
        z = if temporal {
            temporal_ddim_invert_step(&z, t, t_prev, model, &cfg.sched)?
        } else {
            ddim_invert_step(&z, t, t_prev, model, &cfg.sched)?
        };
    }
    Ok(z)
}

/// What the sampler exposes at one denoising step.
///
/// When the hook asked for a graph, `z_t` is a tracked variable and `eps_hat`
/// and `z0_hat` are differentiable functions of it.
pub struct DenoiseStep<'a> {
    /// Position in the loop, 0 for the first (noisiest) step.
    pub index: usize,
    pub t: usize,
    pub t_prev: usize,
    pub z_t: &'a Tensor,
    pub eps_hat: &'a Tensor,
    pub z0_hat: &'a Tensor,
    /// The un-guided next state.
    pub z_prev: &'a Tensor,
}

pub trait StepHook {
    fn needs_graph(&self) -> bool {
        false
    }

    /// Returning `Some(z)` makes the sampler continue from `z` in place of `z_t`
    /// (the next state is recomputed with the same `ε̂`).
    fn on_step(&mut self, step: &DenoiseStep<'_>) -> Result<Option<Tensor>>;
}

fn check_finite(t: &Tensor, step: usize, what: &str) -> Result<()> {
    let bad = t
        .to_dtype(candle_core::DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?
        .iter()
        .any(|v| !v.is_finite());
    if bad {
        return Err(Error::Purification { step, reason: format!("non-finite {what}") });
    }
    Ok(())
}

/// Denoises from `t_star` down to 0.
///
/// DDPM mode draws its per-step noise from `noise`, which is then required.
pub fn run_denoise(
    z_tstar: &LatentVideo,
    cfg: &SamplerConfig,
    model: &dyn EpsilonPredictor,
    mut hook: Option<&mut dyn StepHook>,
    noise: Option<&mut NoiseStream>,
) -> Result<LatentVideo> {
    cfg.validate()?;
    match cfg.mode {
        SamplerMode::Ddpm => {
            let noise = noise.ok_or_else(|| Error::invalid("DDPM sampling needs a noise stream"))?;
            let sched = cfg.sched.base();
            let mut z = z_tstar.clone();
            for t in (1..=cfg.t_star).rev() {
                let n = noise.normal_like(z.tensor())?;
                z = ddpm_step(&z, t, model, sched, &n)?;
                check_finite(z.tensor(), t, "DDPM state")?;
            }
            Ok(z)
        }
        SamplerMode::Ddim => {
            let graph = hook.as_ref().map(|h| h.needs_graph()).unwrap_or(false);
            let mut z = z_tstar.tensor().detach();
            for (index, k) in (1..=cfg.t_star).rev().enumerate() {
                let (t, t_prev) = (cfg.sched.timestep(k)?, cfg.sched.timestep(k - 1)?);
                let var;
                let zt = if graph {
                    var = Var::from_tensor(&z)?;
                    var.as_tensor()
                } else {
                    &z
                };
                let eps = eval_eps(model, zt, t)?;
                check_finite(&eps, t, "noise prediction")?;
                let z0_hat = predict_z0_at(zt, &eps, cfg.sched.alpha_bar(t))?;
                let ap = cfg.sched.alpha_bar(t_prev);
                let mut next = lin2(&z0_hat, ap.sqrt(), &eps, (1.0 - ap).sqrt())?;
                if let Some(h) = hook.as_deref_mut() {
                    let step = DenoiseStep { index, t, t_prev, z_t: zt, eps_hat: &eps, z0_hat: &z0_hat, z_prev: &next };
                    if let Some(replacement) = h.on_step(&step)? {
                        next = ddim_step_with_eps(&replacement.detach(), &eps.detach(), t, t_prev, &cfg.sched)?;
                    }
                }
                z = next.detach();
                check_finite(&z, t, "DDIM state")?;
            }
            LatentVideo::new(z)
        }
    }
}
