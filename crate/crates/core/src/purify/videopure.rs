//! Temporal DDIM inversion, guided denoising and multi-step voting.

use std::sync::Arc;

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use super::{Purified, Purifier};
use crate::diffusion::{ddim_sigma_sq_with, predict_z0_at, LatentVideo, RespacedSchedule};
use crate::guidance::{
    estimate_flow_lk, grad_of, guided_update, loss_combined, tensor_norm, FlowSource, GradientMode, GuidanceConfig,
    GuidanceStep, GuidanceTrace, WarpPlan,
};
use crate::nn::LatentCodec;
use crate::sampler::{run_denoise, run_inversion, DenoiseStep, EpsilonPredictor, SamplerConfig, StepHook};
use crate::video::{FlowField, VideoTensor};
use crate::{Error, Result};

/// Which candidates enter the vote.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum VoteMode {
    #[default]
    All,
    /// Only the candidate at this position of the vote list (0 = largest t).
    Single { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VideoPureConfig {
    pub t_star: usize,
    pub guidance: GuidanceConfig,
    #[serde(default)]
    pub vote: VoteMode,
    /// Continue the trajectory from `z_t′` instead of `z_t*`.
    #[serde(default)]
    pub zt_replace: bool,
    /// Use frame-0 noise during inversion.
    #[serde(default = "yes")]
    pub temporal_inversion: bool,
}

fn yes() -> bool {
    true
}

impl Default for VideoPureConfig {
    fn default() -> Self {
        Self {
            t_star: 6,
            guidance: GuidanceConfig::default(),
            vote: VoteMode::All,
            zt_replace: false,
            temporal_inversion: true,
        }
    }
}

pub struct VideoPure {
    eps: Arc<dyn EpsilonPredictor>,
    codec: Arc<LatentCodec>,
    sched: Arc<RespacedSchedule>,
    cfg: VideoPureConfig,
}

impl VideoPure {
    pub fn new(
        eps: Arc<dyn EpsilonPredictor>,
        codec: Arc<LatentCodec>,
        sched: Arc<RespacedSchedule>,
        cfg: VideoPureConfig,
    ) -> Result<Self> {
        cfg.guidance.validate()?;
        SamplerConfig::ddim(cfg.t_star, sched.clone()).validate()?;
        if let VoteMode::Single { index } = cfg.vote {
            if index > cfg.t_star {
                return Err(Error::invalid(format!("single-step index {index} beyond vote list of {}", cfg.t_star + 1)));
            }
        }
        Ok(Self { eps, codec, sched, cfg })
    }

    pub fn config(&self) -> &VideoPureConfig {
        &self.cfg
    }

    /// Undecoded vote list: `t*` optimised predictions plus the post-loop candidate.
    pub fn purify_latents(&self, x: &VideoTensor, flow: Option<&FlowField>) -> Result<(Vec<(usize, Tensor)>, GuidanceTrace)> {
        let z0 = self.codec.encode(x)?.tensor().detach();
        let (_, h, w, _) = z0.dims4()?;
        let g = self.cfg.guidance;
        let plan = if g.is_off() || g.lambda1 == 0.0 {
            WarpPlan::from_raw(0, h, w, &[])?
        } else {
            let estimated;
            let f = match g.flow_source {
                FlowSource::GroundTruth => {
                    flow.ok_or_else(|| Error::Config("ground-truth flow requested but the clip carries none".into()))?
                }
                FlowSource::LucasKanade => {
                    estimated = estimate_flow_lk(x)?;
                    &estimated
                }
            };
            WarpPlan::for_latent(f, h, w)?
        };
        let scfg = SamplerConfig::ddim(self.cfg.t_star, self.sched.clone());
        let zt = run_inversion(&LatentVideo::new(z0.clone())?, &scfg, self.eps.as_ref(), self.cfg.temporal_inversion)?;
        let mut hook = GuideHook {
            z0: &z0,
            plan: &plan,
            cfg: &self.cfg,
            sched: &self.sched,
            candidates: Vec::with_capacity(self.cfg.t_star + 1),
            trace: GuidanceTrace::default(),
        };
        let z0_star = run_denoise(&zt, &scfg, self.eps.as_ref(), Some(&mut hook), None)?.into_tensor();
        let (mut candidates, mut trace) = (hook.candidates, hook.trace);

        // Post-loop update of z₀* with the scale of the first respaced step.
        let last = if g.is_off() {
            z0_star
        } else {
            let var = Var::from_tensor(&z0_star)?;
            let terms = loss_combined(&z0, var.as_tensor(), &plan, &g)?;
            let (l_temp, l_spa, loss) = terms.values()?;
            let grad = grad_of(&terms.total, var.as_tensor())?;
            let t1 = self.sched.timestep(1)?;
            let sigma = ddim_sigma_sq_with(t1, &self.sched, g.first_step_sigma)?;
            trace.push(GuidanceStep { t: 0, l_temp, l_spa, loss, grad_norm: tensor_norm(&grad)? })?;
            guided_update(&z0_star, &grad, g.alpha_s, sigma)?
        };
        candidates.push((0, last));
        Ok((candidates, trace))
    }
}

struct GuideHook<'a> {
    z0: &'a Tensor,
    plan: &'a WarpPlan,
    cfg: &'a VideoPureConfig,
    sched: &'a RespacedSchedule,
    candidates: Vec<(usize, Tensor)>,
    trace: GuidanceTrace,
}

impl StepHook for GuideHook<'_> {
    fn needs_graph(&self) -> bool {
        !self.cfg.guidance.is_off()
    }

    fn on_step(&mut self, s: &DenoiseStep<'_>) -> Result<Option<Tensor>> {
        let g = &self.cfg.guidance;
        if g.is_off() {
            self.candidates.push((s.t, s.z0_hat.detach()));
            return Ok(None);
        }
        let ab = self.sched.alpha_bar(s.t);
        let z0_hat = match g.gradient {
            GradientMode::FullChain => s.z0_hat.clone(),
            GradientMode::ConstantEps => predict_z0_at(s.z_t, &s.eps_hat.detach(), ab)?,
        };
        let terms = loss_combined(self.z0, &z0_hat, self.plan, g)?;
        let (l_temp, l_spa, loss) = terms.values()?;
        let grad = grad_of(&terms.total, s.z_t)?;
        let sigma = ddim_sigma_sq_with(s.t, self.sched, g.first_step_sigma)?;
        self.trace.push(GuidanceStep { t: s.t, l_temp, l_spa, loss, grad_norm: tensor_norm(&grad)? })?;
        let z_prime = guided_update(&s.z_t.detach(), &grad, g.alpha_s, sigma)?;
        // The optimised prediction reuses ε̂ from the un-guided state.
        let optimised = predict_z0_at(&z_prime, &s.eps_hat.detach(), ab)?;
        self.candidates.push((s.t, optimised));
        Ok(if self.cfg.zt_replace { Some(z_prime) } else { None })
    }
}

impl Purifier for VideoPure {
    fn name(&self) -> String {
        "videopure".into()
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn purify(&self, x: &VideoTensor, flow: Option<&FlowField>, _seed: u64) -> Result<Purified> {
        let (latents, trace) = self.purify_latents(x, flow)?;
        let pick: Vec<(usize, Tensor)> = match self.cfg.vote {
            VoteMode::All => latents,
            VoteMode::Single { index } => vec![latents[index].clone()],
        };
        let mut candidates = Vec::with_capacity(pick.len());
        let mut timesteps = Vec::with_capacity(pick.len());
        for (t, z) in pick {
            candidates.push(self.codec.decode(&LatentVideo::new(z)?)?);
            timesteps.push(t);
        }
        Ok(Purified { candidates, timesteps, trace })
    }
}
