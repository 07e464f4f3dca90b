//! Spatial-temporal guidance: flow warping, the two losses and the guided update.

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::diffusion::{predict_z0_at, FirstStepSigma, LatentVideo, RespacedSchedule};
use crate::nn::ops::l2_norm;
use crate::sampler::EpsilonPredictor;
use crate::video::{FlowField, VideoTensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FlowSource {
    #[default]
    GroundTruth,
    /// Single-level Lucas-Kanade with 5×5 windows on the input frames.
    LucasKanade,
}

/// Whether the guidance gradient flows through `ε_θ` or treats `ε̂` as constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    #[default]
    FullChain,
    ConstantEps,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub alpha_s: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    #[serde(default)]
    pub flow_source: FlowSource,
    #[serde(default)]
    pub gradient: GradientMode,
    #[serde(default)]
    pub first_step_sigma: FirstStepSigma,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            alpha_s: -4.0,
            lambda1: 5.0,
            lambda2: 800.0,
            flow_source: FlowSource::GroundTruth,
            gradient: GradientMode::FullChain,
            first_step_sigma: FirstStepSigma::SecondStep,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::invalid("lambda1 and lambda2 must be non-negative"));
        }
        if !self.alpha_s.is_finite() {
            return Err(Error::invalid("alpha_s must be finite"));
        }
        Ok(())
    }

    pub fn is_off(&self) -> bool {
        self.alpha_s == 0.0 || (self.lambda1 == 0.0 && self.lambda2 == 0.0)
    }
}

/// Precomputed bilinear gather for warping `P` frames of size `h×w`.
///
/// Sample positions are clamped to the frame, so out-of-range samples read the border.
#[derive(Debug, Clone)]
pub struct WarpPlan {
    pairs: usize,
    height: usize,
    width: usize,
    idx: [Tensor; 4],
    wts: [Tensor; 4],
}

impl WarpPlan {
    /// `flow` is `(P, h, w, 2)` with `(dx, dy)` per pixel.
    pub fn from_raw(pairs: usize, height: usize, width: usize, flow: &[f32]) -> Result<Self> {
        if flow.len() != pairs * height * width * 2 {
            return Err(Error::invalid(format!(
                "flow has {} values, expected {pairs}×{height}×{width}×2",
                flow.len()
            )));
        }
        if let Some(i) = flow.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite flow value at index {i}")));
        }
        let n = pairs * height * width;
        let mut idx = [vec![0u32; n], vec![0u32; n], vec![0u32; n], vec![0u32; n]];
        let mut wts = [vec![0f32; n], vec![0f32; n], vec![0f32; n], vec![0f32; n]];
        let (hm, wm) = ((height - 1) as f64, (width - 1) as f64);
        for p in 0..pairs {
            for y in 0..height {
                for x in 0..width {
                    let o = (p * height + y) * width + x;
                    let sx = (x as f64 + flow[2 * o] as f64).clamp(0.0, wm);
                    let sy = (y as f64 + flow[2 * o + 1] as f64).clamp(0.0, hm);
                    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                    let (x1, y1) = ((x0 + 1).min(width - 1), (y0 + 1).min(height - 1));
                    let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                    let base = p * height * width;
                    let corners = [(y0, x0, (1.0 - fx) * (1.0 - fy)), (y0, x1, fx * (1.0 - fy)), (y1, x0, (1.0 - fx) * fy), (y1, x1, fx * fy)];
                    for (k, (cy, cx, wgt)) in corners.into_iter().enumerate() {
                        idx[k][o] = (base + cy * width + cx) as u32;
                        wts[k][o] = wgt as f32;
                    }
                }
            }
        }
        let dev = Device::Cpu;
        let mk_i = |v: Vec<u32>| Tensor::from_vec(v, n, &dev);
        let mk_w = |v: Vec<f32>| Tensor::from_vec(v, (n, 1), &dev);
        let [i0, i1, i2, i3] = idx;
        let [w0, w1, w2, w3] = wts;
        Ok(Self {
            pairs,
            height,
            width,
            idx: [mk_i(i0)?, mk_i(i1)?, mk_i(i2)?, mk_i(i3)?],
            wts: [mk_w(w0)?, mk_w(w1)?, mk_w(w2)?, mk_w(w3)?],
        })
    }

    /// Plan for a latent of spatial size `h×w`; pixel flow is pooled and rescaled when the latent is smaller.
    pub fn for_latent(flow: &FlowField, h: usize, w: usize) -> Result<Self> {
        if flow.height() == h && flow.width() == w {
            return Self::from_raw(flow.pairs(), h, w, flow.data());
        }
        if !flow.height().is_multiple_of(h) || flow.height() / h != flow.width() / w.max(1) || !flow.width().is_multiple_of(w) {
            return Err(Error::invalid(format!(
                "flow {}×{} does not map onto latent {h}×{w}",
                flow.height(),
                flow.width()
            )));
        }
        let small = flow.downsample(flow.height() / h)?;
        Self::from_raw(small.pairs(), h, w, small.data())
    }

    pub fn pairs(&self) -> usize {
        self.pairs
    }

    /// Warps `(P, h, w, c)` frames; differentiable with respect to `frames`.
    pub fn apply(&self, frames: &Tensor) -> Result<Tensor> {
        let (p, h, w, c) = frames.dims4()?;
        if (p, h, w) != (self.pairs, self.height, self.width) {
            return Err(Error::invalid(format!(
                "warp plan is {}×{}×{}, frames are {p}×{h}×{w}",
                self.pairs, self.height, self.width
            )));
        }
        let src = frames.reshape((p * h * w, c))?;
        let mut out: Option<Tensor> = None;
        for k in 0..4 {
            let g = src.index_select(&self.idx[k], 0)?.broadcast_mul(&self.wts[k].to_dtype(frames.dtype())?)?;
            out = Some(match out {
                None => g,
                Some(acc) => (acc + g)?,
            });
        }
        Ok(out.unwrap().reshape((p, h, w, c))?)
    }
}

/// Samples `frame_next` (`h×w×c`) at `p + flow(p)` for every pixel `p`; `flow` is `h×w×2`.
pub fn backward_warp(frame_next: &Tensor, flow: &Tensor) -> Result<Tensor> {
    let (h, w, c) = frame_next.dims3()?;
    if flow.dims() != [h, w, 2] {
        return Err(Error::invalid(format!("flow shape {:?} does not match frame {h}×{w}", flow.dims())));
    }
    let raw = flow.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let plan = WarpPlan::from_raw(1, h, w, &raw)?;
    Ok(plan.apply(&frame_next.reshape((1, h, w, c))?)?.reshape((h, w, c))?)
}

/// `Σ_i ‖Warp(z(i+1), O(i)) − z(i)‖₁`; zero when there is a single frame.
pub fn loss_temporal(z0_star: &Tensor, plan: &WarpPlan) -> Result<Tensor> {
    let n = z0_star.dim(0)?;
    if n < 2 {
        return Ok(Tensor::zeros((), z0_star.dtype(), z0_star.device())?);
    }
    if plan.pairs() != n - 1 {
        return Err(Error::invalid(format!("{} flow pairs for {n} frames", plan.pairs())));
    }
    let warped = plan.apply(&z0_star.narrow(0, 1, n - 1)?)?;
    Ok((warped - z0_star.narrow(0, 0, n - 1)?)?.abs()?.sum_all()?)
}

/// `−‖z₀ − z₀*‖₂`.
pub fn loss_spatial(z0: &Tensor, z0_star: &Tensor) -> Result<Tensor> {
    if z0.dims() != z0_star.dims() {
        return Err(Error::invalid(format!("spatial loss shapes {:?} vs {:?}", z0.dims(), z0_star.dims())));
    }
    Ok(l2_norm(&(z0_star - z0)?)?.neg()?)
}

/// The two loss terms and their weighted sum, as differentiable scalars.
pub struct LossTerms {
    pub temporal: Tensor,
    pub spatial: Tensor,
    pub total: Tensor,
}

impl LossTerms {
    pub fn values(&self) -> Result<(f64, f64, f64)> {
        let f = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok((f(&self.temporal)?, f(&self.spatial)?, f(&self.total)?))
    }
}

/// `L = λ₁·L_temp + λ₂·L_spa`; terms with zero weight are skipped.
pub fn loss_combined(z0: &Tensor, z0_star: &Tensor, plan: &WarpPlan, cfg: &GuidanceConfig) -> Result<LossTerms> {
    let zero = || Tensor::zeros((), z0_star.dtype(), z0_star.device());
    let temporal = if cfg.lambda1 != 0.0 { loss_temporal(z0_star, plan)? } else { zero()? };
    let spatial = if cfg.lambda2 != 0.0 { loss_spatial(z0, z0_star)? } else { zero()? };
    let total = (temporal.affine(cfg.lambda1, 0.0)? + spatial.affine(cfg.lambda2, 0.0)?)?;
    Ok(LossTerms { temporal, spatial, total })
}

/// `z′ = z − α_s·σ²·∇L`.
pub fn guided_update(z: &Tensor, grad: &Tensor, alpha_s: f64, sigma_sq: f64) -> Result<Tensor> {
    if z.dims() != grad.dims() {
        return Err(Error::invalid("gradient shape differs from latent"));
    }
    let g = grad.to_dtype(DType::F64)?;
    if g.flatten_all()?.to_vec1::<f64>()?.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite guidance gradient".into()));
    }
    let dt = z.dtype();
    Ok((z.to_dtype(DType::F64)? - g.affine(alpha_s * sigma_sq, 0.0)?)?.to_dtype(dt)?)
}

/// One row of a guidance trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceStep {
    pub t: usize,
    pub l_temp: f64,
    pub l_spa: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct GuidanceTrace {
    pub steps: Vec<GuidanceStep>,
}

impl GuidanceTrace {
    pub fn push(&mut self, step: GuidanceStep) -> Result<()> {
        let vals = [step.l_temp, step.l_spa, step.loss, step.grad_norm];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Purification { step: step.t, reason: "non-finite guidance trace value".into() });
        }
        self.steps.push(step);
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub(crate) fn tensor_norm(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.sqr()?.sum_all()?.sqrt()?.to_scalar::<f64>()?)
}

/// Gradient of a loss with respect to a tracked tensor, or zeros if it did not reach it.
pub(crate) fn grad_of(loss: &Tensor, wrt: &Tensor) -> Result<Tensor> {
    let grads = loss.backward()?;
    match grads.get(wrt) {
        Some(g) => Ok(g.clone()),
        None => Ok(wrt.zeros_like()?),
    }
}

/// `∇_{z_t} L` with `L` evaluated at `z₀ᵗ = predict_z0(z_t, ε_θ(z_t, t), t)`.
pub fn guidance_gradient(
    z_t: &LatentVideo,
    z0_ref: &LatentVideo,
    t: usize,
    model: &dyn EpsilonPredictor,
    plan: &WarpPlan,
    cfg: &GuidanceConfig,
    sched: &RespacedSchedule,
) -> Result<(Tensor, GuidanceStep)> {
    if t == 0 || sched.index_of(t).is_none() {
        return Err(Error::invalid(format!("timestep {t} is not a positive respaced step")));
    }
    let var = Var::from_tensor(&z_t.tensor().detach())?;
    let zt = var.as_tensor();
    let eps = model.predict(zt, t)?;
    let eps = match cfg.gradient {
        GradientMode::FullChain => eps,
        GradientMode::ConstantEps => eps.detach(),
    };
    let z0t = predict_z0_at(zt, &eps, sched.alpha_bar(t))?;
    let terms = loss_combined(z0_ref.tensor(), &z0t, plan, cfg)?;
    let (l_temp, l_spa, loss) = terms.values()?;
    let grad = grad_of(&terms.total, zt)?;
    let grad_norm = tensor_norm(&grad)?;
    Ok((grad, GuidanceStep { t, l_temp, l_spa, loss, grad_norm }))
}

/// Dense flow between consecutive frames from single-level Lucas-Kanade with 5×5 windows.
///
/// Flow `i` maps frame `i`'s grid toward frame `i+1`; ill-conditioned windows get zero flow.
pub fn estimate_flow_lk(video: &VideoTensor) -> Result<FlowField> {
    let s = video.shape();
    let (n, h, w, c) = (s.frames, s.height, s.width, s.channels);
    let at = |f: usize, y: isize, x: isize, ch: usize| -> f64 {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        video.data()[((f * h + yy) * w + xx) * c + ch] as f64
    };
    let limit = h.max(w) as f64;
    let mut out = vec![0f32; (n - 1) * h * w * 2];
    for i in 0..n - 1 {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -2..=2 {
                    for dx in -2..=2 {
                        let (py, px) = (y + dy, x + dx);
                        for ch in 0..c {
                            // Gradients of the averaged pair, temporal difference next − current.
                            let gx = 0.25 * (at(i, py, px + 1, ch) - at(i, py, px - 1, ch) + at(i + 1, py, px + 1, ch) - at(i + 1, py, px - 1, ch));
                            let gy = 0.25 * (at(i, py + 1, px, ch) - at(i, py - 1, px, ch) + at(i + 1, py + 1, px, ch) - at(i + 1, py - 1, px, ch));
                            let gt = at(i + 1, py, px, ch) - at(i, py, px, ch);
                            a11 += gx * gx;
                            a12 += gx * gy;
                            a22 += gy * gy;
                            b1 -= gx * gt;
                            b2 -= gy * gt;
                        }
                    }
                }
                let det = a11 * a22 - a12 * a12;
                let o = ((i * h + y as usize) * w + x as usize) * 2;
                if det.abs() > 1e-9 && (a11 + a22) > 1e-6 {
                    let vx = (a22 * b1 - a12 * b2) / det;
                    let vy = (a11 * b2 - a12 * b1) / det;
                    let mag = (vx * vx + vy * vy).sqrt();
                    let k = if mag > limit { limit / mag } else { 1.0 };
                    out[o] = (vx * k) as f32;
                    out[o + 1] = (vy * k) as f32;
                }
            }
        }
    }
    FlowField::new(n - 1, h, w, out)
}
