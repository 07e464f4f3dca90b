//! Noise schedules and the closed-form diffusion algebra.
//!
//! Schedule arithmetic is kept in f64; tensors only see the final scalar
//! coefficients.

use std::sync::Arc;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Everything needed to rebuild the schedules of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub t_train: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub t_ddim: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { t_train: 1000, beta_min: 1e-4, beta_max: 2e-2, t_ddim: 50 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<Arc<RespacedSchedule>> {
        let base = NoiseSchedule::linear(self.t_train, self.beta_min, self.beta_max)?;
        Ok(Arc::new(RespacedSchedule::evenly_spaced(base, self.t_ddim)?))
    }
}

/// β/α/ᾱ tables indexed by training timestep `t ∈ [0, T]`, with `ᾱ₀ = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// β linearly interpolated from `beta_min` at t=1 to `beta_max` at t=T.
    pub fn linear(t_train: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if t_train == 0 {
            return Err(Error::invalid("T_train must be at least 1"));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::invalid(format!(
                "need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
            )));
        }
        let mut betas = vec![0.0; t_train + 1];
        for (t, b) in betas.iter_mut().enumerate().skip(1) {
            *b = if t_train == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * (t - 1) as f64 / (t_train - 1) as f64
            };
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = vec![1.0; t_train + 1];
        for t in 1..=t_train {
            alpha_bars[t] = alpha_bars[t - 1] * alphas[t];
        }
        Ok(Self { betas, alphas, alpha_bars })
    }

    pub fn t_train(&self) -> usize {
        self.betas.len() - 1
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.t_train() {
            return Err(Error::invalid(format!("timestep {t} beyond T_train = {}", self.t_train())));
        }
        Ok(())
    }

    /// β_t for `t ≥ 1`; β₀ is reported as 0.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// DDPM posterior variance β̃_t = β_t(1−ᾱ_{t−1})/(1−ᾱ_t).
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        if t == 0 {
            return Err(Error::invalid("posterior variance undefined at t=0"));
        }
        Ok(self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)))
    }
}

/// What `ddim_sigma_sq` returns at the first respaced step, where
/// `ᾱ_{t_prev} = 1` makes the log diverge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum FirstStepSigma {
    /// Reuse the value of the second respaced step.
    #[default]
    SecondStep,
    Fixed { value: f64 },
}

/// A DDIM sub-sequence of training timesteps, starting at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct RespacedSchedule {
    base: NoiseSchedule,
    steps: Vec<usize>,
}

impl RespacedSchedule {
    /// Steps `{0, T/n, 2T/n, ..., T}` (floored when `n` does not divide `T`).
    pub fn evenly_spaced(base: NoiseSchedule, t_ddim: usize) -> Result<Self> {
        let t = base.t_train();
        if t_ddim == 0 || t_ddim > t {
            return Err(Error::invalid(format!("T_ddim must be in [1, {t}], got {t_ddim}")));
        }
        let steps = (0..=t_ddim).map(|i| i * t / t_ddim).collect();
        Self::from_steps(base, steps)
    }

    pub fn from_steps(base: NoiseSchedule, steps: Vec<usize>) -> Result<Self> {
        if steps.first() != Some(&0) {
            return Err(Error::invalid("respaced steps must start at 0"));
        }
        if steps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("respaced steps must be strictly increasing"));
        }
        if *steps.last().unwrap() > base.t_train() {
            return Err(Error::invalid("respaced steps exceed T_train"));
        }
        Ok(Self { base, steps })
    }

    pub fn base(&self) -> &NoiseSchedule {
        &self.base
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    /// Number of DDIM steps (excluding the 0 entry).
    pub fn t_ddim(&self) -> usize {
        self.steps.len() - 1
    }

    /// Training timestep of respaced index `k`.
    pub fn timestep(&self, k: usize) -> Result<usize> {
        self.steps
            .get(k)
            .copied()
            .ok_or_else(|| Error::invalid(format!("respaced index {k} beyond T_ddim = {}", self.t_ddim())))
    }

    pub fn index_of(&self, t: usize) -> Option<usize> {
        self.steps.binary_search(&t).ok()
    }

    /// The respaced step immediately below `t`.
    pub fn prev(&self, t: usize) -> Result<usize> {
        match self.index_of(t) {
            Some(0) => Err(Error::invalid("no respaced step precedes t=0")),
            Some(k) => Ok(self.steps[k - 1]),
            None => Err(Error::invalid(format!("timestep {t} is not a respaced step"))),
        }
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.base.alpha_bar(t)
    }
}

/// A diffusion-space video `z`, shaped `(N, h, w, c)`.
///
/// The wrapped tensor may carry autodiff history; nothing here detaches it.
#[derive(Debug, Clone)]
pub struct LatentVideo(Tensor);

impl LatentVideo {
    pub fn new(z: Tensor) -> Result<Self> {
        if z.rank() != 4 {
            return Err(Error::invalid(format!("latent must be (N, h, w, c), got {:?}", z.dims())));
        }
        Ok(Self(z))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn frames(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn to_vec(&self) -> Result<Vec<f32>> {
        Ok(self.0.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
    }

    pub fn is_finite(&self) -> Result<bool> {
        Ok(self.to_vec()?.iter().all(|v| v.is_finite()))
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!("{what}: shape {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `a·x + b·y`, evaluated in f64 and rounded once to `x`'s dtype.
pub(crate) fn lin2(x: &Tensor, a: f64, y: &Tensor, b: f64) -> Result<Tensor> {
    let dt = x.dtype();
    let (x, y) = (x.to_dtype(DType::F64)?, y.to_dtype(DType::F64)?);
    Ok((x.affine(a, 0.0)? + y.affine(b, 0.0)?)?.to_dtype(dt)?)
}

/// `z_t = √ᾱ_t·z₀ + √(1−ᾱ_t)·ε`.
pub fn forward_diffuse(z0: &LatentVideo, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<LatentVideo> {
    sched.check(t)?;
    same_shape(z0.tensor(), eps, "forward_diffuse noise")?;
    if t == 0 {
        return Ok(z0.clone());
    }
    let ab = sched.alpha_bar(t);
    LatentVideo::new(lin2(z0.tensor(), ab.sqrt(), eps, (1.0 - ab).sqrt())?)
}

/// Applies `z_s = √(1−β_s)·z_{s−1} + √β_s·ε_s` for `s = 1..t`.
pub fn forward_diffuse_markov(
    z0: &LatentVideo,
    t: usize,
    noise_seq: &[Tensor],
    sched: &NoiseSchedule,
) -> Result<LatentVideo> {
    sched.check(t)?;
    if noise_seq.len() != t {
        return Err(Error::invalid(format!("need {t} noise tensors, got {}", noise_seq.len())));
    }
    let mut z = z0.tensor().clone();
    for (s, eps) in (1..=t).zip(noise_seq) {
        same_shape(&z, eps, "forward_diffuse_markov noise")?;
        z = lin2(&z, sched.alpha(s).sqrt(), eps, sched.beta(s).sqrt())?;
    }
    LatentVideo::new(z)
}

/// `ẑ₀ = (z_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t` for any training timestep.
pub(crate) fn predict_z0_at(z_t: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    same_shape(z_t, eps, "predict_z0 noise")?;
    let inv = 1.0 / alpha_bar.sqrt();
    lin2(z_t, inv, eps, -(1.0 - alpha_bar).sqrt() * inv)
}

/// Predicted clean latent at respaced step `t > 0`.
pub fn predict_z0(z_t: &LatentVideo, eps_hat: &Tensor, t: usize, sched: &RespacedSchedule) -> Result<LatentVideo> {
    if t == 0 {
        return Err(Error::invalid("predict_z0 at t=0: z0 is already known"));
    }
    if sched.index_of(t).is_none() {
        return Err(Error::invalid(format!("timestep {t} is not a respaced step")));
    }
    LatentVideo::new(predict_z0_at(z_t.tensor(), eps_hat, sched.alpha_bar(t))?)
}

/// `σ_t² = log((1−ᾱ_{t_prev})/(1−ᾱ_t))·β_t`, negative; used as a signed guidance scale.
///
/// `β_t` is the training-schedule β at timestep `t`, `t_prev` the previous
/// respaced step. At the first respaced step the default policy substitutes
/// the second step's value.
pub fn ddim_sigma_sq(t: usize, sched: &RespacedSchedule) -> Result<f64> {
    ddim_sigma_sq_with(t, sched, FirstStepSigma::default())
}

pub fn ddim_sigma_sq_with(t: usize, sched: &RespacedSchedule, policy: FirstStepSigma) -> Result<f64> {
    if t == 0 {
        return Err(Error::invalid("ddim_sigma_sq is undefined at t=0"));
    }
    let prev = sched.prev(t)?;
    let ab_prev = sched.alpha_bar(prev);
    if ab_prev >= 1.0 {
        return match policy {
            FirstStepSigma::SecondStep => {
                let second = sched.timestep(2).map_err(|_| {
                    Error::invalid("second-step substitution needs at least two respaced steps")
                })?;
                ddim_sigma_sq_with(second, sched, policy)
            }
            FirstStepSigma::Fixed { value } => Ok(value),
        };
    }
    let ab = sched.alpha_bar(t);
    Ok(((1.0 - ab_prev) / (1.0 - ab)).ln() * sched.base().beta(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::NoiseStream;
    use candle_core::Device;

    fn default_sched() -> Arc<RespacedSchedule> {
        ScheduleConfig::default().build().unwrap()
    }

    fn latent(values: Vec<f32>, dims: (usize, usize, usize, usize)) -> LatentVideo {
        LatentVideo::new(Tensor::from_vec(values, dims, &Device::Cpu).unwrap()).unwrap()
    }

    fn vals(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
    }

    #[test]
    fn schedule_endpoints() {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        assert!((s.beta(1000) - 2e-2).abs() < 1e-15);
    }

    #[test]
    fn alpha_bar_matches_direct_product() {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        // Independent product over freshly interpolated betas.
        let mut prod = 1.0f64;
        for t in 1..=1000 {
            let beta = 1e-4 + (2e-2 - 1e-4) * ((t - 1) as f64 / 999.0);
            prod *= 1.0 - beta;
        }
        assert!(((s.alpha_bar(1000) - prod) / prod).abs() < 1e-12);
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(NoiseSchedule::linear(0, 1e-4, 2e-2).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 2e-2).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn respacing_is_even_and_starts_at_zero() {
        let s = default_sched();
        assert_eq!(s.steps().len(), 51);
        assert_eq!(&s.steps()[..4], &[0, 20, 40, 60]);
        assert_eq!(s.prev(120).unwrap(), 100);
        assert!(s.prev(0).is_err());
        assert!(s.prev(7).is_err());
    }

    #[test]
    fn forward_diffuse_identities() {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        let dims = (2, 2, 2, 1);
        let z0 = latent((0..8).map(|i| i as f32 / 8.0).collect(), dims);
        let eps = Tensor::from_vec((0..8).map(|i| 1.0 - i as f32 / 4.0).collect(), dims, &Device::Cpu).unwrap();
        let same = forward_diffuse(&z0, 0, &eps, &s).unwrap();
        assert_eq!(vals(same.tensor()), vals(z0.tensor()));

        let zero = latent(vec![0.0; 8], dims);
        let out = forward_diffuse(&zero, 300, &eps, &s).unwrap();
        let k = (1.0 - s.alpha_bar(300)).sqrt() as f32;
        for (o, e) in vals(out.tensor()).iter().zip(vals(&eps)) {
            assert!((o - k * e).abs() < 1e-7);
        }
        let bad = Tensor::zeros((2, 2, 2, 2), candle_core::DType::F32, &Device::Cpu).unwrap();
        assert!(forward_diffuse(&z0, 5, &bad, &s).is_err());
    }

    #[test]
    fn markov_chain_deterministic_factors() {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        let dims = (1, 1, 2, 1);
        let z0 = latent(vec![1.0, -2.0], dims);
        let zeros = |n| vec![Tensor::zeros(dims, candle_core::DType::F32, &Device::Cpu).unwrap(); n];
        let one = forward_diffuse_markov(&z0, 1, &zeros(1), &s).unwrap();
        assert!((vals(one.tensor())[0] as f64 - s.alpha(1).sqrt()).abs() < 1e-7);
        let two = forward_diffuse_markov(&z0, 2, &zeros(2), &s).unwrap();
        assert!((vals(two.tensor())[0] as f64 - s.alpha_bar(2).sqrt()).abs() < 1e-7);
        assert!(forward_diffuse_markov(&z0, 2, &zeros(1), &s).is_err());
    }

    #[test]
    fn markov_scale_at_fifty_matches_table() {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        let composed: f64 = (1..=50).map(|t| s.alpha(t).sqrt()).product();
        let want = s.alpha_bar(50).sqrt();
        assert!(((composed - want) / want).abs() < 1e-10);
    }

    #[test]
    fn predict_z0_inverts_forward_diffuse() {
        let sched = default_sched();
        let dims = (2, 4, 4, 1);
        let mut ns = NoiseStream::new(3);
        let z0 = LatentVideo::new(ns.normal(&[2, 4, 4, 1], &Device::Cpu).unwrap()).unwrap();
        let eps = ns.normal(&[2, 4, 4, 1], &Device::Cpu).unwrap();
        for &t in &sched.steps()[1..] {
            let zt = forward_diffuse(&z0, t, &eps, sched.base()).unwrap();
            let back = predict_z0(&zt, &eps, t, &sched).unwrap();
            let err = vals(back.tensor())
                .iter()
                .zip(vals(z0.tensor()))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(err < 1e-5 * (1.0 / sched.alpha_bar(t).sqrt()) as f32 * 10.0, "t={t} err={err}");
        }
        let _ = dims;
    }

    #[test]
    fn predict_z0_examples() {
        let sched = default_sched();
        let zt = latent(vec![0.5, -1.0], (1, 1, 2, 1));
        let zero = Tensor::zeros((1, 1, 2, 1), candle_core::DType::F32, &Device::Cpu).unwrap();
        let out = vals(predict_z0(&zt, &zero, 300, &sched).unwrap().tensor());
        let inv = 1.0 / sched.alpha_bar(300).sqrt();
        assert!((out[0] as f64 - 0.5 * inv).abs() < 1e-6);
        assert!(predict_z0(&zt, &zero, 0, &sched).is_err());
        assert!(predict_z0(&zt, &zero, 301, &sched).is_err());
    }

    #[test]
    fn predict_z0_matches_f64_recomputation() {
        let sched = default_sched();
        let mut ns = NoiseStream::new(17);
        let zt = ns.normal_vec(32);
        let eh = ns.normal_vec(32);
        let dev = Device::Cpu;
        let got = predict_z0(
            &latent(zt.clone(), (2, 4, 4, 1)),
            &Tensor::from_vec(eh.clone(), (2, 4, 4, 1), &dev).unwrap(),
            300,
            &sched,
        )
        .unwrap();
        let ab: f64 = (1..=300).map(|t| 1.0 - (1e-4 + (2e-2 - 1e-4) * (t - 1) as f64 / 999.0)).product();
        for ((g, z), e) in vals(got.tensor()).iter().zip(&zt).zip(&eh) {
            let want = (*z as f64 - (1.0 - ab).sqrt() * *e as f64) / ab.sqrt();
            assert!((*g as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn sigma_sq_is_negative_and_matches_formula() {
        let sched = default_sched();
        for &t in &sched.steps()[1..] {
            assert!(ddim_sigma_sq(t, &sched).unwrap() < 0.0, "t={t}");
            assert!(-4.0 * ddim_sigma_sq(t, &sched).unwrap() > 0.0);
        }
        let ab = |t: usize| -> f64 {
            (1..=t).map(|s| 1.0 - (1e-4 + (2e-2 - 1e-4) * (s - 1) as f64 / 999.0)).product()
        };
        let beta300 = 1e-4 + (2e-2 - 1e-4) * 299.0 / 999.0;
        let want = ((1.0 - ab(280)) / (1.0 - ab(300))).ln() * beta300;
        let got = ddim_sigma_sq(300, &sched).unwrap();
        assert!((got - want).abs() < 1e-10 * want.abs().max(1.0));
    }

    #[test]
    fn sigma_sq_first_step_policy() {
        let sched = default_sched();
        assert_eq!(ddim_sigma_sq(20, &sched).unwrap(), ddim_sigma_sq(40, &sched).unwrap());
        let fixed = ddim_sigma_sq_with(20, &sched, FirstStepSigma::Fixed { value: -0.5 }).unwrap();
        assert_eq!(fixed, -0.5);
        assert!(ddim_sigma_sq(0, &sched).is_err());
    }

    #[test]
    fn closed_form_matches_markov_chain_moments() {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        let dev = Device::Cpu;
        let draws = 10_000usize;
        let t = 10;
        let mut ns = NoiseStream::new(99);
        // One fixed z0 repeated along the frame axis turns 10k draws into one big tensor.
        let base = ns.normal_vec(32);
        let rep: Vec<f32> = (0..draws).flat_map(|_| base.iter().copied()).collect();
        let z0 = latent(rep, (2 * draws, 4, 4, 1));
        let shape = [2 * draws, 4, 4, 1];
        let eps = ns.normal(&shape, &dev).unwrap();
        let closed = vals(forward_diffuse(&z0, t, &eps, &s).unwrap().tensor());
        let seq: Vec<Tensor> = (0..t).map(|_| ns.normal(&shape, &dev).unwrap()).collect();
        let chain = vals(forward_diffuse_markov(&z0, t, &seq, &s).unwrap().tensor());
        let moments = |v: &[f32], e: usize| {
            let xs: Vec<f64> = (0..draws).map(|d| v[d * 32 + e] as f64).collect();
            let m = xs.iter().sum::<f64>() / draws as f64;
            let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (draws - 1) as f64;
            (m, var)
        };
        for e in 0..32 {
            let (ma, va) = moments(&closed, e);
            let (mb, vb) = moments(&chain, e);
            let stderr = ((va + vb) / draws as f64).sqrt();
            assert!((ma - mb).abs() < 4.0 * stderr, "element {e}: {ma} vs {mb}");
            let ratio = va / vb;
            assert!((0.9..=1.1).contains(&ratio), "element {e}: variance ratio {ratio}");
        }
    }

    #[test]
    fn recurrence_identity_holds_everywhere() {
        let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
        for t in 1..=1000 {
            let want = s.alpha(t) * s.alpha_bar(t - 1);
            assert!(((s.alpha_bar(t) - want) / want).abs() < 1e-12);
        }
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.betas()[1..].windows(2).all(|w| w[1] >= w[0]));
    }

    proptest::proptest! {
        #[test]
        fn forward_diffuse_is_linear(a in -3.0f32..3.0, t in 0usize..1000, seed in 0u64..1000) {
            let s = NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap();
            let mut ns = NoiseStream::new(seed);
            let z = ns.normal(&[2, 2, 2, 1], &Device::Cpu).unwrap();
            let e = ns.normal(&[2, 2, 2, 1], &Device::Cpu).unwrap();
            let a64 = a as f64;
            let lhs = forward_diffuse(&LatentVideo::new(z.affine(a64, 0.0).unwrap()).unwrap(), t, &e.affine(a64, 0.0).unwrap(), &s).unwrap();
            let rhs = forward_diffuse(&LatentVideo::new(z).unwrap(), t, &e, &s).unwrap();
            for (l, r) in vals(lhs.tensor()).iter().zip(vals(rhs.tensor())) {
                proptest::prop_assert!((l - a * r).abs() < 1e-5);
            }
        }
    }
}
