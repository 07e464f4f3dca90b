//! Gray-box and adaptive attacks: PGD under ℓ∞/ℓ₂, BPDA, EOT and transfer.

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::{self, clips_to_container};
use crate::guidance::grad_of;
use crate::nn::layers::log_softmax;
use crate::nn::VideoClassifier;
use crate::purify::Purifier;
use crate::rng::{derive_seed, rng_from_seed};
use crate::video::{FlowField, LabeledClip, VideoTensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    #[default]
    Linf,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Ball radius in pixel units.
    pub epsilon: f64,
    /// Defaults to `epsilon / 4`.
    #[serde(default)]
    pub step_size: Option<f64>,
    pub iterations: usize,
    #[serde(default)]
    pub norm: Norm,
    #[serde(default = "one")]
    pub eot_reps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub random_start: bool,
}

fn one() -> usize {
    1
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 4.0 / 255.0,
            step_size: None,
            iterations: 10,
            norm: Norm::Linf,
            eot_reps: 20,
            seed: 0,
            random_start: false,
        }
    }
}

impl AttackConfig {
    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / 4.0)
    }

    /// `epsilon = 0` is accepted as the degenerate no-op attack.
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be finite and non-negative, got {}", self.epsilon)));
        }
        if !(self.step() >= 0.0 && self.step().is_finite()) {
            return Err(Error::Config(format!("bad step size {}", self.step())));
        }
        if self.iterations == 0 {
            return Err(Error::Config("attack needs at least one iteration".into()));
        }
        if self.eot_reps == 0 {
            return Err(Error::Config("eot_reps must be at least 1".into()));
        }
        Ok(())
    }
}

/// A differentiable (or surrogate-differentiable) objective the attacker maximises.
pub trait AttackTarget: Sync {
    /// Loss and `∇_x` loss at `x` for true label `y`; `seed` drives any defense randomness.
    fn loss_and_grad(&self, x: &VideoTensor, flow: Option<&FlowField>, y: usize, seed: u64) -> Result<(f64, VideoTensor)>;

    fn is_deterministic(&self) -> bool;
}

/// `−log(mean_k softmax(f(c_k))[y])` and its gradient with respect to each candidate, summed.
///
/// With a single candidate this is the cross-entropy of the classifier at that input.
pub fn mean_softmax_loss(clf: &VideoClassifier, candidates: &[&VideoTensor], y: usize) -> Result<(f64, VideoTensor)> {
    let first = candidates.first().ok_or_else(|| Error::invalid("no candidates to attack"))?;
    let shape = first.shape();
    let mut data = Vec::with_capacity(shape.len() * candidates.len());
    for c in candidates {
        if c.shape() != shape {
            return Err(Error::invalid("candidates differ in shape"));
        }
        data.extend_from_slice(c.data());
    }
    let k = candidates.len();
    let [n, h, w, ch] = shape.dims();
    let var = Var::from_tensor(&Tensor::from_vec(data, (k * n, h, w, ch), &Device::Cpu)?)?;
    let logits = clf.forward(var.as_tensor(), n)?;
    if y >= logits.dim(1)? {
        return Err(Error::invalid(format!("label {y} out of range")));
    }
    let ly = log_softmax(&logits)?.narrow(1, y, 1)?.squeeze(1)?;
    let m = ly.max_keepdim(D::Minus1)?.detach();
    let lse = ly.broadcast_sub(&m)?.exp()?.sum_keepdim(D::Minus1)?.log()?.add(&m)?;
    let loss = lse.affine(-1.0, (k as f64).ln())?.squeeze(0)?;
    let g = grad_of(&loss, var.as_tensor())?.reshape((k, shape.len()))?.sum(0)?;
    let grad = VideoTensor::new(shape, g.to_dtype(DType::F32)?.to_vec1::<f32>()?)?;
    Ok((loss.to_dtype(DType::F64)?.to_scalar::<f64>()?, grad))
}

/// Attacks the classifier alone.
pub struct GrayBox<'a> {
    pub classifier: &'a VideoClassifier,
}

impl AttackTarget for GrayBox<'_> {
    fn loss_and_grad(&self, x: &VideoTensor, _flow: Option<&FlowField>, y: usize, _seed: u64) -> Result<(f64, VideoTensor)> {
        mean_softmax_loss(self.classifier, &[x], y)
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BpdaMode {
    /// Cross-entropy of the mean softmax over the whole vote list.
    #[default]
    MeanSoftmax,
    /// Only the last (t = 0) candidate.
    FinalCandidate,
}

/// Runs the true defense forward and treats it as the identity on the way back.
pub struct Bpda<'a> {
    pub defense: &'a dyn Purifier,
    pub classifier: &'a VideoClassifier,
    pub mode: BpdaMode,
}

impl AttackTarget for Bpda<'_> {
    fn loss_and_grad(&self, x: &VideoTensor, flow: Option<&FlowField>, y: usize, seed: u64) -> Result<(f64, VideoTensor)> {
        let p = self.defense.purify(x, flow, seed)?;
        let cands: Vec<&VideoTensor> = match self.mode {
            BpdaMode::MeanSoftmax => p.candidates.iter().collect(),
            BpdaMode::FinalCandidate => p.candidates.last().into_iter().collect(),
        };
        mean_softmax_loss(self.classifier, &cands, y)
    }

    fn is_deterministic(&self) -> bool {
        self.defense.is_deterministic()
    }
}

/// Averages loss and gradient of `inner` over `reps` independently seeded evaluations.
pub struct Eot<'a> {
    pub inner: &'a dyn AttackTarget,
    pub reps: usize,
}

impl AttackTarget for Eot<'_> {
    fn loss_and_grad(&self, x: &VideoTensor, flow: Option<&FlowField>, y: usize, seed: u64) -> Result<(f64, VideoTensor)> {
        if self.reps == 0 {
            return Err(Error::invalid("EOT needs at least one repetition"));
        }
        let mut loss = 0f64;
        let mut acc = vec![0f64; x.data().len()];
        for r in 0..self.reps {
            let (l, g) = self.inner.loss_and_grad(x, flow, y, derive_seed(seed, "eot", r as u64))?;
            loss += l;
            for (a, v) in acc.iter_mut().zip(g.data()) {
                *a += *v as f64;
            }
        }
        let n = self.reps as f64;
        let grad = acc.into_iter().map(|a| (a / n) as f32).collect();
        Ok((loss / n, VideoTensor::new(x.shape(), grad)?))
    }

    fn is_deterministic(&self) -> bool {
        self.inner.is_deterministic()
    }
}

/// Result of one PGD run.
#[derive(Debug, Clone)]
pub struct PgdOutcome {
    pub adversarial: VideoTensor,
    /// Loss at the starting point.
    pub initial_loss: f64,
    /// Loss at each iterate, after the corresponding step; filled only when tracking.
    pub losses: Vec<f64>,
}

fn project(v: &mut [f32], x: &[f32], eps: f64, norm: Norm) {
    match norm {
        Norm::Linf => {
            let e = eps as f32;
            for (p, &o) in v.iter_mut().zip(x) {
                *p = p.clamp(o - e, o + e).clamp(0.0, 1.0);
            }
        }
        Norm::L2 => {
            let d: f64 = v.iter().zip(x).map(|(p, o)| ((p - o) as f64).powi(2)).sum::<f64>().sqrt();
            if d > eps {
                let s = eps / d;
                for (p, &o) in v.iter_mut().zip(x) {
                    *p = (o as f64 + (*p - o) as f64 * s) as f32;
                }
            }
            for p in v.iter_mut() {
                *p = p.clamp(0.0, 1.0);
            }
        }
    }
}

/// Checks the iterate against the ball and the unit box.
pub fn in_ball(adv: &VideoTensor, x: &VideoTensor, eps: f64, norm: Norm) -> bool {
    let inside = adv.data().iter().all(|v| (0.0..=1.0).contains(v));
    let d = adv.data().iter().zip(x.data()).map(|(a, b)| (a - b) as f64);
    inside
        && match norm {
            Norm::Linf => d.map(f64::abs).fold(0.0, f64::max) <= eps + 1e-6,
            Norm::L2 => d.map(|v| v * v).sum::<f64>().sqrt() <= eps + 1e-6,
        }
}

fn pgd_inner(
    x: &VideoTensor,
    flow: Option<&FlowField>,
    y: usize,
    target: &dyn AttackTarget,
    cfg: &AttackConfig,
    track: bool,
    mut observe: Option<&mut dyn FnMut(usize, &[f32])>,
) -> Result<PgdOutcome> {
    cfg.validate()?;
    let x0 = crate::video::clamp01(x)?;
    let mut adv = x0.data().to_vec();
    if cfg.random_start {
        let mut rng = rng_from_seed(derive_seed(cfg.seed, "pgd-start", 0));
        match cfg.norm {
            Norm::Linf => {
                for v in adv.iter_mut() {
                    *v += rng.random_range(-cfg.epsilon..=cfg.epsilon) as f32;
                }
            }
            Norm::L2 => {
                let dir: Vec<f64> = (0..adv.len()).map(|_| rng.sample(StandardNormal)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                let r = cfg.epsilon * rng.random::<f64>();
                for (v, d) in adv.iter_mut().zip(&dir) {
                    *v += (d / norm * r) as f32;
                }
            }
        }
        project(&mut adv, x0.data(), cfg.epsilon, cfg.norm);
    }
    let shape = x0.shape();
    let a = cfg.step();
    let mut initial_loss = f64::NAN;
    let mut losses = Vec::new();
    for it in 0..cfg.iterations {
        let cur = VideoTensor::new(shape, adv.clone())?;
        let seed = derive_seed(cfg.seed, "pgd-iter", it as u64);
        let (loss, g) = target
            .loss_and_grad(&cur, flow, y, seed)
            .map_err(|e| Error::Attack { iteration: it, reason: e.to_string() })?;
        if !loss.is_finite() || g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Attack { iteration: it, reason: "non-finite loss or gradient".into() });
        }
        if it == 0 {
            initial_loss = loss;
        } else if track {
            losses.push(loss);
        }
        match cfg.norm {
            Norm::Linf => {
                for (v, gi) in adv.iter_mut().zip(g.data()) {
                    let s = if *gi > 0.0 {
                        1.0
                    } else if *gi < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    *v += (a * s) as f32;
                }
            }
            Norm::L2 => {
                let n = g.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                if n > 0.0 {
                    for (v, gi) in adv.iter_mut().zip(g.data()) {
                        *v += (a * *gi as f64 / n) as f32;
                    }
                }
            }
        }
        project(&mut adv, x0.data(), cfg.epsilon, cfg.norm);
        if let Some(f) = observe.as_deref_mut() {
            f(it, &adv);
        }
    }
    let adversarial = VideoTensor::new(shape, adv)?;
    if track {
        let seed = derive_seed(cfg.seed, "pgd-iter", cfg.iterations as u64);
        let (loss, _) = target
            .loss_and_grad(&adversarial, flow, y, seed)
            .map_err(|e| Error::Attack { iteration: cfg.iterations, reason: e.to_string() })?;
        losses.push(loss);
    }
    Ok(PgdOutcome { adversarial, initial_loss, losses })
}

/// Untargeted PGD: `x ← Π(x + a·sign(∇L))` (ℓ∞) or a normalised-gradient step (ℓ₂), clamped to [0, 1].
pub fn pgd(
    x: &VideoTensor,
    flow: Option<&FlowField>,
    y: usize,
    target: &dyn AttackTarget,
    cfg: &AttackConfig,
) -> Result<VideoTensor> {
    Ok(pgd_inner(x, flow, y, target, cfg, false, None)?.adversarial)
}

/// [`pgd`] calling `observe(iteration, iterate)` after every projected step.
pub fn pgd_observed(
    x: &VideoTensor,
    flow: Option<&FlowField>,
    y: usize,
    target: &dyn AttackTarget,
    cfg: &AttackConfig,
    observe: &mut dyn FnMut(usize, &[f32]),
) -> Result<VideoTensor> {
    Ok(pgd_inner(x, flow, y, target, cfg, false, Some(observe))?.adversarial)
}

/// Attack loss after every PGD iteration (no early stopping).
pub fn adaptive_loss_curve(
    x: &VideoTensor,
    flow: Option<&FlowField>,
    y: usize,
    target: &dyn AttackTarget,
    cfg: &AttackConfig,
) -> Result<PgdOutcome> {
    pgd_inner(x, flow, y, target, cfg, true, None)
}

/// PGD against a surrogate classifier; the output is meant for a different target stack.
pub fn transfer_attack(
    x: &VideoTensor,
    y: usize,
    surrogate: &VideoClassifier,
    cfg: &AttackConfig,
) -> Result<VideoTensor> {
    pgd(x, None, y, &GrayBox { classifier: surrogate }, cfg)
}

/// Writes adversarial clips with the generating config in the container header.
pub fn save_adversarial(clips: &[LabeledClip], cfg: &AttackConfig, target: &str, path: &Path) -> Result<()> {
    let mut c = clips_to_container(clips);
    c.meta = Some(serde_json::json!({ "kind": "adversarial_set", "target": target, "attack": cfg }));
    container::write_container(path, &c)
}

/// Reads clips written by [`save_adversarial`] together with their attack config.
pub fn load_adversarial(path: &Path) -> Result<(Vec<LabeledClip>, AttackConfig)> {
    let c = container::read_container(path)?;
    let cfg = c
        .meta
        .as_ref()
        .and_then(|m| m.get("attack"))
        .cloned()
        .ok_or_else(|| Error::format("header", "no attack config in adversarial set"))?;
    let cfg = serde_json::from_value(cfg).map_err(|e| Error::format("header", e.to_string()))?;
    Ok((container::clips_from_container(&c)?, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ClassifierConfig, Model};
    use crate::purify::{IdentityPurifier, TemporalShuffle};
    use crate::rng::NoiseStream;
    use crate::video::{generate_clip, DatasetManifest, VideoShape};

    fn small() -> (VideoClassifier, LabeledClip) {
        let mut m = DatasetManifest::default();
        m.height = 16;
        m.width = 16;
        m.frames = 4;
        let clf = VideoClassifier::random(&ClassifierConfig { widths: vec![4, 8], ..Default::default() }, 3).unwrap();
        (clf, generate_clip(1, 4, &m).unwrap())
    }

    struct Zero;
    impl AttackTarget for Zero {
        fn loss_and_grad(&self, x: &VideoTensor, _: Option<&FlowField>, _: usize, _: u64) -> Result<(f64, VideoTensor)> {
            Ok((0.0, VideoTensor::filled(x.shape(), 0.0)?))
        }
        fn is_deterministic(&self) -> bool {
            true
        }
    }

    struct Noisy;
    impl AttackTarget for Noisy {
        fn loss_and_grad(&self, x: &VideoTensor, _: Option<&FlowField>, _: usize, seed: u64) -> Result<(f64, VideoTensor)> {
            let g = NoiseStream::new(seed).normal_vec(x.data().len());
            Ok((seed as f64 % 7.0, VideoTensor::new(x.shape(), g)?))
        }
        fn is_deterministic(&self) -> bool {
            false
        }
    }

    #[test]
    fn zero_gradient_leaves_input() {
        let (_, c) = small();
        let adv = pgd(&c.video, None, 0, &Zero, &AttackConfig::default()).unwrap();
        assert_eq!(adv.data(), crate::video::clamp01(&c.video).unwrap().data());
    }

    #[test]
    fn loss_matches_cross_entropy_oracle() {
        let (clf, c) = small();
        let (loss, _) = mean_softmax_loss(&clf, &[&c.video], 2).unwrap();
        let logits = crate::nn::classify(&clf, &c.video).unwrap().0;
        let m = logits.iter().cloned().fold(f32::MIN, f32::max) as f64;
        let lse = m + logits.iter().map(|&l| (l as f64 - m).exp()).sum::<f64>().ln();
        assert!((loss - (lse - logits[2] as f64)).abs() < 1e-5);
    }

    #[test]
    fn mean_softmax_loss_over_candidates() {
        let (clf, c) = small();
        let other = VideoTensor::new(c.video.shape(), c.video.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        let p = |v: &VideoTensor| {
            let l = crate::nn::classify(&clf, v).unwrap().0;
            let z: f64 = l.iter().map(|&x| (x as f64).exp()).sum();
            (l[5] as f64).exp() / z
        };
        let want = -(0.5 * (p(&c.video) + p(&other))).ln();
        let (loss, g) = mean_softmax_loss(&clf, &[&c.video, &other], 5).unwrap();
        assert!((loss - want).abs() < 1e-5);
        // finite-difference check on a couple of coordinates (shared input)
        for &i in &[3usize, 200, 777] {
            let h = 1e-2f32;
            let bump = |d: f32| {
                let mut a = c.video.clone();
                a.data_mut()[i] += d;
                let mut b = other.clone();
                b.data_mut()[i] += d;
                mean_softmax_loss(&clf, &[&a, &b], 5).unwrap().0
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h as f64);
            assert!((fd - g.data()[i] as f64).abs() < 2e-3 + 2e-2 * fd.abs(), "{fd} vs {}", g.data()[i]);
        }
    }

    #[test]
    fn bpda_on_identity_is_gray_box() {
        let (clf, c) = small();
        let cfg = AttackConfig { iterations: 4, ..Default::default() };
        let a = pgd(&c.video, None, 1, &GrayBox { classifier: &clf }, &cfg).unwrap();
        let bp = Bpda { defense: &IdentityPurifier, classifier: &clf, mode: BpdaMode::MeanSoftmax };
        let b = pgd(&c.video, None, 1, &bp, &cfg).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn eot_of_deterministic_target_is_exact() {
        let (clf, c) = small();
        let gb = GrayBox { classifier: &clf };
        let (l1, g1) = gb.loss_and_grad(&c.video, None, 3, 0).unwrap();
        for reps in [1, 3, 20] {
            let (l2, g2) = Eot { inner: &gb, reps }.loss_and_grad(&c.video, None, 3, 9).unwrap();
            assert_eq!(l1, l2);
            assert_eq!(g1.data(), g2.data());
        }
    }

    #[test]
    fn eot_averages_stochastic_evaluations() {
        let x = VideoTensor::filled(VideoShape::new(2, 4, 4, 1), 0.5).unwrap();
        let (l, g) = Eot { inner: &Noisy, reps: 3 }.loss_and_grad(&x, None, 0, 11).unwrap();
        let mut want_l = 0.0;
        let mut want = vec![0f64; 32];
        for r in 0..3 {
            let (li, gi) = Noisy.loss_and_grad(&x, None, 0, derive_seed(11, "eot", r)).unwrap();
            want_l += li / 3.0;
            for (w, v) in want.iter_mut().zip(gi.data()) {
                *w += *v as f64 / 3.0;
            }
        }
        assert!((l - want_l).abs() < 1e-12);
        assert!(g.data().iter().zip(&want).all(|(a, b)| (*a as f64 - b).abs() < 1e-6));
        let single = Eot { inner: &Noisy, reps: 1 }.loss_and_grad(&x, None, 0, 11).unwrap();
        assert_eq!(single.1.data(), Noisy.loss_and_grad(&x, None, 0, derive_seed(11, "eot", 0)).unwrap().1.data());
    }

    #[test]
    fn shuffle_defense_target_is_stochastic() {
        let (clf, _) = small();
        let bp = Bpda { defense: &TemporalShuffle, classifier: &clf, mode: BpdaMode::MeanSoftmax };
        assert!(!bp.is_deterministic());
        assert!(GrayBox { classifier: &clf }.is_deterministic());
    }

    #[test]
    fn loss_curve_has_one_entry_per_iteration() {
        let (clf, c) = small();
        let cfg = AttackConfig { iterations: 5, ..Default::default() };
        let out = adaptive_loss_curve(&c.video, None, 1, &GrayBox { classifier: &clf }, &cfg).unwrap();
        assert_eq!(out.losses.len(), 5);
        assert!(out.initial_loss.is_finite());
        let plain = pgd(&c.video, None, 1, &GrayBox { classifier: &clf }, &cfg).unwrap();
        assert_eq!(plain.data(), out.adversarial.data());
    }

    #[test]
    fn nan_gradient_reports_iteration() {
        struct Bad;
        impl AttackTarget for Bad {
            fn loss_and_grad(&self, x: &VideoTensor, _: Option<&FlowField>, _: usize, _: u64) -> Result<(f64, VideoTensor)> {
                Ok((0.0, VideoTensor::filled(x.shape(), f32::NAN)?))
            }
            fn is_deterministic(&self) -> bool {
                true
            }
        }
        let x = VideoTensor::filled(VideoShape::new(2, 4, 4, 1), 0.5).unwrap();
        match pgd(&x, None, 0, &Bad, &AttackConfig::default()) {
            Err(Error::Attack { iteration: 0, .. }) => {}
            other => panic!("{:?}", other.is_ok()),
        }
    }

    #[test]
    fn adversarial_set_roundtrip() {
        let (_, c) = small();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("adv.vpt");
        let cfg = AttackConfig { seed: 42, ..Default::default() };
        save_adversarial(&[c.clone()], &cfg, "gray_box", &p).unwrap();
        let (clips, back) = load_adversarial(&p).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(clips[0], c);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn iterates_stay_in_ball(seed in 0u64..10_000, l2 in proptest::bool::ANY, eps in 0.001f64..0.5, iters in 1usize..6) {
            let shape = VideoShape::new(2, 4, 4, 1);
            let x = VideoTensor::new(shape, NoiseStream::new(seed).normal_vec(32).into_iter().map(|v| (0.5 + 0.4 * v).clamp(0.0, 1.0)).collect()).unwrap();
            let norm = if l2 { Norm::L2 } else { Norm::Linf };
            let cfg = AttackConfig { epsilon: eps, step_size: Some(eps * 0.7), iterations: iters, norm, seed, random_start: true, ..Default::default() };
            let mut ok = true;
            let adv = pgd_observed(&x, None, 0, &Noisy, &cfg, &mut |_, v| {
                ok &= in_ball(&VideoTensor::new(shape, v.to_vec()).unwrap(), &x, eps, norm);
            }).unwrap();
            proptest::prop_assert!(ok && in_ball(&adv, &x, eps, norm));
        }
    }
}
