//! Baseline defenses: Diffpure variants, plain DDIM inversion, JPEG, wavelet denoising, frame shuffling.

use std::sync::Arc;

use rand::seq::SliceRandom;

use super::{Purified, Purifier};
use crate::diffusion::{forward_diffuse, RespacedSchedule};
use crate::nn::LatentCodec;
use crate::rng::{derive_seed, rng_from_seed, NoiseStream};
use crate::sampler::{run_denoise, run_inversion, EpsilonPredictor, SamplerConfig};
use crate::video::{FlowField, VideoShape, VideoTensor};
use crate::{Error, Result};

/// Returns the input unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityPurifier;

impl Purifier for IdentityPurifier {
    fn name(&self) -> String {
        "none".into()
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn purify(&self, x: &VideoTensor, _flow: Option<&FlowField>, _seed: u64) -> Result<Purified> {
        Ok(Purified::single(x.clone()))
    }
}

/// Shared pieces of the diffusion baselines.
#[derive(Clone)]
pub struct DiffusionParts {
    pub eps: Arc<dyn EpsilonPredictor>,
    pub codec: Arc<LatentCodec>,
    pub sched: Arc<RespacedSchedule>,
}

/// Forward-diffuse with sampled noise to `t_star` training steps, then DDPM back to 0.
pub struct DiffpureDdpm {
    parts: DiffusionParts,
    cfg: SamplerConfig,
}

impl DiffpureDdpm {
    pub fn new(parts: DiffusionParts, t_star: usize) -> Result<Self> {
        let cfg = SamplerConfig::ddpm(t_star, parts.sched.clone());
        cfg.validate()?;
        Ok(Self { parts, cfg })
    }
}

impl Purifier for DiffpureDdpm {
    fn name(&self) -> String {
        "diffpure_ddpm".into()
    }

    fn is_deterministic(&self) -> bool {
        self.cfg.t_star == 0
    }

    fn purify(&self, x: &VideoTensor, _flow: Option<&FlowField>, seed: u64) -> Result<Purified> {
        let z0 = self.parts.codec.encode(x)?;
        let mut fwd = NoiseStream::new(derive_seed(seed, "diffpure-forward", 0));
        let eps = fwd.normal_like(z0.tensor())?;
        let zt = forward_diffuse(&z0, self.cfg.t_star, &eps, self.parts.sched.base())?;
        let mut noise = NoiseStream::new(derive_seed(seed, "diffpure-reverse", 0));
        let z = run_denoise(&zt, &self.cfg, self.parts.eps.as_ref(), None, Some(&mut noise))?;
        Ok(Purified::single(self.parts.codec.decode(&z)?))
    }
}

/// Forward-diffuse with sampled noise to respaced step `t_star`, then DDIM back to 0.
pub struct DiffpureDdim {
    parts: DiffusionParts,
    cfg: SamplerConfig,
}

impl DiffpureDdim {
    pub fn new(parts: DiffusionParts, t_star: usize) -> Result<Self> {
        let cfg = SamplerConfig::ddim(t_star, parts.sched.clone());
        cfg.validate()?;
        Ok(Self { parts, cfg })
    }
}

impl Purifier for DiffpureDdim {
    fn name(&self) -> String {
        "diffpure_ddim".into()
    }

    fn is_deterministic(&self) -> bool {
        self.cfg.t_star == 0
    }

    fn purify(&self, x: &VideoTensor, _flow: Option<&FlowField>, seed: u64) -> Result<Purified> {
        let z0 = self.parts.codec.encode(x)?;
        let mut fwd = NoiseStream::new(derive_seed(seed, "diffpure-forward", 0));
        let eps = fwd.normal_like(z0.tensor())?;
        let zt = forward_diffuse(&z0, self.cfg.start_timestep()?, &eps, self.parts.sched.base())?;
        let z = run_denoise(&zt, &self.cfg, self.parts.eps.as_ref(), None, None)?;
        Ok(Purified::single(self.parts.codec.decode(&z)?))
    }
}

/// Standard (per-frame noise) DDIM inversion followed by plain DDIM denoising.
pub struct DdimInversionBaseline {
    parts: DiffusionParts,
    cfg: SamplerConfig,
}

impl DdimInversionBaseline {
    pub fn new(parts: DiffusionParts, t_star: usize) -> Result<Self> {
        let cfg = SamplerConfig::ddim(t_star, parts.sched.clone());
        cfg.validate()?;
        Ok(Self { parts, cfg })
    }
}

impl Purifier for DdimInversionBaseline {
    fn name(&self) -> String {
        "ddim_inversion".into()
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn purify(&self, x: &VideoTensor, _flow: Option<&FlowField>, _seed: u64) -> Result<Purified> {
        let z0 = self.parts.codec.encode(x)?;
        let zt = run_inversion(&z0, &self.cfg, self.parts.eps.as_ref(), false)?;
        let z = run_denoise(&zt, &self.cfg, self.parts.eps.as_ref(), None, None)?;
        Ok(Purified::single(self.parts.codec.decode(&z)?))
    }
}

const LUMA_Q: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, 12, 12, 14, 19, 26, 58, 60, 55, 14, 13, 16, 24, 40, 57, 69, 56, 14, 17, 22, 29, 51,
    87, 80, 62, 18, 22, 37, 56, 68, 109, 103, 77, 24, 35, 55, 64, 81, 104, 113, 92, 49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
];

fn quant_table(quality: u8) -> [f64; 64] {
    let q = quality.clamp(1, 100) as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut t = [0.0; 64];
    for (o, &b) in t.iter_mut().zip(&LUMA_Q) {
        *o = ((b as u32 * scale + 50) / 100).clamp(1, 255) as f64;
    }
    t
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for (u, row) in c.iter_mut().enumerate() {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * (((2 * x + 1) * u) as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    c
}

/// Per-frame, per-channel 8×8 DCT quantisation with the scaled luminance table.
///
/// Pixels are rounded to 8-bit levels on the way in and out; edge blocks are padded by replication.
pub fn jpeg_compress(x: &VideoTensor, quality: u8) -> Result<VideoTensor> {
    if !(1..=100).contains(&quality) {
        return Err(Error::invalid(format!("JPEG quality {quality} outside 1..=100")));
    }
    let VideoShape { frames, height: h, width: w, channels: c } = x.shape();
    let q = quant_table(quality);
    let basis = dct_basis();
    let src = x.data();
    let mut out = vec![0f32; src.len()];
    let at = |f: usize, y: usize, xx: usize, ch: usize| ((f * h + y) * w + xx) * c + ch;
    for f in 0..frames {
        for ch in 0..c {
            for by in (0..h).step_by(8) {
                for bx in (0..w).step_by(8) {
                    let mut block = [[0f64; 8]; 8];
                    for (i, row) in block.iter_mut().enumerate() {
                        for (j, v) in row.iter_mut().enumerate() {
                            let p = src[at(f, (by + i).min(h - 1), (bx + j).min(w - 1), ch)] as f64;
                            *v = (p.clamp(0.0, 1.0) * 255.0).round() - 128.0;
                        }
                    }
                    let mut coef = [[0f64; 8]; 8];
                    for u in 0..8 {
                        for v in 0..8 {
                            let mut s = 0.0;
                            for i in 0..8 {
                                for j in 0..8 {
                                    s += basis[u][i] * basis[v][j] * block[i][j];
                                }
                            }
                            let qq = q[u * 8 + v];
                            coef[u][v] = (s / qq).round() * qq;
                        }
                    }
                    for i in 0..8 {
                        for j in 0..8 {
                            if by + i >= h || bx + j >= w {
                                continue;
                            }
                            let mut s = 0.0;
                            for u in 0..8 {
                                for v in 0..8 {
                                    s += basis[u][i] * basis[v][j] * coef[u][v];
                                }
                            }
                            out[at(f, by + i, bx + j, ch)] = ((s + 128.0).round().clamp(0.0, 255.0) / 255.0) as f32;
                        }
                    }
                }
            }
        }
    }
    VideoTensor::new(x.shape(), out)
}

#[derive(Debug, Clone, Copy)]
pub struct Jpeg {
    pub quality: u8,
}

impl Default for Jpeg {
    fn default() -> Self {
        Self { quality: 75 }
    }
}

impl Purifier for Jpeg {
    fn name(&self) -> String {
        "jpeg".into()
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn purify(&self, x: &VideoTensor, _flow: Option<&FlowField>, _seed: u64) -> Result<Purified> {
        Ok(Purified::single(jpeg_compress(x, self.quality)?))
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Single-level orthonormal Haar transform per frame and channel with universal soft thresholding.
///
/// `σ̂` pools the three detail bands of a frame; `n` is the frame's pixel count.
pub fn haar_soft_threshold(x: &VideoTensor) -> Result<VideoTensor> {
    let VideoShape { frames, height: h, width: w, channels: c } = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!("Haar transform needs even frame size, got {h}×{w}")));
    }
    let src = x.data();
    let mut out = vec![0f32; src.len()];
    let at = |f: usize, y: usize, xx: usize, ch: usize| ((f * h + y) * w + xx) * c + ch;
    let (hh, hw) = (h / 2, w / 2);
    let tau_scale = (2.0 * ((h * w) as f64).ln()).sqrt();
    for f in 0..frames {
        for ch in 0..c {
            // (approx, horizontal, vertical, diagonal) per 2×2 cell
            let mut bands = vec![[0f64; 4]; hh * hw];
            for i in 0..hh {
                for j in 0..hw {
                    let p = |di: usize, dj: usize| src[at(f, 2 * i + di, 2 * j + dj, ch)] as f64;
                    let (a, b, cc, d) = (p(0, 0), p(0, 1), p(1, 0), p(1, 1));
                    bands[i * hw + j] = [(a + b + cc + d) / 2.0, (a - b + cc - d) / 2.0, (a + b - cc - d) / 2.0, (a - b - cc + d) / 2.0];
                }
            }
            let mut details: Vec<f64> = bands.iter().flat_map(|q| q[1..].iter().map(|v| v.abs())).collect();
            let tau = median(&mut details) / 0.6745 * tau_scale;
            for i in 0..hh {
                for j in 0..hw {
                    let mut q = bands[i * hw + j];
                    for v in &mut q[1..] {
                        *v = v.signum() * (v.abs() - tau).max(0.0);
                    }
                    let [s, hz, vt, dg] = q;
                    out[at(f, 2 * i, 2 * j, ch)] = ((s + hz + vt + dg) / 2.0) as f32;
                    out[at(f, 2 * i, 2 * j + 1, ch)] = ((s - hz + vt - dg) / 2.0) as f32;
                    out[at(f, 2 * i + 1, 2 * j, ch)] = ((s + hz - vt - dg) / 2.0) as f32;
                    out[at(f, 2 * i + 1, 2 * j + 1, ch)] = ((s - hz - vt + dg) / 2.0) as f32;
                }
            }
        }
    }
    VideoTensor::new(x.shape(), out)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WaveletDenoise;

impl Purifier for WaveletDenoise {
    fn name(&self) -> String {
        "wavelet".into()
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn purify(&self, x: &VideoTensor, _flow: Option<&FlowField>, _seed: u64) -> Result<Purified> {
        Ok(Purified::single(haar_soft_threshold(x)?))
    }
}

/// Applies a seeded uniform permutation to the frame axis.
#[derive(Debug, Clone, Copy, Default)]
pub struct TemporalShuffle;

impl TemporalShuffle {
    pub fn permutation(frames: usize, seed: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..frames).collect();
        order.shuffle(&mut rng_from_seed(derive_seed(seed, "temporal-shuffle", 0)));
        order
    }
}

impl Purifier for TemporalShuffle {
    fn name(&self) -> String {
        "temporal_shuffle".into()
    }

    fn is_deterministic(&self) -> bool {
        false
    }

    fn purify(&self, x: &VideoTensor, _flow: Option<&FlowField>, seed: u64) -> Result<Purified> {
        let order = Self::permutation(x.shape().frames, seed);
        Ok(Purified::single(x.reorder_frames(&order)?))
    }
}
