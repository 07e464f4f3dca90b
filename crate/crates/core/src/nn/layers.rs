//! Channels-last building blocks. Spatial layers see frames as the batch axis.

use candle_core::{DType, Device, Tensor, D};

use super::ops::{conv_nhwc, ConvNhwc};
use super::params::{Init, ParamSource};
use crate::{Error, Result};

fn join(prefix: &str, name: &str) -> String {
    format!("{prefix}.{name}")
}

/// `k×k` "same" convolution over `(B, H, W, Cin)`.
#[derive(Debug, Clone)]
pub(crate) struct Conv2d {
    w: Tensor,
    b: Tensor,
    spec: ConvNhwc,
}

impl Conv2d {
    pub(crate) fn new(src: &mut dyn ParamSource, name: &str, k: usize, cin: usize, cout: usize, gain: f64) -> Result<Self> {
        let fan_in = k * k * cin;
        let w = src.take(&join(name, "weight"), &[fan_in, cout], Init::Normal { fan_in, gain })?;
        let b = src.take(&join(name, "bias"), &[cout], Init::Zeros)?;
        Ok(Self { w, b, spec: ConvNhwc::same(k, k) })
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(conv_nhwc(x, &self.w, self.spec)?.broadcast_add(&self.b)?)
    }
}

/// Kernel-`k` convolution along the frame axis of a `(B·N, H, W, C)` stack.
#[derive(Debug, Clone)]
pub(crate) struct TemporalConv {
    w: Tensor,
    b: Tensor,
    spec: ConvNhwc,
}

impl TemporalConv {
    pub(crate) fn new(src: &mut dyn ParamSource, name: &str, k: usize, cin: usize, cout: usize, gain: f64) -> Result<Self> {
        let fan_in = k * cin;
        let w = src.take(&join(name, "weight"), &[fan_in, cout], Init::Normal { fan_in, gain })?;
        let b = src.take(&join(name, "bias"), &[cout], Init::Zeros)?;
        Ok(Self { w, b, spec: ConvNhwc { kh: k, kw: 1, ph: k / 2, pw: 0 } })
    }

    pub(crate) fn forward(&self, x: &Tensor, frames: usize) -> Result<Tensor> {
        let (bn, h, w, c) = x.dims4()?;
        if frames == 0 || bn % frames != 0 {
            return Err(Error::invalid(format!("{bn} frames do not split into clips of {frames}")));
        }
        let seq = x.reshape((bn / frames, frames, h * w, c))?;
        let y = conv_nhwc(&seq, &self.w, self.spec)?.broadcast_add(&self.b)?;
        let cout = y.dim(3)?;
        Ok(y.reshape((bn, h, w, cout))?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    pub(crate) fn new(src: &mut dyn ParamSource, name: &str, din: usize, dout: usize, gain: f64) -> Result<Self> {
        let w = src.take(&join(name, "weight"), &[din, dout], Init::Normal { fan_in: din, gain })?;
        let b = src.take(&join(name, "bias"), &[dout], Init::Zeros)?;
        Ok(Self { w, b })
    }

    /// `(B, din) → (B, dout)`.
    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.w)?.broadcast_add(&self.b)?)
    }
}

/// Group normalisation per sample over `(H, W, C/G)`.
#[derive(Debug, Clone)]
pub(crate) struct GroupNorm {
    groups: usize,
    gamma: Tensor,
    beta: Tensor,
}

impl GroupNorm {
    pub(crate) fn new(src: &mut dyn ParamSource, name: &str, groups: usize, channels: usize) -> Result<Self> {
        if !channels.is_multiple_of(groups) {
            return Err(Error::invalid(format!("{channels} channels not divisible into {groups} groups")));
        }
        let gamma = src.take(&join(name, "gamma"), &[channels], Init::Ones)?;
        let beta = src.take(&join(name, "beta"), &[channels], Init::Zeros)?;
        Ok(Self { groups, gamma, beta })
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let g = self.groups;
        let xs = x.reshape((b, h * w, g, c / g))?;
        let mean = xs.mean_keepdim(3)?.mean_keepdim(1)?;
        let centered = xs.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(3)?.mean_keepdim(1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.reshape((b, h, w, c))?.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// 2×2 average pooling.
pub(crate) fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!("cannot pool odd spatial size {h}×{w}")));
    }
    Ok(x.reshape((b * h / 2, 2, w / 2, 2, c))?.sum(3)?.sum(1)?.affine(0.25, 0.0)?.reshape((b, h / 2, w / 2, c))?)
}

/// Nearest-neighbour 2× upsampling.
pub(crate) fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x.reshape((b * h, 1, w, 1, c))?
        .broadcast_as((b * h, 2, w, 2, c))?
        .reshape((b, 2 * h, 2 * w, c))?)
}

/// Sinusoidal embedding of training timesteps, `(len(ts), dim)`.
pub(crate) fn timestep_embedding(ts: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            out.push((t as f64 * freq).sin() as f32);
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            out.push((t as f64 * freq).cos() as f32);
        }
    }
    Ok(Tensor::from_vec(out, (ts.len(), 2 * half), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Log-softmax over the last axis.
pub(crate) fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::InitSource;

    fn t(v: Vec<f32>, dims: &[usize]) -> Tensor {
        Tensor::from_vec(v, dims, &Device::Cpu).unwrap()
    }

    #[test]
    fn pool_and_upsample_shapes_and_values() {
        let x = t((0..16).map(|v| v as f32).collect(), &[1, 4, 4, 1]);
        let p = avg_pool2(&x).unwrap();
        assert_eq!(p.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![2.5, 4.5, 10.5, 12.5]);
        let u = upsample2(&p).unwrap();
        assert_eq!(u.dims(), &[1, 4, 4, 1]);
        let v = u.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(&v[..4], &[2.5, 2.5, 4.5, 4.5]);
        assert_eq!(&v[4..8], &[2.5, 2.5, 4.5, 4.5]);
    }

    #[test]
    fn group_norm_normalises_groups() {
        let mut src = InitSource::new(0);
        let gn = GroupNorm::new(&mut src, "gn", 2, 4).unwrap();
        let x = crate::rng::NoiseStream::new(1).normal(&[2, 3, 3, 4], &Device::Cpu).unwrap();
        let x = x.affine(3.0, 1.0).unwrap();
        let y = gn.forward(&x).unwrap().reshape((2, 9, 2, 2)).unwrap();
        let m = y.mean_keepdim(3).unwrap().mean_keepdim(1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-5));
    }

    #[test]
    fn temporal_conv_mixes_only_frames() {
        let mut src = InitSource::new(0);
        let tc = TemporalConv::new(&mut src, "tc", 3, 1, 1, 1.0).unwrap();
        // An impulse at frame 1, pixel (0,0) only reaches pixel (0,0) of frames 0..=2.
        let mut v = vec![0.0f32; 4 * 2 * 2];
        v[4] = 1.0;
        let y = tc.forward(&t(v, &[4, 2, 2, 1]), 4).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for (i, val) in y.iter().enumerate() {
            if i % 4 != 0 || i / 4 == 3 {
                assert_eq!(*val, 0.0, "index {i}");
            }
        }
        assert!(tc.forward(&t(vec![0.0; 12], &[3, 2, 2, 1]), 4).is_err());
    }

    #[test]
    fn embedding_is_bounded_and_distinct() {
        let e = timestep_embedding(&[0, 20, 120], 64, DType::F32).unwrap();
        let v = e.to_vec2::<f32>().unwrap();
        assert!(v.iter().flatten().all(|x| x.abs() <= 1.0));
        assert_ne!(v[1], v[2]);
    }

    #[test]
    fn log_softmax_normalises() {
        let l = log_softmax(&t(vec![1.0, 2.0, 3.0, 1000.0, 0.0, -1000.0], &[2, 3])).unwrap();
        for row in l.exp().unwrap().to_vec2::<f32>().unwrap() {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }
}
