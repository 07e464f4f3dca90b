//! The ε-prediction video UNet, the spatiotemporal classifier and the latent codecs.

use std::path::Path;

use candle_core::{DType, Tensor, Var};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::layers::{avg_pool2, timestep_embedding, upsample2, Conv2d, GroupNorm, Linear, TemporalConv};
use super::params::{load_checkpoint, save_checkpoint, Init, InitSource, LoadSource, ParamSource, ParamTable};
use crate::diffusion::LatentVideo;
use crate::sampler::EpsilonPredictor;
use crate::video::{VideoShape, VideoTensor};
use crate::{Error, Result};

/// Records every tensor handed out so the built model owns its parameter table.
struct Recorder<'a> {
    inner: &'a mut dyn ParamSource,
    table: ParamTable,
}

impl<'a> Recorder<'a> {
    fn new(inner: &'a mut dyn ParamSource) -> Self {
        Self { inner, table: ParamTable::default() }
    }
}

impl ParamSource for Recorder<'_> {
    fn take(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.table.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        let t = self.inner.take(name, shape, init)?;
        self.table.entries.push((name.to_string(), t.clone()));
        Ok(t)
    }
}

/// Shared plumbing for every trainable network: build, freeze, cast, persist.
pub trait Model: Sized {
    type Config: Serialize + DeserializeOwned + Clone;
    const KIND: &'static str;

    /// Builds the architecture, drawing every parameter from `src`.
    #[doc(hidden)]
    fn layers(cfg: &Self::Config, src: &mut dyn ParamSource) -> Result<Self>;

    fn config(&self) -> &Self::Config;
    fn params(&self) -> &ParamTable;

    /// Freshly initialised, frozen weights.
    fn random(cfg: &Self::Config, seed: u64) -> Result<Self> {
        trainable::<Self>(cfg, seed)?.0.freeze()
    }

    /// A copy whose parameters no longer track gradients.
    fn freeze(&self) -> Result<Self> {
        self.to_dtype(DType::F32)
    }

    fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut src = LoadSource::new(self.params().detached(dtype)?, dtype);
        let m = Self::layers(self.config(), &mut src)?;
        src.finish()?;
        Ok(m)
    }

    fn save<R: Serialize>(&self, path: &Path, sidecar: &R) -> Result<()> {
        save_checkpoint(path, Self::KIND, self.config(), self.params(), sidecar)
    }

    /// Loads a checkpoint, validating its parameter table against the architecture.
    fn load(path: &Path) -> Result<Self> {
        let (cfg, map) = load_checkpoint::<Self::Config>(path, Self::KIND)?;
        let mut src = LoadSource::new(map, DType::F32);
        let m = Self::layers(&cfg, &mut src)?;
        src.finish()?;
        Ok(m)
    }
}

/// Trainable instance plus its variables, in table order.
pub(crate) fn trainable<M: Model>(cfg: &M::Config, seed: u64) -> Result<(M, Vec<Var>)> {
    let mut src = InitSource::new(seed);
    let m = M::layers(cfg, &mut src)?;
    Ok((m, src.vars.into_iter().map(|(_, v)| v).collect()))
}

macro_rules! table_builder {
    ($name:ident) => {
        fn layers(cfg: &Self::Config, src: &mut dyn ParamSource) -> Result<Self> {
            let mut rec = Recorder::new(src);
            let mut m = $name::build(cfg, &mut rec)?;
            m.params = rec.table;
            Ok(m)
        }

        fn config(&self) -> &Self::Config {
            &self.cfg
        }

        fn params(&self) -> &ParamTable {
            &self.params
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpsilonModelConfig {
    /// Latent channels `c`.
    pub channels: usize,
    pub base_width: usize,
    pub emb_dim: usize,
    pub groups: usize,
}

impl Default for EpsilonModelConfig {
    fn default() -> Self {
        Self { channels: 1, base_width: 32, emb_dim: 64, groups: 8 }
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv: Conv2d,
    emb: Linear,
    norm: GroupNorm,
}

impl ResBlock {
    fn new(src: &mut dyn ParamSource, name: &str, cin: usize, cout: usize, emb_width: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(src, &format!("{name}.conv"), 3, cin, cout, 2f64.sqrt())?,
            emb: Linear::new(src, &format!("{name}.emb"), emb_width, cout, 1.0)?,
            norm: GroupNorm::new(src, &format!("{name}.norm"), groups, cout)?,
        })
    }

    /// `emb` is per frame, `(B·N, E)`.
    fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let e = self.emb.forward(emb)?;
        let (b, c) = e.dims2()?;
        let h = self.conv.forward(x)?.broadcast_add(&e.reshape((b, 1, 1, c))?)?;
        Ok(self.norm.forward(&h)?.silu()?)
    }
}

/// Small two-resolution UNet over frames with one temporal mixing layer at the bottleneck.
#[derive(Debug, Clone)]
pub struct EpsilonModel {
    cfg: EpsilonModelConfig,
    params: ParamTable,
    embed: Linear,
    in_conv: Conv2d,
    block1: ResBlock,
    block2: ResBlock,
    temporal: TemporalConv,
    block3: ResBlock,
    up_conv: Conv2d,
    block4: ResBlock,
    out_conv: Conv2d,
}

impl EpsilonModel {
    fn build(cfg: &EpsilonModelConfig, src: &mut dyn ParamSource) -> Result<Self> {
        let (w, e, g) = (cfg.base_width, cfg.emb_dim, cfg.groups);
        if cfg.channels == 0 || w == 0 || e < 2 {
            return Err(Error::invalid("epsilon model needs channels, width and an embedding"));
        }
        let ew = 2 * e;
        Ok(Self {
            cfg: *cfg,
            params: ParamTable::default(),
            embed: Linear::new(src, "embed", e, ew, 1.0)?,
            in_conv: Conv2d::new(src, "in_conv", 3, cfg.channels, w, 1.0)?,
            block1: ResBlock::new(src, "block1", w, w, ew, g)?,
            block2: ResBlock::new(src, "block2", w, 2 * w, ew, g)?,
            temporal: TemporalConv::new(src, "temporal", 3, 2 * w, 2 * w, 1.0)?,
            block3: ResBlock::new(src, "block3", 2 * w, 2 * w, ew, g)?,
            up_conv: Conv2d::new(src, "up_conv", 3, 2 * w, w, 1.0)?,
            block4: ResBlock::new(src, "block4", w, w, ew, g)?,
            out_conv: Conv2d::new(src, "out_conv", 3, w, cfg.channels, 0.1)?,
        })
    }

    /// `z` is `(B·N, h, w, c)` holding `B` clips of `frames` frames; `ts` has one timestep per clip.
    pub fn forward(&self, z: &Tensor, frames: usize, ts: &[usize]) -> Result<Tensor> {
        let (bn, h, w, c) = z.dims4()?;
        if c != self.cfg.channels {
            return Err(Error::invalid(format!("epsilon model expects {} channels, got {c}", self.cfg.channels)));
        }
        if frames == 0 || bn != frames * ts.len() {
            return Err(Error::invalid(format!("{bn} frames vs {} clips of {frames}", ts.len())));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid("epsilon model needs even spatial size"));
        }
        let emb = timestep_embedding(ts, self.cfg.emb_dim, z.dtype())?;
        let emb = self.embed.forward(&emb)?.silu()?;
        let ew = emb.dim(1)?;
        let emb = emb.reshape((ts.len(), 1, ew))?.broadcast_as((ts.len(), frames, ew))?.reshape((bn, ew))?;

        let h0 = self.in_conv.forward(z)?;
        let h1 = (self.block1.forward(&h0, &emb)? + &h0)?;
        let h2 = self.block2.forward(&avg_pool2(&h1)?, &emb)?;
        let h2 = (self.temporal.forward(&h2, frames)?.silu()? + &h2)?;
        let h3 = (self.block3.forward(&h2, &emb)? + &h2)?;
        let u = (upsample2(&self.up_conv.forward(&h3)?)? + &h1)?;
        let h4 = self.block4.forward(&u, &emb)?;
        self.out_conv.forward(&h4)
    }
}

impl Model for EpsilonModel {
    type Config = EpsilonModelConfig;
    const KIND: &'static str = "epsilon_model";
    table_builder!(EpsilonModel);
}

impl EpsilonPredictor for EpsilonModel {
    fn predict(&self, z_t: &Tensor, t: usize) -> Result<Tensor> {
        let frames = z_t.dim(0)?;
        self.forward(z_t, frames, &[t])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub channels: usize,
    pub classes: usize,
    pub widths: Vec<usize>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { channels: 1, classes: 8, widths: vec![16, 32, 32] }
    }
}

#[derive(Debug, Clone)]
struct ClassifierBlock {
    spatial: Conv2d,
    temporal: TemporalConv,
}

/// Blocks of (spatial conv → temporal conv → pool), global average pool, linear head.
#[derive(Debug, Clone)]
pub struct VideoClassifier {
    cfg: ClassifierConfig,
    params: ParamTable,
    blocks: Vec<ClassifierBlock>,
    head: Linear,
}

impl VideoClassifier {
    fn build(cfg: &ClassifierConfig, src: &mut dyn ParamSource) -> Result<Self> {
        if cfg.classes < 2 || cfg.widths.is_empty() || cfg.channels == 0 {
            return Err(Error::invalid("classifier needs ≥2 classes, ≥1 block and ≥1 channel"));
        }
        let mut blocks = Vec::new();
        let mut cin = cfg.channels;
        for (i, &w) in cfg.widths.iter().enumerate() {
            blocks.push(ClassifierBlock {
                spatial: Conv2d::new(src, &format!("block{i}.spatial"), 3, cin, w, 2f64.sqrt())?,
                temporal: TemporalConv::new(src, &format!("block{i}.temporal"), 3, w, w, 2f64.sqrt())?,
            });
            cin = w;
        }
        let head = Linear::new(src, "head", cin, cfg.classes, 1.0)?;
        Ok(Self { cfg: cfg.clone(), params: ParamTable::default(), blocks, head })
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.classes
    }

    /// `x` is `(B·N, H, W, C)` in `[0, 1]`; returns `(B, K)` logits.
    pub fn forward(&self, x: &Tensor, frames: usize) -> Result<Tensor> {
        let (bn, _, _, c) = x.dims4()?;
        if c != self.cfg.channels {
            return Err(Error::invalid(format!("classifier expects {} channels, got {c}", self.cfg.channels)));
        }
        if frames == 0 || bn % frames != 0 {
            return Err(Error::invalid(format!("{bn} frames do not split into clips of {frames}")));
        }
        let mut h = x.affine(1.0, -0.5)?;
        for b in &self.blocks {
            h = b.spatial.forward(&h)?.relu()?;
            h = b.temporal.forward(&h, frames)?.relu()?;
            h = avg_pool2(&h)?;
        }
        let (_, hh, ww, cc) = h.dims4()?;
        let pooled = h.reshape((bn / frames, frames * hh * ww, cc))?.mean(1)?;
        self.head.forward(&pooled)
    }

    /// Logits of a single clip given as an `(N, H, W, C)` tensor, shape `(K,)`.
    pub fn logits(&self, video: &Tensor) -> Result<Tensor> {
        let frames = video.dim(0)?;
        Ok(self.forward(video, frames)?.squeeze(0)?)
    }
}

impl Model for VideoClassifier {
    type Config = ClassifierConfig;
    const KIND: &'static str = "video_classifier";
    table_builder!(VideoClassifier);
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> Result<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite logit at index {i}")));
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i).ok_or_else(|| Error::invalid("argmax of an empty vector"))
}

/// Logits and predicted class of one clip.
pub fn classify(model: &VideoClassifier, x: &VideoTensor) -> Result<(Vec<f32>, usize)> {
    if x.shape().channels != model.cfg.channels {
        return Err(Error::invalid(format!(
            "clip has {} channels, classifier expects {}",
            x.shape().channels,
            model.cfg.channels
        )));
    }
    let logits = model.logits(&x.to_tensor(&candle_core::Device::Cpu)?)?.to_vec1::<f32>()?;
    let class = argmax(&logits)?;
    Ok((logits, class))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub channels: usize,
    pub latent_channels: usize,
    pub widths: [usize; 2],
    /// Multiplier applied to encoder outputs so latents have roughly unit scale.
    pub scale: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self { channels: 1, latent_channels: 4, widths: [16, 32], scale: 1.0 }
    }
}

/// Stride-4 convolutional autoencoder (two pool/upsample stages).
#[derive(Debug, Clone)]
pub struct Autoencoder {
    cfg: AutoencoderConfig,
    params: ParamTable,
    enc: [Conv2d; 3],
    dec: [Conv2d; 3],
}

impl Autoencoder {
    fn build(cfg: &AutoencoderConfig, src: &mut dyn ParamSource) -> Result<Self> {
        let [a, b] = cfg.widths;
        let (c, l) = (cfg.channels, cfg.latent_channels);
        let g = 2f64.sqrt();
        Ok(Self {
            cfg: cfg.clone(),
            params: ParamTable::default(),
            enc: [
                Conv2d::new(src, "enc0", 3, c, a, g)?,
                Conv2d::new(src, "enc1", 3, a, b, g)?,
                Conv2d::new(src, "enc2", 3, b, l, 1.0)?,
            ],
            dec: [
                Conv2d::new(src, "dec0", 3, l, b, g)?,
                Conv2d::new(src, "dec1", 3, b, a, g)?,
                Conv2d::new(src, "dec2", 3, a, c, 1.0)?,
            ],
        })
    }

    /// Same model with a different latent scale.
    pub fn with_scale(&self, scale: f64) -> Result<Self> {
        let mut cfg = self.cfg.clone();
        cfg.scale = scale;
        let mut src = LoadSource::new(self.params.detached(DType::F32)?, DType::F32);
        let m = <Self as Model>::layers(&cfg, &mut src)?;
        src.finish()?;
        Ok(m)
    }

    pub(crate) fn encode_raw(&self, x: &Tensor) -> Result<Tensor> {
        let h = avg_pool2(&self.enc[0].forward(&x.affine(1.0, -0.5)?)?.silu()?)?;
        let h = avg_pool2(&self.enc[1].forward(&h)?.silu()?)?;
        self.enc[2].forward(&h)
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.encode_raw(x)?.affine(self.cfg.scale, 0.0)?)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let h = z.affine(1.0 / self.cfg.scale, 0.0)?;
        let h = upsample2(&self.dec[0].forward(&h)?.silu()?)?;
        let h = upsample2(&self.dec[1].forward(&h)?.silu()?)?;
        Ok(self.dec[2].forward(&h)?.affine(1.0, 0.5)?)
    }
}

impl Model for Autoencoder {
    type Config = AutoencoderConfig;
    const KIND: &'static str = "autoencoder";
    table_builder!(Autoencoder);
}

/// `ℰ`/`𝒟` between pixel videos and diffusion latents.
#[derive(Debug, Clone, Default)]
pub enum LatentCodec {
    #[default]
    Identity,
    Autoencoder(Box<Autoencoder>),
}

impl LatentCodec {
    pub fn name(&self) -> &'static str {
        match self {
            LatentCodec::Identity => "identity",
            LatentCodec::Autoencoder(_) => "autoencoder",
        }
    }

    /// Spatial downsampling factor between pixels and latents.
    pub fn ratio(&self) -> usize {
        match self {
            LatentCodec::Identity => 1,
            LatentCodec::Autoencoder(_) => 4,
        }
    }

    pub fn latent_channels(&self, pixel_channels: usize) -> usize {
        match self {
            LatentCodec::Identity => pixel_channels,
            LatentCodec::Autoencoder(ae) => ae.cfg.latent_channels,
        }
    }

    /// Differentiable encode of an `(N, H, W, C)` tensor.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            LatentCodec::Identity => Ok(x.clone()),
            LatentCodec::Autoencoder(ae) => ae.encode(x),
        }
    }

    /// Differentiable decode, without clamping.
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        match self {
            LatentCodec::Identity => Ok(z.clone()),
            LatentCodec::Autoencoder(ae) => ae.decode(z),
        }
    }

    pub fn encode(&self, x: &VideoTensor) -> Result<LatentVideo> {
        LatentVideo::new(self.encode_tensor(&x.to_tensor(&candle_core::Device::Cpu)?)?)
    }

    /// Decodes and clamps into `[0, 1]`.
    pub fn decode(&self, z: &LatentVideo) -> Result<VideoTensor> {
        let x = self.decode_tensor(&z.tensor().detach())?.to_dtype(DType::F32)?;
        let (n, h, w, c) = x.dims4()?;
        let v = VideoTensor::new(VideoShape::new(n, h, w, c), x.flatten_all()?.to_vec1::<f32>()?)?;
        crate::video::clamp01(&v)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(match self {
            LatentCodec::Identity => LatentCodec::Identity,
            LatentCodec::Autoencoder(ae) => LatentCodec::Autoencoder(Box::new(ae.to_dtype(dtype)?)),
        })
    }
}
