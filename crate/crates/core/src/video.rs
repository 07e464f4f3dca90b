//! Video clips, ground-truth flow and the synthetic moving-texture dataset.
//!
//! Every clip shows one procedurally generated texture (a smooth background
//! plus soft-edged disks and polygons) undergoing a global motion. The motion
//! alone determines the label: frame 0 depends only on the seed, so two clips
//! with the same seed and different classes start identical.

use std::f64::consts::PI;

use candle_core::{Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{derive_seed, rng_from_seed};
use crate::{Error, Result};

/// `N×H×W×C` extent of a clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VideoShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl VideoShape {
    pub fn new(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Self { frames, height, width, channels }
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn len(&self) -> usize {
        self.frames * self.frame_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }
}

/// A pixel-space clip stored frame-major, channels last.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    shape: VideoShape,
    data: Vec<f32>,
}

impl VideoTensor {
    pub fn new(shape: VideoShape, data: Vec<f32>) -> Result<Self> {
        if shape.frames < 2 {
            return Err(Error::invalid(format!(
                "a video needs at least 2 frames, got {}",
                shape.frames
            )));
        }
        if shape.height == 0 || shape.width == 0 || shape.channels == 0 {
            return Err(Error::invalid(format!("degenerate video shape {shape:?}")));
        }
        if data.len() != shape.len() {
            return Err(Error::invalid(format!(
                "video data has {} values, shape {:?} needs {}",
                data.len(),
                shape,
                shape.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: VideoShape, value: f32) -> Result<Self> {
        Self::new(shape, vec![value; shape.len()])
    }

    pub fn shape(&self) -> VideoShape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let n = self.shape.frame_len();
        &self.data[i * n..(i + 1) * n]
    }

    /// Copies the clip into an `(N, H, W, C)` f32 tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), self.shape.dims().to_vec(), device)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (n, h, w, c) = t.dims4()?;
        let data = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(VideoShape::new(n, h, w, c), data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &VideoTensor) -> f32 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }

    pub fn mean_abs_diff(&self, other: &VideoTensor) -> f64 {
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs() as f64).sum();
        s / self.data.len() as f64
    }

    /// Frame `i` of the result is frame `order[i]` of `self`.
    pub fn reorder_frames(&self, order: &[usize]) -> Result<Self> {
        if order.len() != self.shape.frames {
            return Err(Error::invalid("frame order length must equal frame count"));
        }
        let mut data = Vec::with_capacity(self.data.len());
        for &src in order {
            if src >= self.shape.frames {
                return Err(Error::invalid(format!("frame index {src} out of range")));
            }
            data.extend_from_slice(self.frame(src));
        }
        Self::new(self.shape, data)
    }
}

/// Element-wise `min(max(v, 0), 1)`.
pub fn clamp01(video: &VideoTensor) -> Result<VideoTensor> {
    if let Some(pos) = video.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite value at flat index {pos}")));
    }
    let data = video.data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    VideoTensor::new(video.shape, data)
}

/// Per-frame-pair displacement field, `(N−1)×H×W×2` in pixels, ordered `(dx, dy)`.
///
/// Entry `i` maps frame `i`'s pixel grid toward frame `i+1`:
/// `frame[i+1](p + flow[i](p)) ≈ frame[i](p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pairs: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FlowField {
    pub fn new(pairs: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != pairs * height * width * 2 {
            return Err(Error::invalid(format!(
                "flow data has {} values, expected {}",
                data.len(),
                pairs * height * width * 2
            )));
        }
        let bound = height.max(width) as f32;
        for (i, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("non-finite flow at flat index {i}")));
            }
            if v.abs() > bound {
                return Err(Error::invalid(format!(
                    "flow component {v} at flat index {i} exceeds max(H, W) = {bound}"
                )));
            }
        }
        Ok(Self { pairs, height, width, data })
    }

    pub fn zeros(pairs: usize, height: usize, width: usize) -> Self {
        Self { pairs, height, width, data: vec![0.0; pairs * height * width * 2] }
    }

    pub fn pairs(&self) -> usize {
        self.pairs
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// The `H×W×2` field for pair `i`.
    pub fn pair(&self, i: usize) -> &[f32] {
        let n = self.height * self.width * 2;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn at(&self, i: usize, y: usize, x: usize) -> (f32, f32) {
        let o = ((i * self.height + y) * self.width + x) * 2;
        (self.data[o], self.data[o + 1])
    }

    /// Average-pools by `factor` and rescales the displacements to the coarser grid.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(Error::invalid(format!(
                "cannot downsample {}x{} flow by {factor}",
                self.height, self.width
            )));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let norm = (factor * factor) as f32 * factor as f32;
        let mut data = vec![0.0f32; self.pairs * h * w * 2];
        for i in 0..self.pairs {
            for y in 0..self.height {
                for x in 0..self.width {
                    let (dx, dy) = self.at(i, y, x);
                    let o = ((i * h + y / factor) * w + x / factor) * 2;
                    data[o] += dx / norm;
                    data[o + 1] += dy / norm;
                }
            }
        }
        Self::new(self.pairs, h, w, data)
    }
}

/// A generated training/evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub clip_id: String,
    pub label: usize,
    pub video: VideoTensor,
    pub flow: FlowField,
}

impl LabeledClip {
    pub fn new(clip_id: String, label: usize, video: VideoTensor, flow: FlowField) -> Result<Self> {
        let s = video.shape();
        if flow.pairs() != s.frames - 1 || flow.height() != s.height || flow.width() != s.width {
            return Err(Error::invalid(format!(
                "flow shape ({}, {}, {}) does not match video {:?}",
                flow.pairs(),
                flow.height(),
                flow.width(),
                s
            )));
        }
        if clip_id.is_empty() || clip_id.contains('/') {
            return Err(Error::invalid(format!("bad clip id {clip_id:?}")));
        }
        Ok(Self { clip_id, label, video, flow })
    }
}

/// Global motion applied to the texture between consecutive frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Motion {
    /// Constant displacement in pixels per frame.
    Translate { dx: f64, dy: f64 },
    /// Rotation about the frame centre; positive is clockwise on screen (y points down).
    Rotate { radians_per_frame: f64 },
    /// Isotropic zoom about the frame centre.
    Scale { factor_per_frame: f64 },
}

impl Motion {
    /// Maps frame-`i` pixel coordinates back to texture coordinates.
    fn to_texture(&self, i: usize, p: (f64, f64), c: (f64, f64)) -> (f64, f64) {
        let fi = i as f64;
        match *self {
            Motion::Translate { dx, dy } => (p.0 - fi * dx, p.1 - fi * dy),
            Motion::Rotate { radians_per_frame } => rotate(p, c, -fi * radians_per_frame),
            Motion::Scale { factor_per_frame } => {
                let s = factor_per_frame.powf(fi);
                (c.0 + (p.0 - c.0) / s, c.1 + (p.1 - c.1) / s)
            }
        }
    }

    /// Displacement carrying pixel `p` of frame `i` to its position in frame `i+1`.
    fn flow(&self, p: (f64, f64), c: (f64, f64)) -> (f64, f64) {
        match *self {
            Motion::Translate { dx, dy } => (dx, dy),
            Motion::Rotate { radians_per_frame } => {
                let q = rotate(p, c, radians_per_frame);
                (q.0 - p.0, q.1 - p.1)
            }
            Motion::Scale { factor_per_frame } => {
                let k = factor_per_frame - 1.0;
                (k * (p.0 - c.0), k * (p.1 - c.1))
            }
        }
    }
}

fn rotate(p: (f64, f64), c: (f64, f64), theta: f64) -> (f64, f64) {
    let (s, co) = theta.sin_cos();
    let (x, y) = (p.0 - c.0, p.1 - c.1);
    (c.0 + co * x - s * y, c.1 + s * x + co * y)
}

/// Dataset description; regenerating from the same manifest is bit-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// One motion per class; the class index is the position in this list.
    pub classes: Vec<Motion>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Number of soft-edged shapes composited over the background.
    pub shapes: usize,
    /// Edge half-width of the shapes, in pixels.
    pub edge_softness: f64,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self::with_speed(1.0)
    }
}

impl DatasetManifest {
    /// The eight standard motion classes with translation speed `speed` px/frame:
    /// right, left, up, down, down-right, up-right, clockwise rotation, zoom-in.
    pub fn with_speed(speed: f64) -> Self {
        let d = speed / 2f64.sqrt();
        Self {
            classes: vec![
                Motion::Translate { dx: speed, dy: 0.0 },
                Motion::Translate { dx: -speed, dy: 0.0 },
                Motion::Translate { dx: 0.0, dy: -speed },
                Motion::Translate { dx: 0.0, dy: speed },
                Motion::Translate { dx: d, dy: d },
                Motion::Translate { dx: d, dy: -d },
                Motion::Rotate { radians_per_frame: 0.08 },
                Motion::Scale { factor_per_frame: 1.06 },
            ],
            train_per_class: 48,
            test_per_class: 16,
            seed: 2024,
            frames: 8,
            height: 32,
            width: 32,
            channels: 1,
            shapes: 10,
            edge_softness: 0.8,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn video_shape(&self) -> VideoShape {
        VideoShape::new(self.frames, self.height, self.width, self.channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::invalid("manifest has no classes"));
        }
        if self.frames < 2 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::invalid(format!("bad clip shape {:?}", self.video_shape())));
        }
        if !self.edge_softness.is_finite() || self.edge_softness <= 0.0 {
            return Err(Error::invalid("edge_softness must be finite and positive"));
        }
        for m in &self.classes {
            let ok = match *m {
                Motion::Translate { dx, dy } => dx.is_finite() && dy.is_finite(),
                Motion::Rotate { radians_per_frame } => radians_per_frame.is_finite(),
                Motion::Scale { factor_per_frame } => factor_per_frame.is_finite() && factor_per_frame > 0.0,
            };
            if !ok {
                return Err(Error::invalid(format!("bad motion parameters {m:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
enum Shape2d {
    Disk { cx: f64, cy: f64, r: f64 },
    /// Regular convex polygon given by its circumradius and rotation.
    Polygon { cx: f64, cy: f64, r: f64, sides: usize, phase: f64 },
}

impl Shape2d {
    /// Signed distance, negative inside (exact for disks, a lower bound outside polygons).
    fn signed_distance(&self, x: f64, y: f64) -> f64 {
        match *self {
            Shape2d::Disk { cx, cy, r } => ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - r,
            Shape2d::Polygon { cx, cy, r, sides, phase } => {
                let apothem = r * (PI / sides as f64).cos();
                let (px, py) = (x - cx, y - cy);
                (0..sides)
                    .map(|k| {
                        let a = phase + (2 * k + 1) as f64 * PI / sides as f64;
                        px * a.cos() + py * a.sin() - apothem
                    })
                    .fold(f64::NEG_INFINITY, f64::max)
            }
        }
    }
}

/// Smooth procedural texture on the infinite plane.
#[derive(Debug, Clone)]
struct Texture {
    base: Vec<f64>,
    waves: Vec<(f64, f64, f64, f64)>,
    shapes: Vec<(Shape2d, Vec<f64>)>,
    softness: f64,
}

impl Texture {
    fn sample<R: Rng>(rng: &mut R, manifest: &DatasetManifest) -> Self {
        let c = manifest.channels;
        let (w, h) = (manifest.width as f64, manifest.height as f64);
        let base = (0..c).map(|_| rng.random_range(0.35..0.65)).collect();
        let waves = (0..2)
            .map(|_| {
                let period = rng.random_range(10.0..20.0);
                let angle = rng.random_range(0.0..2.0 * PI);
                let k = 2.0 * PI / period;
                (k * angle.cos(), k * angle.sin(), rng.random_range(0.0..2.0 * PI), rng.random_range(0.06..0.12))
            })
            .collect();
        let shapes = (0..manifest.shapes)
            .map(|_| {
                let cx = rng.random_range(-0.3 * w..1.3 * w);
                let cy = rng.random_range(-0.3 * h..1.3 * h);
                let r = rng.random_range(2.5..6.5);
                let shape = if rng.random_bool(0.5) {
                    Shape2d::Disk { cx, cy, r }
                } else {
                    Shape2d::Polygon { cx, cy, r, sides: rng.random_range(3..=6), phase: rng.random_range(0.0..2.0 * PI) }
                };
                let value = (0..c).map(|_| rng.random_range(0.05..0.95)).collect();
                (shape, value)
            })
            .collect();
        Self { base, waves, shapes, softness: manifest.edge_softness }
    }

    fn eval(&self, x: f64, y: f64, out: &mut [f64]) {
        let wave: f64 = self.waves.iter().map(|(kx, ky, ph, a)| a * (kx * x + ky * y + ph).sin()).sum();
        for (o, b) in out.iter_mut().zip(&self.base) {
            *o = b + wave;
        }
        for (shape, value) in &self.shapes {
            let sd = shape.signed_distance(x, y);
            let alpha = 1.0 / (1.0 + (sd / self.softness * 2.0).exp());
            if alpha < 1e-6 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(value) {
                *o = *o * (1.0 - alpha) + v * alpha;
            }
        }
    }
}

/// Renders the clip of class `class_index` whose texture is drawn from `seed`.
pub fn generate_clip(class_index: usize, seed: u64, manifest: &DatasetManifest) -> Result<LabeledClip> {
    manifest.validate()?;
    let motion = *manifest.classes.get(class_index).ok_or_else(|| {
        Error::invalid(format!(
            "class index {class_index} out of range for {} classes",
            manifest.num_classes()
        ))
    })?;
    let shape = manifest.video_shape();
    let texture = Texture::sample(&mut rng_from_seed(seed), manifest);
    let (h, w, c) = (shape.height, shape.width, shape.channels);
    let centre = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);

    let mut data = Vec::with_capacity(shape.len());
    let mut px = vec![0.0f64; c];
    for i in 0..shape.frames {
        for y in 0..h {
            for x in 0..w {
                let q = motion.to_texture(i, (x as f64, y as f64), centre);
                texture.eval(q.0, q.1, &mut px);
                data.extend(px.iter().map(|v| v.clamp(0.0, 1.0) as f32));
            }
        }
    }

    let mut flow = Vec::with_capacity((shape.frames - 1) * h * w * 2);
    for _ in 0..shape.frames - 1 {
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = motion.flow((x as f64, y as f64), centre);
                flow.push(dx as f32);
                flow.push(dy as f32);
            }
        }
    }

    LabeledClip::new(
        format!("k{class_index}-s{seed:016x}"),
        class_index,
        VideoTensor::new(shape, data)?,
        FlowField::new(shape.frames - 1, h, w, flow)?,
    )
}

/// Seed of the `index`-th clip of `class` in `split`.
pub fn clip_seed(manifest: &DatasetManifest, split: Split, class: usize, index: usize) -> u64 {
    derive_seed(manifest.seed, split.tag(), (class as u64) << 32 | index as u64)
}

/// All clips of one split, ordered class-major.
pub fn generate_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<LabeledClip>> {
    let per_class = match split {
        Split::Train => manifest.train_per_class,
        Split::Test => manifest.test_per_class,
    };
    let mut clips = Vec::with_capacity(per_class * manifest.num_classes());
    for class in 0..manifest.num_classes() {
        for i in 0..per_class {
            clips.push(generate_clip(class, clip_seed(manifest, split, class, i), manifest)?);
        }
    }
    Ok(clips)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn translate_right_flow_is_the_translation_vector() {
        let m = DatasetManifest::with_speed(1.0);
        let clip = generate_clip(0, 5, &m).unwrap();
        for i in 0..m.frames - 1 {
            assert_eq!(clip.flow.at(i, 10, 10), (1.0, 0.0));
        }
    }

    #[test]
    fn default_labels_cover_all_classes() {
        let mut m = DatasetManifest::default();
        m.train_per_class = 1;
        let clips = generate_split(&m, Split::Train).unwrap();
        let mut labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
        labels.dedup();
        assert_eq!(labels, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn generation_is_deterministic() {
        let m = DatasetManifest::default();
        assert_eq!(generate_clip(6, 99, &m).unwrap(), generate_clip(6, 99, &m).unwrap());
    }

    #[test]
    fn out_of_range_class_is_rejected() {
        let m = DatasetManifest::default();
        assert!(matches!(generate_clip(8, 0, &m), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn same_seed_shares_first_frame_across_classes() {
        let m = DatasetManifest::default();
        let a = generate_clip(0, 42, &m).unwrap();
        let b = generate_clip(7, 42, &m).unwrap();
        assert_eq!(a.video.frame(0), b.video.frame(0));
        assert_ne!(a.video.frame(3), b.video.frame(3));
    }

    #[test]
    fn values_are_in_unit_range() {
        let m = DatasetManifest::default();
        let clip = generate_clip(3, 1, &m).unwrap();
        assert!(clip.video.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn clamp01_examples() {
        let s = VideoShape::new(2, 1, 1, 1);
        let v = VideoTensor::new(s, vec![1.2, -0.3]).unwrap();
        assert_eq!(clamp01(&v).unwrap().data(), &[1.0, 0.0]);
        let v = VideoTensor::new(s, vec![0.5, 0.5]).unwrap();
        assert_eq!(clamp01(&v).unwrap().data(), &[0.5, 0.5]);
        let v = VideoTensor::new(s, vec![f32::NAN, 0.5]).unwrap();
        assert!(matches!(clamp01(&v), Err(Error::Numeric(_))));
    }

    #[test]
    fn video_rejects_single_frame_and_bad_length() {
        assert!(VideoTensor::new(VideoShape::new(1, 2, 2, 1), vec![0.0; 4]).is_err());
        assert!(VideoTensor::new(VideoShape::new(2, 2, 2, 1), vec![0.0; 7]).is_err());
    }

    #[test]
    fn flow_downsample_scales_displacements() {
        let f = FlowField::new(1, 4, 4, [2.0f32, -1.0].repeat(16)).unwrap();
        let d = f.downsample(2).unwrap();
        assert_eq!(d.at(0, 1, 1), (1.0, -0.5));
    }
}
