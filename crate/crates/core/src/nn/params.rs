//! Named parameter tables: seeded initialisation, freezing and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::container::{self, Container, Record};
use crate::rng::rng_from_seed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with standard deviation `gain / sqrt(fan_in)`.
    Normal { fan_in: usize, gain: f64 },
}

/// Where a model gets its tensors from while being assembled.
pub trait ParamSource {
    fn take(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor>;
}

/// Creates fresh trainable variables from a seeded stream.
pub(crate) struct InitSource {
    rng: ChaCha8Rng,
    pub(crate) vars: Vec<(String, Var)>,
}

impl InitSource {
    pub(crate) fn new(seed: u64) -> Self {
        Self { rng: rng_from_seed(seed), vars: Vec::new() }
    }
}

impl ParamSource for InitSource {
    fn take(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal { fan_in, gain } => {
                let std = gain / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| (self.rng.sample::<f64, _>(StandardNormal) * std) as f32).collect()
            }
        };
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &Device::Cpu)?)?;
        let t = var.as_tensor().clone();
        self.vars.push((name.to_string(), var));
        Ok(t)
    }
}

/// Serves stored tensors, checking names and shapes.
pub(crate) struct LoadSource {
    map: BTreeMap<String, Tensor>,
    dtype: DType,
}

impl LoadSource {
    pub(crate) fn new(map: BTreeMap<String, Tensor>, dtype: DType) -> Self {
        Self { map, dtype }
    }
}

impl ParamSource for LoadSource {
    fn take(&mut self, name: &str, shape: &[usize], _init: Init) -> Result<Tensor> {
        let t = self
            .map
            .remove(name)
            .ok_or_else(|| Error::format(name, "parameter missing from checkpoint"))?;
        if t.dims() != shape {
            return Err(Error::format(name, format!("shape {:?}, architecture expects {shape:?}", t.dims())));
        }
        Ok(t.to_dtype(self.dtype)?.detach())
    }
}

impl LoadSource {
    pub(crate) fn finish(self) -> Result<()> {
        if let Some(extra) = self.map.keys().next() {
            return Err(Error::format(extra, "parameter not used by the architecture"));
        }
        Ok(())
    }
}

/// Ordered `(name, tensor)` table of a built model.
#[derive(Debug, Clone, Default)]
pub struct ParamTable {
    pub(crate) entries: Vec<(String, Tensor)>,
}

impl ParamTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.elem_count()).sum()
    }

    pub(crate) fn detached(&self, dtype: DType) -> Result<BTreeMap<String, Tensor>> {
        self.entries
            .iter()
            .map(|(n, t)| Ok((n.clone(), t.detach().to_dtype(dtype)?)))
            .collect()
    }

    /// All parameters flattened, in table order (used by determinism checks).
    pub fn flat_values(&self) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for (_, t) in &self.entries {
            out.extend(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?);
        }
        Ok(out)
    }

    pub(crate) fn to_container(&self, meta: serde_json::Value) -> Result<Container> {
        let mut records = Vec::with_capacity(self.entries.len());
        for (n, t) in &self.entries {
            let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            records.push(Record::f32(n.clone(), t.dims().to_vec(), data));
        }
        Ok(Container { records, meta: Some(meta) })
    }
}

pub(crate) fn container_tensors(c: &Container) -> Result<BTreeMap<String, Tensor>> {
    let mut map = BTreeMap::new();
    for r in &c.records {
        let t = Tensor::from_vec(r.as_f32()?.to_vec(), r.shape.as_slice(), &Device::Cpu)?;
        map.insert(r.name.clone(), t);
    }
    Ok(map)
}

/// Checkpoint header metadata: model kind plus its architecture config.
pub(crate) fn checkpoint_meta<C: Serialize>(kind: &str, config: &C) -> Result<serde_json::Value> {
    Ok(serde_json::json!({ "kind": kind, "config": serde_json::to_value(config)? }))
}

pub(crate) fn save_checkpoint<C: Serialize, R: Serialize>(
    path: &Path,
    kind: &str,
    config: &C,
    params: &ParamTable,
    sidecar: &R,
) -> Result<()> {
    let c = params.to_container(checkpoint_meta(kind, config)?)?;
    container::write_container(path, &c)?;
    let json = serde_json::to_vec_pretty(sidecar)?;
    container::write_atomic(&container::manifest_path(path), &json)
}

/// Reads a checkpoint, checks its kind and returns the architecture config and tensors.
pub(crate) fn load_checkpoint<C: DeserializeOwned>(path: &Path, kind: &str) -> Result<(C, BTreeMap<String, Tensor>)> {
    let c = container::read_container(path)?;
    let meta = c.meta.as_ref().ok_or_else(|| Error::format("header", "checkpoint has no metadata"))?;
    let found = meta.get("kind").and_then(|k| k.as_str()).unwrap_or("");
    if found != kind {
        return Err(Error::format("header", format!("expected a {kind} checkpoint, found {found:?}")));
    }
    let cfg = serde_json::from_value(meta.get("config").cloned().unwrap_or_default())
        .map_err(|e| Error::format("header", format!("bad config: {e}")))?;
    Ok((cfg, container_tensors(&c)?))
}
