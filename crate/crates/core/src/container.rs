//! The `VPT1` tensor container and the dataset files built on it.
//!
//! Layout: `"VPT1"` | header length (u32 LE) | UTF-8 JSON header | payload.
//! The header lists `{name, shape, dtype, offset, nbytes}` per record, with
//! offsets relative to the start of the payload; payloads are little-endian.
//! An optional `meta` object carries provenance (configs, manifests).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::video::{DatasetManifest, FlowField, LabeledClip, VideoShape, VideoTensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VPT1";

#[derive(Debug, Clone, PartialEq)]
pub enum RecordData {
    F32(Vec<f32>),
    I64(Vec<i64>),
}

impl RecordData {
    fn dtype(&self) -> &'static str {
        match self {
            RecordData::F32(_) => "f32",
            RecordData::I64(_) => "i64",
        }
    }

    fn len(&self) -> usize {
        match self {
            RecordData::F32(v) => v.len(),
            RecordData::I64(v) => v.len(),
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            RecordData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            RecordData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: RecordData,
}

impl Record {
    pub fn f32(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self { name: name.into(), shape, data: RecordData::F32(data) }
    }

    pub fn i64(name: impl Into<String>, shape: Vec<usize>, data: Vec<i64>) -> Self {
        Self { name: name.into(), shape, data: RecordData::I64(data) }
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            RecordData::F32(v) => Ok(v),
            RecordData::I64(_) => Err(Error::format(&self.name, "expected dtype f32, found i64")),
        }
    }

    pub fn as_i64(&self) -> Result<&[i64]> {
        match &self.data {
            RecordData::I64(v) => Ok(v),
            RecordData::F32(_) => Err(Error::format(&self.name, "expected dtype i64, found f32")),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    records: Vec<HeaderEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
}

/// A decoded container.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub records: Vec<Record>,
    pub meta: Option<serde_json::Value>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }
}

pub fn encode(container: &Container) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(container.records.len());
    for r in &container.records {
        let expect: usize = r.shape.iter().product();
        if expect != r.data.len() {
            return Err(Error::format(
                &r.name,
                format!("shape {:?} holds {expect} values but data has {}", r.shape, r.data.len()),
            ));
        }
        let offset = payload.len() as u64;
        r.data.write_le(&mut payload);
        entries.push(HeaderEntry {
            name: r.name.clone(),
            shape: r.shape.clone(),
            dtype: r.data.dtype().to_string(),
            offset,
            nbytes: payload.len() as u64 - offset,
        });
    }
    let header = serde_json::to_vec(&Header { records: entries, meta: container.meta.clone() })?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| Error::format("<header>", "header exceeds 4 GiB"))?;
    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::format("<magic>", "missing VPT1 magic bytes"));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if header_len > body.len() {
        return Err(Error::format("<header>", "declared header length exceeds file size"));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])
        .map_err(|e| Error::format("<header>", format!("malformed JSON header: {e}")))?;
    let payload = &body[header_len..];

    let mut records = Vec::with_capacity(header.records.len());
    for e in header.records {
        let count: usize = e.shape.iter().product();
        let width = match e.dtype.as_str() {
            "f32" => 4,
            "i64" => 8,
            other => return Err(Error::format(&e.name, format!("unsupported dtype {other:?}"))),
        };
        if e.nbytes != (count * width) as u64 {
            return Err(Error::format(
                &e.name,
                format!("shape {:?} of {} needs {} bytes, header declares {}", e.shape, e.dtype, count * width, e.nbytes),
            ));
        }
        let start = e.offset as usize;
        let end = start
            .checked_add(e.nbytes as usize)
            .filter(|&end| end <= payload.len())
            .ok_or_else(|| Error::format(&e.name, "payload truncated"))?;
        let raw = &payload[start..end];
        let data = if width == 4 {
            RecordData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        } else {
            RecordData::I64(raw.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        records.push(Record { name: e.name, shape: e.shape, data });
    }
    Ok(Container { records, meta: header.meta })
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_container(path: &Path, container: &Container) -> Result<()> {
    write_atomic(path, &encode(container)?)
}

pub fn read_container(path: &Path) -> Result<Container> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// `data.vpt` → `data.manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("manifest.json")
}

pub fn clips_to_container(clips: &[LabeledClip]) -> Container {
    let mut records = Vec::with_capacity(clips.len() * 3);
    for c in clips {
        let s = c.video.shape();
        records.push(Record::f32(format!("{}/video", c.clip_id), s.dims().to_vec(), c.video.data().to_vec()));
        records.push(Record::f32(
            format!("{}/flow", c.clip_id),
            vec![c.flow.pairs(), c.flow.height(), c.flow.width(), 2],
            c.flow.data().to_vec(),
        ));
        records.push(Record::i64(format!("{}/label", c.clip_id), vec![1], vec![c.label as i64]));
    }
    Container { records, meta: None }
}

pub fn clips_from_container(container: &Container) -> Result<Vec<LabeledClip>> {
    let mut clips = Vec::new();
    let mut it = container.records.iter();
    while let Some(video) = it.next() {
        let id = video
            .name
            .strip_suffix("/video")
            .ok_or_else(|| Error::format(&video.name, "expected a `<clip>/video` record"))?;
        let flow = it.next().filter(|r| r.name == format!("{id}/flow"));
        let flow = flow.ok_or_else(|| Error::format(id, "missing flow record"))?;
        let label = it.next().filter(|r| r.name == format!("{id}/label"));
        let label = label.ok_or_else(|| Error::format(id, "missing label record"))?;

        let shape = match video.shape.as_slice() {
            &[n, h, w, c] => VideoShape::new(n, h, w, c),
            s => return Err(Error::format(&video.name, format!("video must be rank 4, got {s:?}"))),
        };
        let video_t = VideoTensor::new(shape, video.as_f32()?.to_vec())
            .map_err(|e| Error::format(&video.name, e.to_string()))?;
        let flow_t = match flow.shape.as_slice() {
            &[p, h, w, 2] => FlowField::new(p, h, w, flow.as_f32()?.to_vec())
                .map_err(|e| Error::format(&flow.name, e.to_string()))?,
            s => return Err(Error::format(&flow.name, format!("flow must be (P, H, W, 2), got {s:?}"))),
        };
        let lab = match label.as_i64()? {
            &[l] if l >= 0 => l as usize,
            v => return Err(Error::format(&label.name, format!("bad label {v:?}"))),
        };
        clips.push(
            LabeledClip::new(id.to_string(), lab, video_t, flow_t)
                .map_err(|e| Error::format(id, e.to_string()))?,
        );
    }
    Ok(clips)
}

/// Saves clips to `path` and the manifest (when given) to its JSON sidecar.
pub fn save_dataset(clips: &[LabeledClip], manifest: Option<&DatasetManifest>, path: &Path) -> Result<()> {
    write_container(path, &clips_to_container(clips))?;
    if let Some(m) = manifest {
        write_atomic(&manifest_path(path), &serde_json::to_vec_pretty(m)?)?;
    }
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<LabeledClip>> {
    clips_from_container(&read_container(path)?)
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let p = manifest_path(path);
    Ok(serde_json::from_slice(&fs::read(&p).map_err(|e| Error::io(&p, e))?)?)
}
