//! Self-describing binary tensor files.
//!
//! Layout: the 6-byte magic `VXAR\x01\x00`, a little-endian `u32` header
//! length, a UTF-8 JSON header, then the raw little-endian payload in
//! row-major order. Optional header keys carry type information:
//! `num_classes` for label volumes, `channels` and `patch_size` for feature
//! grids and `meta` for model parameters.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use protoloop_core::encoder::FeatureGrid;
use protoloop_core::specialist::SpecialistParams;
use protoloop_core::volume::{IntensityVolume, LabelVolume, Shape3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"VXAR\x01\x00";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_size: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<ParamsMeta>,
}

impl Header {
    fn new(dtype: Dtype, shape: Vec<usize>) -> Self {
        Header {
            dtype,
            shape,
            order: "row-major".into(),
            num_classes: None,
            channels: None,
            patch_size: None,
            meta: None,
        }
    }
}

/// Describes a `[num_classes, num_features + 1]` parameter tensor whose last
/// column is the bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsMeta {
    pub num_features: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub round: Option<usize>,
    #[serde(default)]
    pub iteration: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

/// A decoded file before it is given a domain type.
#[derive(Clone, Debug, PartialEq)]
pub struct RawArray {
    pub header: Header,
    pub payload: Payload,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Array {
    Intensity(IntensityVolume),
    Labels(LabelVolume),
    Features(FeatureGrid),
    Params(SpecialistParams, ParamsMeta),
}

impl Array {
    pub fn kind(&self) -> &'static str {
        match self {
            Array::Intensity(_) => "intensity volume",
            Array::Labels(_) => "label volume",
            Array::Features(_) => "feature grid",
            Array::Params(..) => "model parameters",
        }
    }
}

pub fn read_raw(path: &Path) -> Result<RawArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &bytes)
}

fn decode(path: &Path, bytes: &[u8]) -> Result<RawArray> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(Error::format(path, "malformed header: bad magic"));
    }
    let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let body = &bytes[10..];
    if body.len() < len {
        return Err(Error::format(path, "malformed header: truncated"));
    }
    let header: Header = serde_json::from_slice(&body[..len])
        .map_err(|e| Error::format(path, format!("malformed header: {e}")))?;
    if header.order != "row-major" {
        return Err(Error::format(
            path,
            format!("malformed header: unsupported order {:?}", header.order),
        ));
    }
    if header.shape.is_empty() || header.shape.contains(&0) {
        return Err(Error::format(path, "malformed header: empty extent"));
    }
    let count = header
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(path, "malformed header: shape overflows"))?;
    let data = &body[len..];
    if data.len() != count * header.dtype.size() {
        return Err(Error::format(
            path,
            format!(
                "shape/payload mismatch: header {:?} needs {} bytes, found {}",
                header.shape,
                count * header.dtype.size(),
                data.len()
            ),
        ));
    }
    let payload = match header.dtype {
        Dtype::U8 => Payload::U8(data.to_vec()),
        Dtype::F32 => Payload::F32(
            data.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok(RawArray { header, payload })
}

fn encode(header: &Header, payload: &Payload) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("header serializes");
    let payload_len = match payload {
        Payload::F32(v) => v.len() * 4,
        Payload::U8(v) => v.len(),
    };
    let mut out = Vec::with_capacity(10 + json.len() + payload_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    match payload {
        Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Payload::U8(v) => out.extend_from_slice(v),
    }
    out
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

fn shape3(path: &Path, dims: &[usize]) -> Result<Shape3> {
    match dims {
        &[d, h, w] => Ok(Shape3::new(d, h, w)?),
        _ => Err(Error::format(
            path,
            format!("expected a 3-D shape, found {dims:?}"),
        )),
    }
}

fn into_typed(path: &Path, raw: RawArray) -> Result<Array> {
    let RawArray { header, payload } = raw;
    match payload {
        Payload::U8(data) => {
            let shape = shape3(path, &header.shape)?;
            let num_classes = match header.num_classes {
                Some(n) => n,
                None => data.iter().copied().max().unwrap_or(0) as usize + 1,
            };
            let num_classes = num_classes.max(2);
            Ok(Array::Labels(LabelVolume::new(shape, num_classes, data)?))
        }
        Payload::F32(data) => {
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::format(path, "non-finite values in payload"));
            }
            if let Some(meta) = header.meta {
                let expected = [meta.num_classes, meta.num_features + 1];
                if header.shape != expected {
                    return Err(Error::format(
                        path,
                        format!("parameter shape {:?} != {expected:?}", header.shape),
                    ));
                }
                let flat: Vec<f64> = data.iter().map(|&x| x as f64).collect();
                let params = params_from_rows(&meta, &flat)?;
                return Ok(Array::Params(params, meta));
            }
            if let Some(channels) = header.channels {
                if header.shape.len() != 4 || header.shape[0] != channels {
                    return Err(Error::format(
                        path,
                        format!(
                            "feature shape {:?} does not start with {channels} channels",
                            header.shape
                        ),
                    ));
                }
                let grid = shape3(path, &header.shape[1..])?;
                let patch = header.patch_size.unwrap_or([1, 1, 1]);
                return Ok(Array::Features(FeatureGrid::new(
                    channels, grid, patch, data,
                )?));
            }
            let shape = shape3(path, &header.shape)?;
            Ok(Array::Intensity(IntensityVolume::new(shape, data)?))
        }
    }
}

fn params_from_rows(meta: &ParamsMeta, rows: &[f64]) -> Result<SpecialistParams> {
    let f = meta.num_features;
    let mut weights = Vec::with_capacity(meta.num_classes * f);
    let mut bias = Vec::with_capacity(meta.num_classes);
    for row in rows.chunks_exact(f + 1) {
        weights.extend_from_slice(&row[..f]);
        bias.push(row[f]);
    }
    Ok(SpecialistParams::from_parts(meta.num_classes, f, weights, bias)?)
}

pub fn load_array(path: &Path) -> Result<Array> {
    let raw = read_raw(path)?;
    into_typed(path, raw)
}

fn dtype_mismatch(path: &Path, wanted: &str, found: &Array) -> Error {
    Error::format(
        path,
        format!("dtype mismatch: expected {wanted}, found {}", found.kind()),
    )
}

pub fn load_intensity(path: &Path) -> Result<IntensityVolume> {
    match load_array(path)? {
        Array::Intensity(v) => Ok(v),
        other => Err(dtype_mismatch(path, "intensity volume", &other)),
    }
}

/// Loads labels, checking the declared class count when one is expected.
pub fn load_labels(path: &Path, num_classes: Option<usize>) -> Result<LabelVolume> {
    let raw = read_raw(path)?;
    let declared = raw.header.num_classes;
    let labels = match into_typed(path, raw)? {
        Array::Labels(l) => l,
        other => return Err(dtype_mismatch(path, "label volume", &other)),
    };
    match num_classes {
        Some(n) if declared.is_some_and(|d| d != n) => Err(Error::format(
            path,
            format!("declares {} classes, expected {n}", labels.num_classes()),
        )),
        Some(n) if labels.num_classes() != n => {
            Ok(LabelVolume::new(labels.shape(), n, labels.into_data())?)
        }
        _ => Ok(labels),
    }
}

pub fn load_features(path: &Path) -> Result<FeatureGrid> {
    match load_array(path)? {
        Array::Features(g) => Ok(g),
        other => Err(dtype_mismatch(path, "feature grid", &other)),
    }
}

pub fn load_params(path: &Path) -> Result<(SpecialistParams, ParamsMeta)> {
    match load_array(path)? {
        Array::Params(p, m) => Ok((p, m)),
        other => Err(dtype_mismatch(path, "model parameters", &other)),
    }
}

fn dims(s: Shape3) -> Vec<usize> {
    s.dims().to_vec()
}

pub fn encode_array(array: &Array) -> Result<Vec<u8>> {
    let (header, payload) = match array {
        Array::Intensity(v) => (
            Header::new(Dtype::F32, dims(v.shape())),
            Payload::F32(v.data().to_vec()),
        ),
        Array::Labels(l) => {
            let mut h = Header::new(Dtype::U8, dims(l.shape()));
            h.num_classes = Some(l.num_classes());
            (h, Payload::U8(l.data().to_vec()))
        }
        Array::Features(g) => {
            let mut shape = vec![g.channels()];
            shape.extend(g.grid_shape().dims());
            let mut h = Header::new(Dtype::F32, shape);
            h.channels = Some(g.channels());
            h.patch_size = Some(g.patch_size());
            (h, Payload::F32(g.data().to_vec()))
        }
        Array::Params(p, meta) => {
            if meta.num_classes != p.num_classes() || meta.num_features != p.num_features() {
                return Err(Error::Validation(
                    "parameter metadata disagrees with the tensor".into(),
                ));
            }
            let f = p.num_features();
            let mut rows = Vec::with_capacity(p.num_classes() * (f + 1));
            for c in 0..p.num_classes() {
                rows.extend(p.weights()[c * f..(c + 1) * f].iter().map(|&x| x as f32));
                rows.push(p.bias()[c] as f32);
            }
            if rows.iter().any(|v| !v.is_finite()) {
                return Err(Error::Core(protoloop_core::Error::NonFinite));
            }
            let mut h = Header::new(Dtype::F32, vec![p.num_classes(), f + 1]);
            h.meta = Some(meta.clone());
            (h, Payload::F32(rows))
        }
    };
    Ok(encode(&header, &payload))
}

/// Serializes `array` atomically. The domain types already enforce their
/// invariants, so anything constructible is saveable.
pub fn save_array(array: &Array, path: &Path) -> Result<()> {
    write_atomic(path, &encode_array(array)?)
}

pub fn save_intensity(v: &IntensityVolume, path: &Path) -> Result<()> {
    save_array(&Array::Intensity(v.clone()), path)
}

pub fn save_labels(l: &LabelVolume, path: &Path) -> Result<()> {
    save_array(&Array::Labels(l.clone()), path)
}

pub fn save_features(g: &FeatureGrid, path: &Path) -> Result<()> {
    save_array(&Array::Features(g.clone()), path)
}

pub fn save_params(p: &SpecialistParams, meta: &ParamsMeta, path: &Path) -> Result<()> {
    save_array(&Array::Params(p.clone(), meta.clone()), path)
}

/// Writes pretty-printed JSON atomically.
pub fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path, e))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}
