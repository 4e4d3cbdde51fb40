//! The `CFCK` checkpoint format.
//!
//! Little-endian layout:
//!
//! ```text
//! magic       4 bytes  "CFCK"
//! version     u16      1
//! dtype       u8       1 = f32, 2 = f64
//! descriptor           head tag u8, input C/H/W as u32, layer count u16, then
//!                      per layer: kind u8, activation u8, tensor count u8,
//!                      and per tensor: rank u8 followed by rank × u32 extents
//! topology    u64      CRC-64/XZ of the descriptor bytes
//! parameters           every tensor's scalars, in descriptor order
//! metadata    u64 length + UTF-8 `key = value` lines
//! checksum    u64      CRC-64/XZ of every preceding byte
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::model::{HeadMode, Layer, Model};
use super::TrainError;
use crate::checksum::crc64;
use crate::nn::{Activation, Conv2d, Dense};
use crate::tensor::{DType, Scalar, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CFCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("checkpoint holds {found} parameters, expected {expected}")]
    DType { expected: DType, found: String },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch (stored {stored:016x}, computed {computed:016x})")]
    Checksum { stored: u64, computed: u64 },
    #[error("topology hash mismatch (stored {stored:016x}, computed {computed:016x})")]
    TopologyHash { stored: u64, computed: u64 },
    #[error("invalid checkpoint: {0}")]
    Format(String),
    #[error("{0} unexpected bytes after the checkpoint")]
    TrailingBytes(usize),
    #[error("checkpoint describes an invalid model: {0}")]
    Model(#[from] TrainError),
}

impl From<TensorError> for CheckpointError {
    fn from(e: TensorError) -> Self {
        CheckpointError::Model(e.into())
    }
}

impl CheckpointError {
    pub fn is_io(&self) -> bool {
        matches!(self, CheckpointError::Io { .. })
    }
}

/// Training provenance stored alongside the parameters.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CheckpointMeta {
    /// Number of completed epochs.
    pub epoch: u64,
    pub seed: u64,
    pub config_hash: u64,
    /// Class names in label order.
    pub class_names: Vec<String>,
}

impl CheckpointMeta {
    fn to_text(&self, head: HeadMode) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "epoch = {}", self.epoch);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "config_hash = {:016x}", self.config_hash);
        let _ = writeln!(s, "head = {head}");
        let _ = writeln!(s, "classes = {}", self.class_names.join(","));
        s
    }

    fn parse(text: &str) -> Result<Self, CheckpointError> {
        let bad = |m: String| CheckpointError::Format(format!("metadata: {m}"));
        let mut meta = CheckpointMeta::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| bad(format!("malformed line `{line}`")))?;
            let int = |v: &str| v.parse::<u64>().map_err(|_| bad(format!("bad {k} `{v}`")));
            match k {
                "epoch" => meta.epoch = int(v)?,
                "seed" => meta.seed = int(v)?,
                "config_hash" => {
                    meta.config_hash =
                        u64::from_str_radix(v, 16).map_err(|_| bad(format!("bad {k} `{v}`")))?
                }
                "head" => {}
                "classes" if v.is_empty() => meta.class_names.clear(),
                "classes" => meta.class_names = v.split(',').map(str::to_string).collect(),
                _ => return Err(bad(format!("unknown key `{k}`"))),
            }
        }
        Ok(meta)
    }
}

fn push_u32(out: &mut Vec<u8>, v: usize) -> Result<(), CheckpointError> {
    let v = u32::try_from(v).map_err(|_| CheckpointError::Format(format!("extent {v} too large")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn descriptor<T: Scalar>(model: &Model<T>) -> Result<Vec<u8>, CheckpointError> {
    let mut d = vec![model.head().tag()];
    for e in model.input_dims() {
        push_u32(&mut d, e)?;
    }
    d.extend_from_slice(&(model.layers().len() as u16).to_le_bytes());
    for layer in model.layers() {
        let params = layer.params();
        d.extend([layer.kind_tag(), layer.activation().tag(), params.len() as u8]);
        for p in params {
            d.push(p.dims().len() as u8);
            for &e in p.dims() {
                push_u32(&mut d, e)?;
            }
        }
    }
    Ok(d)
}

/// Serialises a model and its metadata.
pub fn write_checkpoint<T: Scalar>(model: &Model<T>, meta: &CheckpointMeta) -> Result<Vec<u8>, CheckpointError> {
    let desc = descriptor(model)?;
    let mut out = Vec::with_capacity(64 + desc.len() + model.param_count() * T::DTYPE.size_of());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(T::DTYPE.tag());
    out.extend_from_slice(&desc);
    out.extend_from_slice(&crc64(&desc).to_le_bytes());
    for p in model.params() {
        for &v in p.data() {
            v.write_le(&mut out);
        }
    }
    let text = meta.to_text(model.head());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let sum = crc64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

struct LayerDesc {
    kind: u8,
    activation: Activation,
    shapes: Vec<Vec<usize>>,
}

/// Parses a checkpoint produced by [`write_checkpoint`] for the same dtype.
/// Either the whole model is reconstructed or an error is returned.
pub fn read_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(Model<T>, CheckpointMeta), CheckpointError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated);
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Magic);
    }
    if bytes.len() < 6 + 8 {
        return Err(CheckpointError::Truncated);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc64(body);
    if stored != computed {
        // a short file most likely lost its tail; anything else is corruption
        let probe = Cursor { bytes: body, pos: 6 };
        return Err(match expected_len(probe) {
            Err(CheckpointError::Truncated) => CheckpointError::Truncated,
            Ok(n) if n > bytes.len() => CheckpointError::Truncated,
            _ => CheckpointError::Checksum { stored, computed },
        });
    }

    let mut c = Cursor { bytes: body, pos: 6 };
    let dtype_tag = c.u8()?;
    if dtype_tag != T::DTYPE.tag() {
        return Err(CheckpointError::DType {
            expected: T::DTYPE,
            found: DType::from_tag(dtype_tag).map_or(format!("tag {dtype_tag}"), |d| d.to_string()),
        });
    }
    let desc_start = c.pos;
    let (head, input_dims, layers) = parse_descriptor(&mut c)?;
    let desc = &body[desc_start..c.pos];
    let stored_topology = c.u64()?;
    let computed_topology = crc64(desc);
    if stored_topology != computed_topology {
        return Err(CheckpointError::TopologyHash {
            stored: stored_topology,
            computed: computed_topology,
        });
    }

    let size = T::DTYPE.size_of();
    let mut built = Vec::with_capacity(layers.len());
    for l in layers {
        let mut tensors = Vec::with_capacity(l.shapes.len());
        for dims in &l.shapes {
            let n: usize = dims.iter().product();
            let raw = c.take(n.checked_mul(size).ok_or(CheckpointError::Truncated)?)?;
            let data = raw.chunks_exact(size).map(T::read_le).collect();
            tensors.push(Tensor::from_vec(dims, data)?);
        }
        built.push(build_layer(l.kind, l.activation, tensors)?);
    }
    let meta_len = usize::try_from(c.u64()?).map_err(|_| CheckpointError::Truncated)?;
    let text = std::str::from_utf8(c.take(meta_len)?)
        .map_err(|_| CheckpointError::Format("metadata is not UTF-8".into()))?;
    let meta = CheckpointMeta::parse(text)?;
    if c.pos != body.len() {
        return Err(CheckpointError::TrailingBytes(body.len() - c.pos));
    }
    Ok((Model::new(input_dims, built, head)?, meta))
}

fn parse_descriptor(c: &mut Cursor<'_>) -> Result<(HeadMode, [usize; 3], Vec<LayerDesc>), CheckpointError> {
    let head_tag = c.u8()?;
    let head = HeadMode::from_tag(head_tag)
        .ok_or_else(|| CheckpointError::Format(format!("unknown head tag {head_tag}")))?;
    let input_dims = [c.u32()?, c.u32()?, c.u32()?];
    let count = c.u16()? as usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = c.u8()?;
        let act_tag = c.u8()?;
        let activation = Activation::from_tag(act_tag)
            .ok_or_else(|| CheckpointError::Format(format!("unknown activation tag {act_tag}")))?;
        let n = c.u8()? as usize;
        let mut shapes = Vec::with_capacity(n);
        for _ in 0..n {
            let rank = c.u8()? as usize;
            shapes.push((0..rank).map(|_| c.u32()).collect::<Result<Vec<_>, _>>()?);
        }
        layers.push(LayerDesc {
            kind,
            activation,
            shapes,
        });
    }
    Ok((head, input_dims, layers))
}

/// File length implied by the descriptor and the metadata length field.
fn expected_len(mut c: Cursor<'_>) -> Result<usize, CheckpointError> {
    let tag = c.u8()?;
    let size = DType::from_tag(tag)
        .ok_or_else(|| CheckpointError::Format(format!("unknown dtype tag {tag}")))?
        .size_of();
    let (_, _, layers) = parse_descriptor(&mut c)?;
    let params: usize = layers
        .iter()
        .flat_map(|l| &l.shapes)
        .map(|d| d.iter().product::<usize>())
        .sum();
    let meta_at = c.pos + 8 + params * size;
    c.pos = meta_at;
    let meta_len = usize::try_from(c.u64()?).map_err(|_| CheckpointError::Truncated)?;
    Ok(meta_at + 8 + meta_len + 8)
}

fn build_layer<T: Scalar>(kind: u8, activation: Activation, tensors: Vec<Tensor<T>>) -> Result<Layer<T>, CheckpointError> {
    let mut it = tensors.into_iter();
    let mut pair = || -> Result<(Tensor<T>, Tensor<T>), CheckpointError> {
        match (it.next(), it.next(), it.next()) {
            (Some(w), Some(b), None) => Ok((w, b)),
            _ => Err(CheckpointError::Format(format!("layer kind {kind} needs two tensors"))),
        }
    };
    let layer = match kind {
        1 => {
            let (w, b) = pair()?;
            Layer::conv(Conv2d::new(w, b).map_err(TrainError::from)?, activation)
        }
        2 => Layer::MaxPool2d,
        3 => Layer::Flatten,
        4 => {
            let (w, b) = pair()?;
            Layer::dense(Dense::new(w, b).map_err(TrainError::from)?, activation)
        }
        other => return Err(CheckpointError::Format(format!("unknown layer kind {other}"))),
    };
    if layer.params().is_empty() && (it.next().is_some() || activation != Activation::Identity) {
        return Err(CheckpointError::Format(format!("layer kind {kind} carries no parameters")));
    }
    Ok(layer)
}

/// Writes the checkpoint next to `path` and renames it into place.
pub fn save_checkpoint<T: Scalar>(model: &Model<T>, meta: &CheckpointMeta, path: &Path) -> Result<(), CheckpointError> {
    let bytes = write_checkpoint(model, meta)?;
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".partial");
    let tmp = path.with_file_name(tmp_name);
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| CheckpointError::Io { path: p, source }
    };
    fs::write(&tmp, &bytes).map_err(io(&tmp))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        io(path)(e)
    })
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Model<T>, CheckpointMeta), CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_checkpoint(&bytes)
}
