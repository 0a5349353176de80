use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, InferenceParams, ModelError, ModelParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MRNARCH1";
const MAX_NDIM: u32 = 8;

/// A TOML header followed by named little-endian `f64` tensors.
///
/// Layout: magic, `u64` header length, header bytes, `u64` tensor count, then per
/// tensor `u32` name length, name, `u32` rank, `u64` dims, data.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub meta: String,
    pub tensors: Vec<(String, Tensor)>,
}

fn err(m: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(m.into())
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io { path: path.display().to_string(), source }
}

fn read_exact<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>, ModelError> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf).map_err(|e| err(e.to_string()))?;
    if buf.len() != n {
        return Err(err("truncated archive"));
    }
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ModelError> {
    Ok(u32::from_le_bytes(read_exact(r, 4)?.try_into().unwrap()))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, ModelError> {
    Ok(u64::from_le_bytes(read_exact(r, 8)?.try_into().unwrap()))
}

impl Archive {
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.meta.len() as u64).to_le_bytes())?;
        w.write_all(self.meta.as_bytes())?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, ModelError> {
        if read_exact(r, MAGIC.len())? != MAGIC {
            return Err(err("not a model archive"));
        }
        let meta_len = read_u64(r)? as usize;
        let meta = String::from_utf8(read_exact(r, meta_len)?).map_err(|_| err("header is not UTF-8"))?;
        let count = read_u64(r)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let name = String::from_utf8(read_exact(r, name_len)?).map_err(|_| err("tensor name is not UTF-8"))?;
            let ndim = read_u32(r)?;
            if ndim > MAX_NDIM {
                return Err(err(format!("tensor {name} has rank {ndim}")));
            }
            let shape = (0..ndim).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| err("tensor too large"))?;
            let bytes = read_exact(r, n.checked_mul(8).ok_or_else(|| err("tensor too large"))?)?;
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::from_vec(&shape, data)));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| err(e.to_string()))? != 0 {
            return Err(err("trailing bytes after archive"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io(dir))?;
        }
        let tmp = path.with_extension("partial");
        let mut w = BufWriter::new(File::create(&tmp).map_err(io(&tmp))?);
        self.write_to(&mut w).map_err(io(&tmp))?;
        w.into_inner().map_err(|e| io(&tmp)(e.into_error()))?.sync_all().map_err(io(&tmp))?;
        std::fs::rename(&tmp, path).map_err(io(path))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut r = BufReader::new(File::open(path).map_err(io(path))?);
        Self::read_from(&mut r)
    }

    /// Removes and returns the tensors whose names start with `prefix`.
    pub fn take_prefixed(&mut self, prefix: &str) -> Vec<(String, Tensor)> {
        let (hit, keep) = std::mem::take(&mut self.tensors).into_iter().partition(|(n, _)| n.starts_with(prefix));
        self.tensors = keep;
        hit
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// All sub-networks, resumable.
    Full,
    /// Encoders and Siamese network only.
    Inference,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: CheckpointKind,
    arch: ArchConfig,
}

/// Saved model weights.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Full(ModelParams),
    Inference(InferenceParams),
}

impl Checkpoint {
    pub fn kind(&self) -> CheckpointKind {
        match self {
            Self::Full(_) => CheckpointKind::Full,
            Self::Inference(_) => CheckpointKind::Inference,
        }
    }

    pub fn config(&self) -> &ArchConfig {
        match self {
            Self::Full(p) => &p.config,
            Self::Inference(p) => &p.config,
        }
    }

    pub fn inference(&self) -> InferenceParams {
        match self {
            Self::Full(p) => p.strip_for_inference(),
            Self::Inference(p) => p.clone(),
        }
    }

    /// The full parameter set; fails on an inference-only checkpoint.
    pub fn full(&self) -> Result<&ModelParams, ModelError> {
        match self {
            Self::Full(p) => Ok(p),
            Self::Inference(_) => Err(ModelError::Stripped("decoders and discriminators")),
        }
    }

    pub fn to_archive(&self) -> Archive {
        let header = Header { kind: self.kind(), arch: self.config().clone() };
        let tensors = match self {
            Self::Full(p) => p.named_tensors(),
            Self::Inference(p) => p.named_tensors(),
        };
        Archive { meta: toml::to_string(&header).expect("header serializes"), tensors }
    }

    pub fn from_archive(a: &Archive) -> Result<Self, ModelError> {
        let h: Header = toml::from_str(&a.meta).map_err(|e| err(format!("bad header: {e}")))?;
        h.arch.validate()?;
        Ok(match h.kind {
            CheckpointKind::Full => Self::Full(ModelParams::from_named(&h.arch, &a.tensors)?),
            CheckpointKind::Inference => Self::Inference(InferenceParams::from_named(&h.arch, &a.tensors)?),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_archive(&Archive::load(path)?)
    }
}
