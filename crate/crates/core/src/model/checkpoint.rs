//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `XAKD`, format version `u32`, the ArchSpec
//! as canonical JSON (`u32` length + bytes), a `u32` tensor count, then per
//! tensor: name (`u32` length + UTF-8), dtype tag `u8` (0 = f32, 1 = i8), and
//! the tensor in the `{rank, dims, payload}` encoding.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{count_params, param_layout, ArchSpec, Model};
use crate::error::{Error, Result};
use crate::nn::ParamMap;
use crate::tensor::{read_header, read_i8_payload, write_i8_tensor, DType, Tensor};

pub const MAGIC: &[u8; 4] = b"XAKD";
pub const FORMAT_VERSION: u32 = 1;

/// Namespaces that never hold model parameters.
pub const RESERVED_NAMESPACES: [&str; 7] = ["buffers", "ema", "pred", "pca", "gl", "disc", "scales"];

#[derive(Clone, Debug, PartialEq)]
pub enum Stored {
    F32(Tensor<f32>),
    I8 { shape: Vec<usize>, data: Vec<i8> },
}

impl Stored {
    pub fn shape(&self) -> &[usize] {
        match self {
            Stored::F32(t) => t.shape(),
            Stored::I8 { shape, .. } => shape,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    /// Bytes this entry occupies in the container, header included.
    pub fn encoded_len(&self, name: &str) -> usize {
        let elem = match self {
            Stored::F32(_) => 4,
            Stored::I8 { .. } => 1,
        };
        4 + name.len() + 1 + 4 + 4 * self.shape().len() + elem * self.numel()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ArchSpec,
    pub tensors: BTreeMap<String, Stored>,
}

fn is_reserved(name: &str) -> bool {
    RESERVED_NAMESPACES
        .iter()
        .any(|ns| name.len() > ns.len() && name.starts_with(ns) && name.as_bytes()[ns.len()] == b'.')
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut impl Read, limit: usize) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > limit {
        return Err(Error::Checkpoint(format!("string of {n} bytes exceeds limit")));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(e.to_string()))
}

impl Checkpoint {
    pub fn new(spec: ArchSpec) -> Self {
        Self {
            spec,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert_map(&mut self, namespace: Option<&str>, map: &ParamMap<f32>) {
        for (k, v) in map {
            let name = match namespace {
                Some(ns) => format!("{ns}.{k}"),
                None => k.clone(),
            };
            self.tensors.insert(name, Stored::F32(v.clone()));
        }
    }

    /// f32 entries under `ns.` with the prefix stripped.
    pub fn namespace(&self, ns: &str) -> ParamMap<f32> {
        let prefix = format!("{ns}.");
        self.tensors
            .iter()
            .filter_map(|(k, v)| match v {
                Stored::F32(t) => k.strip_prefix(&prefix).map(|s| (s.to_string(), t.clone())),
                Stored::I8 { .. } => None,
            })
            .collect()
    }

    pub fn has_namespace(&self, ns: &str) -> bool {
        let prefix = format!("{ns}.");
        self.tensors.keys().any(|k| k.starts_with(&prefix))
    }

    /// Model-parameter entries (outside every reserved namespace).
    pub fn model_entries(&self) -> impl Iterator<Item = (&String, &Stored)> {
        self.tensors.iter().filter(|(k, _)| !is_reserved(k))
    }

    /// Checks the stored parameters against the spec's symbolic layout.
    pub fn validate(&self) -> Result<()> {
        let layout = param_layout(&self.spec)?;
        let expected = count_params(&self.spec)?;
        let stored: usize = self.model_entries().map(|(_, v)| v.numel()).sum();
        if stored != expected {
            return Err(Error::Checkpoint(format!(
                "payload holds {stored} parameters, spec requires {expected}"
            )));
        }
        for slot in &layout {
            match self.tensors.get(&slot.name) {
                Some(t) if t.shape() == slot.shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "`{}` has shape {:?}, spec requires {:?}",
                        slot.name,
                        t.shape(),
                        slot.shape
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter `{}`", slot.name))),
            }
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        write_str(w, &self.spec.to_canonical_json())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_str(w, name)?;
            match t {
                Stored::F32(t) => {
                    w.write_all(&[DType::F32 as u8])?;
                    t.write_to(w)?;
                }
                Stored::I8 { shape, data } => {
                    w.write_all(&[DType::I8 as u8])?;
                    write_i8_tensor(w, shape, data)?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let spec: ArchSpec = serde_json::from_str(&read_str(r, 1 << 20)?)?;
        let n = read_u32(r)? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..n {
            let name = read_str(r, 4096)?;
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag)?;
            let shape = read_header(r)?;
            let t = match tag[0] {
                0 => Stored::F32(Tensor::read_payload(r, shape)?),
                1 => {
                    let data = read_i8_payload(r, &shape)?;
                    Stored::I8 { shape, data }
                }
                other => return Err(Error::Checkpoint(format!("unknown dtype tag {other}"))),
            };
            tensors.insert(name, t);
        }
        let ck = Self { spec, tensors };
        ck.validate()?;
        Ok(ck)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingCheckpoint(path.to_path_buf()));
        }
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Size of the fixed part preceding the tensor entries.
    pub fn header_len(&self) -> usize {
        4 + 4 + 4 + self.spec.to_canonical_json().len() + 4
    }
}

impl Model<f32> {
    /// Parameters at top level, buffers under `buffers.`.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.spec.clone());
        ck.insert_map(None, &self.params);
        ck.insert_map(Some("buffers"), &self.buffers);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.validate()?;
        let mut params = ParamMap::new();
        for (k, v) in ck.model_entries() {
            match v {
                Stored::F32(t) => {
                    params.insert(k.clone(), t.clone());
                }
                Stored::I8 { .. } => {
                    return Err(Error::Checkpoint(format!(
                        "`{k}` is quantized; dequantize before building a float model"
                    )))
                }
            }
        }
        let hook_layer = match ck.spec.kind {
            super::ArchKind::Vit => format!("blocks.{}", ck.spec.depth.saturating_sub(1)),
            _ => format!("stages.{}", ck.spec.channel_plan.len().saturating_sub(1)),
        };
        Ok(Self {
            spec: ck.spec.clone(),
            params,
            buffers: ck.namespace("buffers"),
            hook_layer,
        })
    }
}
