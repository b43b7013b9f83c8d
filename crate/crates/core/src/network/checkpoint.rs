//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SCRU" | u16 version | u32 header_len | header JSON (UTF-8)
//! u32 record_count
//! record*: u16 name_len | name | u8 dtype | u8 rank | rank x u32 dims | payload
//! u32 CRC32 of every preceding byte
//! ```
//!
//! Parameter records come first in store order, then optimizer moments
//! named `adam.m/<param>` and `adam.v/<param>`.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape5, Tensor5};

use super::config::ModelConfig;
use super::model::Network;
use super::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"SCRU";
pub const FORMAT_VERSION: u16 = 1;
const DTYPE_F32: u8 = 1;
const MOMENT_M: &str = "adam.m/";
const MOMENT_V: &str = "adam.v/";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub step: u64,
    pub best_val_loss: Option<f64>,
    pub seed: u64,
}

/// Adam state. Moments are keyed by parameter name, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<(String, Tensor5<f32>)>,
    pub v: Vec<(String, Tensor5<f32>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub meta: TrainingMeta,
    pub optimizer: Option<OptimizerSnapshot>,
}

#[derive(Serialize, Deserialize)]
struct OptimHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: TrainingMeta,
    optimizer: Option<OptimHeader>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn network(&self) -> Result<Network> {
        Network::new(self.config.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            meta: self.meta.clone(),
            optimizer: self.optimizer.as_ref().map(|o| OptimHeader {
                lr: o.lr,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                t: o.t,
            }),
        };
        let json = serde_json::to_vec(&header)?;
        let mut records: Vec<(String, &Tensor5<f32>)> =
            self.params.iter().map(|(k, e)| (k.to_string(), &e.tensor)).collect();
        if let Some(o) = &self.optimizer {
            records.extend(o.m.iter().map(|(k, t)| (format!("{MOMENT_M}{k}"), t)));
            records.extend(o.v.iter().map(|(k, t)| (format!("{MOMENT_V}{k}"), t)));
        }

        let payload: usize = records.iter().map(|(k, t)| 2 + k.len() + 2 + 20 + 4 * t.numel()).sum();
        let mut buf = Vec::with_capacity(16 + json.len() + payload);
        buf.extend_from_slice(MAGIC);
        buf.write_u16::<LE>(FORMAT_VERSION).unwrap();
        buf.write_u32::<LE>(json.len() as u32).unwrap();
        buf.extend_from_slice(&json);
        buf.write_u32::<LE>(records.len() as u32).unwrap();
        for (name, t) in &records {
            let len = u16::try_from(name.len()).map_err(|_| bad(format!("record name too long: {name}")))?;
            buf.write_u16::<LE>(len).unwrap();
            buf.extend_from_slice(name.as_bytes());
            buf.write_u8(DTYPE_F32).unwrap();
            buf.write_u8(5).unwrap();
            for d in t.shape().dims() {
                buf.write_u32::<LE>(d as u32).unwrap();
            }
            for &v in t.data() {
                buf.write_f32::<LE>(v).unwrap();
            }
        }
        let crc = crc32fast::hash(&buf);
        buf.write_u32::<LE>(crc).unwrap();
        Ok(buf)
    }

    /// Parses and validates a complete checkpoint. Nothing is returned
    /// unless every record checks out.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic, not a checkpoint file"));
        }
        if bytes.len() < 4 + 2 + 4 + 4 + 4 {
            return Err(bad(format!("truncated: only {} bytes", bytes.len())));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(bad(format!(
                "format version {version} not supported (expected {FORMAT_VERSION})"
            )));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(bad(format!(
                "CRC mismatch (stored {stored:08x}, computed {actual:08x}); file truncated or corrupt"
            )));
        }

        let mut cur = Cursor::new(&body[6..]);
        let eof = |_| bad("truncated record table");
        let hlen = cur.read_u32::<LE>().map_err(eof)? as usize;
        let mut json = vec![0u8; hlen];
        cur.read_exact(&mut json).map_err(eof)?;
        let header: Header = serde_json::from_slice(&json)?;
        let count = cur.read_u32::<LE>().map_err(eof)? as usize;

        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = cur.read_u16::<LE>().map_err(eof)? as usize;
            let mut name = vec![0u8; nlen];
            cur.read_exact(&mut name).map_err(eof)?;
            let name = String::from_utf8(name).map_err(|_| bad("record name is not UTF-8"))?;
            let dtype = cur.read_u8().map_err(eof)?;
            if dtype != DTYPE_F32 {
                return Err(bad(format!("record '{name}': unsupported dtype tag {dtype}")));
            }
            let rank = cur.read_u8().map_err(eof)?;
            if rank != 5 {
                return Err(bad(format!("record '{name}': rank {rank}, expected 5")));
            }
            let mut dims = [0usize; 5];
            for d in &mut dims {
                *d = cur.read_u32::<LE>().map_err(eof)? as usize;
            }
            let shape = Shape5::from(dims);
            let remaining = body.len() - 6 - cur.position() as usize;
            if shape.numel().saturating_mul(4) > remaining {
                return Err(bad(format!("record '{name}': payload truncated")));
            }
            let mut data = vec![0f32; shape.numel()];
            cur.read_f32_into::<LE>(&mut data).map_err(eof)?;
            records.push((name, Tensor5::from_vec(shape, data)?));
        }
        if (cur.position() as usize) + 6 != body.len() {
            return Err(bad("trailing bytes after record table"));
        }

        let network = Network::new(header.config.clone())?;
        let specs = network.param_specs();
        let mut rest = records.into_iter();
        let mut params = ParamStore::default();
        for spec in &specs {
            let (name, t) = rest
                .next()
                .ok_or_else(|| bad(format!("missing parameter record '{}'", spec.name)))?;
            if name != spec.name || t.shape() != spec.shape {
                return Err(bad(format!(
                    "record '{name}' {:?} does not match expected '{}' {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
            params.insert(name, spec.kind, t);
        }

        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in rest {
            if let Some(k) = name.strip_prefix(MOMENT_M) {
                m.push((k.to_string(), t));
            } else if let Some(k) = name.strip_prefix(MOMENT_V) {
                v.push((k.to_string(), t));
            } else {
                return Err(bad(format!("unexpected record '{name}'")));
            }
        }
        let optimizer = match header.optimizer {
            Some(o) => {
                for (k, t) in m.iter().chain(&v) {
                    let p = params.get(k).map_err(|_| bad(format!("moment for unknown parameter '{k}'")))?;
                    if p.shape() != t.shape() {
                        return Err(bad(format!("moment '{k}' shape {:?} != {:?}", t.shape(), p.shape())));
                    }
                }
                Some(OptimizerSnapshot {
                    lr: o.lr,
                    beta1: o.beta1,
                    beta2: o.beta2,
                    eps: o.eps,
                    t: o.t,
                    m,
                    v,
                })
            }
            None if m.is_empty() && v.is_empty() => None,
            None => return Err(bad("moment records present without optimizer header")),
        };

        Ok(Checkpoint {
            config: header.config,
            params,
            meta: header.meta,
            optimizer,
        })
    }
}

/// Writes via a sibling temp file and rename, so an interrupted save never
/// leaves a half-written checkpoint at `path`.
pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
