//! Binary checkpoint format.
//!
//! ```text
//! magic     8 bytes   "CLABNET\0"
//! version   u32 LE    1
//! hdr_len   u32 LE    length of the JSON header
//! header    hdr_len bytes of UTF-8 JSON
//! tensors   f64 LE values of every tensor, in header order
//! ```

use serde::{Deserialize, Serialize};

use super::{NetConfig, ParamSet, ScoreNet, Tensor, TrainConfig, TrainMode};
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CLABNET\0";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    net: NetConfig,
    tokens: Vec<String>,
    schedule: ScheduleConfig,
    mode: Option<TrainMode>,
    train: Option<TrainConfig>,
    tensors: Vec<TensorHeader>,
}

/// A network plus the context it was trained in.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: ScoreNet,
    pub schedule: ScheduleConfig,
    pub mode: Option<TrainMode>,
    pub train: Option<TrainConfig>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        net: ckpt.net.config().clone(),
        tokens: ckpt.net.tokens().to_vec(),
        schedule: ckpt.schedule,
        mode: ckpt.mode,
        train: ckpt.train.clone(),
        tensors: ckpt
            .net
            .params()
            .tensors
            .iter()
            .map(|t| TensorHeader {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let hdr_len = u32::try_from(json.len())
        .map_err(|_| Error::Checkpoint("header too large".into()))?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * ckpt.net.params().len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&hdr_len.to_le_bytes());
    out.extend_from_slice(&json);
    for t in &ckpt.net.params().tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Checkpoint(format!("truncated {what}")));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

fn read_u32(buf: &mut &[u8], what: &str) -> Result<u32> {
    let b = take(buf, 4, what)?;
    Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut buf = bytes;
    if take(&mut buf, 8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut buf, "version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hdr_len = read_u32(&mut buf, "header length")? as usize;
    let header: Header = serde_json::from_slice(take(&mut buf, hdr_len, "header")?)
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;

    let mut total = 0usize;
    for t in &header.tensors {
        if t.shape.is_empty() || t.shape.len() > 2 {
            return Err(Error::Checkpoint(format!("tensor `{}` has rank {}", t.name, t.shape.len())));
        }
        let n = t
            .shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint("tensor size overflows".into()))?;
        total = total
            .checked_add(n)
            .ok_or_else(|| Error::Checkpoint("tensor size overflows".into()))?;
    }
    let expected_bytes = total
        .checked_mul(8)
        .ok_or_else(|| Error::Checkpoint("tensor size overflows".into()))?;
    if buf.len() != expected_bytes {
        return Err(Error::Checkpoint(format!(
            "expected {expected_bytes} bytes of weights, found {}",
            buf.len()
        )));
    }

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for th in header.tensors {
        let n: usize = th.shape.iter().product();
        let raw = take(&mut buf, 8 * n, "tensor data")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("tensor `{}` has non-finite values", th.name)));
        }
        tensors.push(Tensor {
            name: th.name,
            shape: th.shape,
            data,
        });
    }
    let net = ScoreNet::from_parts(header.net, header.tokens, ParamSet { tensors })?;
    Ok(Checkpoint {
        net,
        schedule: header.schedule,
        mode: header.mode,
        train: header.train,
    })
}

impl Checkpoint {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, encode_checkpoint(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        decode_checkpoint(&std::fs::read(path)?)
    }
}
