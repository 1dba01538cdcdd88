//! Binary controller checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        8 bytes  "TAMLCKPT"
//! version      u32
//! space hash   32 bytes
//! n_tasks      u64
//! n_dims       u32, then n_dims x u32 option counts
//! embedding    u32
//! hidden       u32
//! init range   f64
//! param ver.   u64
//! optimizer    u8 (0 = adam, 1 = sgd), then u64 step count
//! n_tensors    u32, then per tensor:
//!                name length u32, UTF-8 name, rows u32, cols u32, rows*cols f64
//! checksum     32 bytes, SHA-256 of everything above
//! ```
//!
//! Parameter tensors come first in canonical order, followed by the Adam
//! first moments (`adam.m.*`) and second moments (`adam.v.*`) when present.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::optimizer::{OptimizerKind, OptimizerState};
use super::params::{Architecture, ControllerParams, ParamSet};
use super::tensor::Tensor;
use crate::space::SearchSpace;

pub const MAGIC: &[u8; 8] = b"TAMLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a controller checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint is corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint was trained on a different search space (expected hash {expected}, found {found})")]
    SpaceMismatch { expected: String, found: String },
}

/// Header fields, readable without knowing the search space.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub space_hash: [u8; 32],
    pub n_tasks: u64,
    pub option_counts: Vec<usize>,
    pub architecture: Architecture,
    pub parameter_version: u64,
    pub optimizer: OptimizerKind,
    pub optimizer_step: u64,
}

pub fn encode(params: &ControllerParams, optimizer: &OptimizerState, space_hash: &[u8; 32]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(space_hash);
    buf.extend_from_slice(&(params.n_tasks() as u64).to_le_bytes());
    buf.extend_from_slice(&(params.option_counts.len() as u32).to_le_bytes());
    for &n in &params.option_counts {
        buf.extend_from_slice(&(n as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(params.arch.embedding_size as u32).to_le_bytes());
    buf.extend_from_slice(&(params.arch.hidden_size as u32).to_le_bytes());
    buf.extend_from_slice(&params.arch.init_range.to_le_bytes());
    buf.extend_from_slice(&params.version.to_le_bytes());
    buf.push(match optimizer.kind {
        OptimizerKind::Adam => 0,
        OptimizerKind::Sgd => 1,
    });
    buf.extend_from_slice(&optimizer.step.to_le_bytes());

    let mut tensors: Vec<(String, &Tensor)> = params.tensors.named();
    if let Some((m, v)) = &optimizer.moments {
        tensors.extend(m.named().into_iter().map(|(n, t)| (format!("adam.m.{n}"), t)));
        tensors.extend(v.named().into_iter().map(|(n, t)| (format!("adam.v.{n}"), t)));
    }
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

/// Writes to a sibling temporary file and renames it into place.
pub fn checkpoint_save(
    params: &ControllerParams,
    optimizer: &OptimizerState,
    space_hash: &[u8; 32],
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let bytes = encode(params, optimizer, space_hash);
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn checkpoint_load(
    path: impl AsRef<Path>,
    space: &SearchSpace,
) -> Result<(ControllerParams, OptimizerState), CheckpointError> {
    let bytes = fs::read(path)?;
    decode(&bytes, space)
}

pub fn inspect_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointHeader, CheckpointError> {
    let bytes = fs::read(path)?;
    let body = verified_body(&bytes)?;
    let mut r = Reader { buf: body, pos: 0 };
    read_header(&mut r)
}

pub fn decode(bytes: &[u8], space: &SearchSpace) -> Result<(ControllerParams, OptimizerState), CheckpointError> {
    let body = verified_body(bytes)?;
    let mut r = Reader { buf: body, pos: 0 };
    let header = read_header(&mut r)?;
    if header.space_hash != space.content_hash() {
        return Err(CheckpointError::SpaceMismatch {
            expected: space.content_hash_hex(),
            found: hex::encode(header.space_hash),
        });
    }
    if header.option_counts != space.option_counts() {
        return Err(CheckpointError::Corrupt("option counts disagree with the space".into()));
    }
    let n_tensors = r.u32()? as usize;
    let mut named = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| CheckpointError::Corrupt(format!("tensor `{name}` is too large")))?;
        let raw = r.take(count.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        named.push((name, Tensor::from_vec(rows, cols, data)));
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Corrupt("trailing bytes after tensors".into()));
    }

    let n_tasks = header.n_tasks as usize;
    let arch = header.architecture;
    let counts = &header.option_counts;
    let per_set = ParamSet::zeros(&arch, counts, n_tasks.max(1)).named().len();
    let expected_sets = match header.optimizer {
        OptimizerKind::Adam => 3,
        OptimizerKind::Sgd => 1,
    };
    if named.len() != per_set * expected_sets {
        return Err(CheckpointError::Corrupt(format!(
            "expected {} tensors, found {}",
            per_set * expected_sets,
            named.len()
        )));
    }
    let mut rest = named.split_off(per_set);
    let tensors = ParamSet::from_named(&arch, counts, n_tasks, named).map_err(CheckpointError::Corrupt)?;
    let moments = if header.optimizer == OptimizerKind::Adam {
        let second = rest.split_off(per_set);
        let strip = |prefix: &str, set: Vec<(String, Tensor)>| -> Result<Vec<(String, Tensor)>, CheckpointError> {
            set.into_iter()
                .map(|(n, t)| match n.strip_prefix(prefix) {
                    Some(base) => Ok((base.to_string(), t)),
                    None => Err(CheckpointError::Corrupt(format!("unexpected tensor `{n}`"))),
                })
                .collect()
        };
        let m = ParamSet::from_named(&arch, counts, n_tasks, strip("adam.m.", rest)?)
            .map_err(CheckpointError::Corrupt)?;
        let v = ParamSet::from_named(&arch, counts, n_tasks, strip("adam.v.", second)?)
            .map_err(CheckpointError::Corrupt)?;
        Some((m, v))
    } else {
        None
    };
    let params = ControllerParams::from_parts(arch, counts.clone(), tensors, header.parameter_version)
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let optimizer = OptimizerState {
        kind: header.optimizer,
        step: header.optimizer_step,
        moments,
    };
    Ok((params, optimizer))
}

fn verified_body(bytes: &[u8]) -> Result<&[u8], CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return if bytes.len() < MAGIC.len() && MAGIC.starts_with(bytes) {
            Err(CheckpointError::Truncated)
        } else {
            Err(CheckpointError::BadMagic)
        };
    }
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(CheckpointError::Truncated);
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        // A short read and a flipped byte both land here; the header tells them apart.
        let mut r = Reader { buf: body, pos: 0 };
        return match read_header(&mut r) {
            Err(CheckpointError::Truncated) => Err(CheckpointError::Truncated),
            _ => Err(CheckpointError::Corrupt("checksum mismatch (file truncated or modified)".into())),
        };
    }
    Ok(body)
}

fn read_header(r: &mut Reader<'_>) -> Result<CheckpointHeader, CheckpointError> {
    if r.take(8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let format_version = r.u32()?;
    if format_version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(format_version));
    }
    let space_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let n_tasks = r.u64()?;
    if n_tasks == 0 {
        return Err(CheckpointError::Corrupt("checkpoint has no tasks".into()));
    }
    let n_dims = r.u32()? as usize;
    let option_counts = (0..n_dims)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let embedding_size = r.u32()? as usize;
    let hidden_size = r.u32()? as usize;
    let init_range = r.f64()?;
    let parameter_version = r.u64()?;
    let optimizer = match r.u8()? {
        0 => OptimizerKind::Adam,
        1 => OptimizerKind::Sgd,
        other => return Err(CheckpointError::Corrupt(format!("unknown optimizer tag {other}"))),
    };
    let optimizer_step = r.u64()?;
    Ok(CheckpointHeader {
        format_version,
        space_hash,
        n_tasks,
        option_counts,
        architecture: Architecture {
            embedding_size,
            hidden_size,
            init_range,
        },
        parameter_version,
        optimizer,
        optimizer_step,
    })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        if end > self.buf.len() {
            return Err(CheckpointError::Truncated);
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
