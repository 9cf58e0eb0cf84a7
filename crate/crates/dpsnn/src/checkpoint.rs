//! Self-describing binary snapshot of a training run: network descriptor,
//! parameters, optimizer state, and the privacy ledger, so evaluation and
//! resumption need nothing beyond the file.
//!
//! Layout (little-endian): magic "DPSN", format version, descriptor string,
//! FNV-1a hash of the descriptor, epoch, parameter blob as 32-bit floats,
//! optimizer step and hyperparameters, both moment vectors, then an
//! optional ledger block. The hash pins the canonical parameter ordering;
//! a file whose descriptor and hash disagree is refused.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::accountant::PrivacyLedger;
use crate::dp_optimizer::OptimizerState;
use crate::network::{NetworkSpec, PlanError};

const MAGIC: [u8; 4] = *b"DPSN";
const VERSION: u32 = 1;

#[derive(Error, Debug)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad magic {found:?}, not a checkpoint file")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {found}")]
    UnsupportedVersion { found: u32 },
    #[error("descriptor hash mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    HashMismatch { stored: u64, computed: u64 },
    #[error("file ends inside {field}")]
    Truncated { field: &'static str },
    #[error("descriptor is not valid utf-8")]
    DescriptorNotUtf8,
    #[error("embedded descriptor is unusable: {0}")]
    BadDescriptor(PlanError),
    #[error("parameter blob holds {found} values but the descriptor needs {expected}")]
    ParamCountMismatch { expected: usize, found: usize },
    #[error("{extra} unexpected bytes after the final field")]
    TrailingBytes { extra: usize },
}

/// Everything a resumed or evaluated run needs.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub descriptor: String,
    pub epoch: u32,
    pub params: Vec<f32>,
    pub opt: OptimizerState<f32>,
    pub ledger: Option<PrivacyLedger>,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for &v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 8);
    for &v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), CheckpointError> {
    let n = ck.params.len();
    if ck.opt.m.len() != n || ck.opt.v.len() != n {
        return Err(CheckpointError::ParamCountMismatch {
            expected: n,
            found: ck.opt.m.len().min(ck.opt.v.len()),
        });
    }
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let desc = ck.descriptor.as_bytes();
    out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    out.extend_from_slice(desc);
    out.extend_from_slice(&fnv1a64(desc).to_le_bytes());
    out.extend_from_slice(&ck.epoch.to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    push_f32s(&mut out, &ck.params);
    out.extend_from_slice(&ck.opt.step.to_le_bytes());
    for h in [
        ck.opt.learning_rate,
        ck.opt.beta1,
        ck.opt.beta2,
        ck.opt.eps,
        ck.opt.weight_decay,
    ] {
        out.extend_from_slice(&h.to_le_bytes());
    }
    push_f32s(&mut out, &ck.opt.m);
    push_f32s(&mut out, &ck.opt.v);
    match &ck.ledger {
        None => out.push(0),
        Some(ledger) => {
            out.push(1);
            out.extend_from_slice(&ledger.noise_scale.to_le_bytes());
            out.extend_from_slice(&ledger.sampling_rate.to_le_bytes());
            out.extend_from_slice(&ledger.steps.to_le_bytes());
            out.extend_from_slice(&(ledger.orders.len() as u32).to_le_bytes());
            push_f64s(&mut out, &ledger.orders);
            push_f64s(&mut out, &ledger.per_step);
        }
    }
    std::fs::write(path, &out)
        .map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(CheckpointError::Truncated { field })?;
        let slice = &self.buf[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn f64(&mut self, field: &'static str) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn f32_vec(&mut self, len: usize, field: &'static str) -> Result<Vec<f32>, CheckpointError> {
        let bytes = len
            .checked_mul(4)
            .ok_or(CheckpointError::Truncated { field })
            .and_then(|n| self.take(n, field))?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn f64_vec(&mut self, len: usize, field: &'static str) -> Result<Vec<f64>, CheckpointError> {
        let bytes = len
            .checked_mul(8)
            .ok_or(CheckpointError::Truncated { field })
            .and_then(|n| self.take(n, field))?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let buf = std::fs::read(path)
        .map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    let mut r = Reader { buf: &buf, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version });
    }
    let desc_len = r.u32("descriptor length")? as usize;
    let desc_bytes = r.take(desc_len, "descriptor")?;
    let stored = r.u64("descriptor hash")?;
    let computed = fnv1a64(desc_bytes);
    if stored != computed {
        return Err(CheckpointError::HashMismatch { stored, computed });
    }
    let descriptor = std::str::from_utf8(desc_bytes)
        .map_err(|_| CheckpointError::DescriptorNotUtf8)?
        .to_string();
    let spec = NetworkSpec::from_descriptor(&descriptor).map_err(CheckpointError::BadDescriptor)?;
    let expected = spec.plan::<f32>().map_err(CheckpointError::BadDescriptor)?.param_len;
    let epoch = r.u32("epoch")?;
    let param_len = r.u64("parameter count")? as usize;
    if param_len != expected {
        return Err(CheckpointError::ParamCountMismatch { expected, found: param_len });
    }
    let params = r.f32_vec(param_len, "parameters")?;
    let step = r.u64("optimizer step")?;
    let learning_rate = r.f64("learning rate")?;
    let beta1 = r.f64("beta1")?;
    let beta2 = r.f64("beta2")?;
    let eps = r.f64("adam epsilon")?;
    let weight_decay = r.f64("weight decay")?;
    let m = r.f32_vec(param_len, "first moments")?;
    let v = r.f32_vec(param_len, "second moments")?;
    let ledger = match r.take(1, "ledger flag")?[0] {
        0 => None,
        _ => {
            let noise_scale = r.f64("ledger noise scale")?;
            let sampling_rate = r.f64("ledger sampling rate")?;
            let steps = r.u64("ledger steps")?;
            let n_orders = r.u32("ledger order count")? as usize;
            let orders = r.f64_vec(n_orders, "ledger orders")?;
            let per_step = r.f64_vec(n_orders, "ledger per-step values")?;
            Some(PrivacyLedger { orders, per_step, steps, sampling_rate, noise_scale })
        }
    };
    if r.pos != buf.len() {
        return Err(CheckpointError::TrailingBytes { extra: buf.len() - r.pos });
    }
    Ok(Checkpoint {
        descriptor,
        epoch,
        params,
        opt: OptimizerState {
            m,
            v,
            step,
            learning_rate,
            beta1,
            beta2,
            eps,
            weight_decay,
        },
        ledger,
    })
}
