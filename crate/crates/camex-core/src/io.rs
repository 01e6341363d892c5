//! On-disk formats: `CMEX` checkpoints, TOML run configs, CSV metrics and
//! sweep tables, and JSON run summaries.
//!
//! A checkpoint is one self-describing file:
//!
//! ```text
//! "CMEX" | version: u32 | endianness marker: u32 (0x01020304)
//! config JSON (u64 length + bytes)
//! tensor table: u64 count, then per tensor
//!     name (u64 length + UTF-8) | dtype code u8 (0 = f64)
//!     rank u64 | dims u64... | payload byte offset u64
//! payload: little-endian f64s, tensors back to back in table order
//! crc32 of the payload: u32
//! ```
//!
//! All integers are little-endian. The CRC (IEEE 802.3, the same polynomial
//! zlib uses) is verified before any tensor is handed out, so a truncated or
//! bit-flipped file never yields a partial model.

use crate::error::{CamexError, Result};
use crate::merge::MergeSpec;
use crate::model::{CamexModel, ModelConfig};
use crate::sweep::SweepRow;
use crate::tensor::Tensor;
use crate::train::{MetricsLog, TrainConfig};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CMEX";
pub const CHECKPOINT_VERSION: u32 = 1;
const ENDIAN_MARKER: u32 = 0x0102_0304;
const DTYPE_F64: u8 = 0;

/// IEEE CRC-32 (reflected, polynomial 0xEDB88320), bitwise.
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc: u32 = 0xFFFF_FFFF;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

/// Typed config block of a model checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub merge: MergeSpec,
}

/// A loaded checkpoint: the raw config JSON plus named tensors in file
/// order.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(CamexError::Format {
                detail: format!(
                    "file truncated while reading {what}: need {n} bytes at offset {}, have {}",
                    self.at,
                    self.bytes.len() - self.at
                ),
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

/// Serializes a checkpoint to bytes. Deterministic: the same config and
/// tensors always produce identical output.
pub fn checkpoint_bytes(
    config: &serde_json::Value,
    tensors: &[(String, &Tensor)],
) -> Result<Vec<u8>> {
    for (name, t) in tensors {
        if !t.all_finite() {
            return Err(CamexError::Numeric {
                op: "save_checkpoint",
                detail: format!("tensor {name} contains non-finite values; refusing to save"),
            });
        }
    }
    let config_json = serde_json::to_vec(config).map_err(|e| CamexError::Format {
        detail: format!("config does not serialize: {e}"),
    })?;

    let mut payload = Vec::new();
    let mut offsets = Vec::with_capacity(tensors.len());
    for (_, t) in tensors {
        offsets.push(payload.len() as u64);
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut buf, CHECKPOINT_VERSION);
    push_u32(&mut buf, ENDIAN_MARKER);
    push_u64(&mut buf, config_json.len() as u64);
    buf.extend_from_slice(&config_json);
    push_u64(&mut buf, tensors.len() as u64);
    for ((name, t), off) in tensors.iter().zip(&offsets) {
        push_u64(&mut buf, name.len() as u64);
        buf.extend_from_slice(name.as_bytes());
        buf.push(DTYPE_F64);
        push_u64(&mut buf, t.rank() as u64);
        for &d in t.shape() {
            push_u64(&mut buf, d as u64);
        }
        push_u64(&mut buf, *off);
    }
    buf.extend_from_slice(&payload);
    push_u32(&mut buf, crc32(&payload));
    Ok(buf)
}

/// Parses checkpoint bytes, validating magic, version, endianness and the
/// payload CRC before constructing any tensor.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, at: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CamexError::Format {
            detail: format!("bad magic {magic:02x?}; not a CMEX checkpoint"),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CamexError::Format {
            detail: format!("unsupported checkpoint version {version} (supported: {CHECKPOINT_VERSION})"),
        });
    }
    let marker = r.u32("endianness marker")?;
    if marker != ENDIAN_MARKER {
        return Err(CamexError::Format {
            detail: format!("endianness marker mismatch: {marker:#010x} vs {ENDIAN_MARKER:#010x}"),
        });
    }
    let config_len = r.u64("config length")? as usize;
    let config_bytes = r.take(config_len, "config block")?;
    let config: serde_json::Value =
        serde_json::from_slice(config_bytes).map_err(|e| CamexError::Format {
            detail: format!("config block is not valid JSON: {e}"),
        })?;
    let n_tensors = r.u64("tensor count")? as usize;
    let mut entries = Vec::with_capacity(n_tensors);
    for i in 0..n_tensors {
        let name_len = r.u64("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec()).map_err(|e| {
            CamexError::Format { detail: format!("tensor {i} name is not UTF-8: {e}") }
        })?;
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F64 {
            return Err(CamexError::Format {
                detail: format!("tensor {name}: unknown dtype code {dtype}"),
            });
        }
        let rank = r.u64("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let offset = r.u64("payload offset")? as usize;
        entries.push((name, shape, offset));
    }
    // Everything that remains, minus the trailing CRC, is payload.
    if bytes.len() < r.at + 4 {
        return Err(CamexError::Format {
            detail: "file truncated before payload CRC".into(),
        });
    }
    let payload = &bytes[r.at..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let actual_crc = crc32(payload);
    if stored_crc != actual_crc {
        return Err(CamexError::Format {
            detail: format!(
                "payload CRC mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
            ),
        });
    }
    let mut tensors = Vec::with_capacity(entries.len());
    for (name, shape, offset) in entries {
        let numel: usize = shape.iter().product();
        let end = offset + numel * 8;
        if end > payload.len() {
            return Err(CamexError::Format {
                detail: format!(
                    "tensor {name}: payload range {offset}..{end} exceeds payload size {}",
                    payload.len()
                ),
            });
        }
        let data: Vec<f64> = payload[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Tensor::from_vec(shape, data)?));
    }
    Ok(Checkpoint { config, tensors })
}

pub fn save_checkpoint(
    path: &Path,
    config: &serde_json::Value,
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    let bytes = checkpoint_bytes(config, tensors)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    parse_checkpoint(&bytes)
}

/// Saves a model plus the merge rule it was trained with.
pub fn save_model(path: &Path, model: &CamexModel, merge: &MergeSpec) -> Result<()> {
    let config = CheckpointConfig { model: model.cfg.clone(), merge: merge.clone() };
    let config_json = serde_json::to_value(&config).map_err(|e| CamexError::Format {
        detail: format!("model config does not serialize: {e}"),
    })?;
    let named: Vec<(String, &Tensor)> = model.named_tensors();
    save_checkpoint(path, &config_json, &named)
}

/// Loads a model checkpoint, rebuilding the exact parameter layout and
/// filling every tensor from the file. The tensor set must match the
/// config's layout name for name.
pub fn load_model(path: &Path) -> Result<(CamexModel, MergeSpec)> {
    let ckpt = load_checkpoint(path)?;
    let config: CheckpointConfig =
        serde_json::from_value(ckpt.config.clone()).map_err(|e| CamexError::Format {
            detail: format!("checkpoint config does not describe a model: {e}"),
        })?;
    let mut model = CamexModel::init(&config.model, 0)?;
    let mut by_name: HashMap<&str, &Tensor> =
        ckpt.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    for (name, dst) in model.named_tensors_mut() {
        let src = by_name.remove(name.as_str()).ok_or_else(|| CamexError::Format {
            detail: format!("checkpoint is missing tensor {name}"),
        })?;
        if src.shape() != dst.shape() {
            return Err(CamexError::Format {
                detail: format!(
                    "tensor {name}: checkpoint shape {:?} does not match layout {:?}",
                    src.shape(),
                    dst.shape()
                ),
            });
        }
        *dst = src.clone();
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(CamexError::Format {
            detail: format!("checkpoint has tensor {extra} that the layout does not"),
        });
    }
    Ok((model, config.merge))
}

/// Reads and validates a run config.
pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path)?;
    let cfg: TrainConfig = toml::from_str(&text).map_err(|e| CamexError::Config {
        detail: format!("{}: {e}", path.display()),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_train_config(path: &Path, cfg: &TrainConfig) -> Result<()> {
    let text = toml::to_string_pretty(cfg).map_err(|e| CamexError::Config {
        detail: format!("config does not serialize: {e}"),
    })?;
    fs::write(path, text)?;
    Ok(())
}

/// Training metrics as CSV: `step,epoch,loss,metric,seed,config_hash`.
/// The metric column is filled on epoch-final steps only.
pub fn metrics_csv(log: &MetricsLog) -> String {
    let mut out = String::from("step,epoch,loss,metric,seed,config_hash\n");
    for r in &log.records {
        let metric = r.metric.map(|m| m.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step, r.epoch, r.loss, metric, log.seed, log.config_hash
        )
        .expect("string writes are infallible");
    }
    out
}

/// Sweep table as CSV: `axis,value,seed,metric`; aggregate rows leave the
/// seed column empty.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("axis,value,seed,metric\n");
    for r in rows {
        let seed = r.seed.map(|s| s.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{}", r.axis, r.value, seed, r.metric)
            .expect("string writes are infallible");
    }
    out
}

/// Machine-readable run summary (pretty JSON, trailing newline).
pub fn run_summary_json(log: &MetricsLog) -> Result<String> {
    #[derive(Serialize)]
    struct Summary<'a> {
        config_hash: &'a str,
        seed: u64,
        steps: usize,
        final_loss: Option<f64>,
        final_metric: f64,
        metric_kind: &'a crate::train::MetricKind,
        params: &'a crate::model::ParamCounts,
        wall_time_s: f64,
    }
    let summary = Summary {
        config_hash: &log.config_hash,
        seed: log.seed,
        steps: log.records.len(),
        final_loss: log.records.last().map(|r| r.loss),
        final_metric: log.final_metric,
        metric_kind: &log.metric_kind,
        params: &log.params,
        wall_time_s: log.wall_time_s,
    };
    let mut text = serde_json::to_string_pretty(&summary).map_err(|e| CamexError::Format {
        detail: format!("summary does not serialize: {e}"),
    })?;
    text.push('\n');
    Ok(text)
}
