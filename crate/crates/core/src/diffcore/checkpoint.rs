//! Binary checkpoints: a JSON header describing names and shapes, followed
//! by raw little-endian f64 arrays (value, then Adam m and v per parameter,
//! in header order). Restoring reproduces training state exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DiffError, ParamStore, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Header metadata embedded in every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub precision: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    /// Caller-defined payload (e.g. the model architecture).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

impl CheckpointMeta {
    pub fn new(tool_version: &str, config_hash: &str, seed: u64) -> CheckpointMeta {
        CheckpointMeta {
            format_version: CHECKPOINT_FORMAT_VERSION,
            precision: "f64".to_string(),
            tool_version: tool_version.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            extra: serde_json::Value::Null,
        }
    }

    pub fn with_extra(mut self, extra: serde_json::Value) -> CheckpointMeta {
        self.extra = extra;
        self
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    meta: CheckpointMeta,
    step: u64,
    params: Vec<ParamHeader>,
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
}

fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn save_checkpoint(
    store: &ParamStore,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<(), DiffError> {
    let header = Header {
        meta: meta.clone(),
        step: store.step_count(),
        params: store
            .params()
            .iter()
            .map(|p| ParamHeader { name: p.name.clone(), shape: p.value.shape().to_vec() })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| DiffError::Checkpoint(format!("header encode: {e}")))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for p in store.params() {
        write_f64s(&mut w, p.value.data())?;
        write_f64s(&mut w, &p.m)?;
        write_f64s(&mut w, &p.v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointMeta), DiffError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| DiffError::Checkpoint(format!("header decode: {e}")))?;
    if header.meta.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(DiffError::Checkpoint(format!(
            "unsupported format version {}",
            header.meta.format_version
        )));
    }
    if header.meta.precision != "f64" {
        return Err(DiffError::Checkpoint(format!(
            "unsupported precision {:?}",
            header.meta.precision
        )));
    }
    let mut store = ParamStore::new();
    for ph in &header.params {
        let numel: usize = ph.shape.iter().product();
        let value = read_f64s(&mut r, numel)?;
        let m = read_f64s(&mut r, numel)?;
        let v = read_f64s(&mut r, numel)?;
        store.register(&ph.name, Tensor::new(ph.shape.clone(), value)?)?;
        let idx = store.param_index(&ph.name)?;
        store.params_mut()[idx].m = m;
        store.params_mut()[idx].v = v;
    }
    store.set_step(header.step);
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(DiffError::Checkpoint("trailing bytes after parameter data".into()));
    }
    Ok((store, header.meta))
}
