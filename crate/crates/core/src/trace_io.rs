//! Binary and CSV persistence for trace sets, plus JSON artefacts.
//!
//! Binary layout (all integers u64 little-endian):
//!
//! ```text
//! magic "SCATRC01" | n | T | N | N*T f64 LE values | meta length | meta JSON
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{PowerTrace, TraceMeta, TraceSet};

pub const MAGIC: &[u8; 8] = b"SCATRC01";
const MAGIC_FAMILY: &[u8; 6] = b"SCATRC";
const HEADER_LEN: usize = 8 + 3 * 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceFileHeader {
    pub n: u64,
    pub trace_len: u64,
    pub count: u64,
}

impl TraceFileHeader {
    pub fn payload_len(&self) -> Option<usize> {
        (self.count as usize).checked_mul(self.trace_len as usize)?.checked_mul(8)
    }
}

#[derive(Serialize, Deserialize)]
struct FileMeta {
    meta: TraceMeta,
    sample_ids: Vec<u64>,
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8], overwrite: bool) -> Result<()> {
    if !overwrite && path.exists() {
        return Err(Error::Exists(path.to_path_buf()));
    }
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    if overwrite {
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    } else {
        tmp.persist_noclobber(path).map_err(|e| match e.error.kind() {
            std::io::ErrorKind::AlreadyExists => Error::Exists(path.to_path_buf()),
            _ => Error::Io(e.error),
        })?;
    }
    Ok(())
}

pub fn encode_trace_set(ts: &TraceSet) -> Result<Vec<u8>> {
    if ts.is_empty() {
        return Err(Error::Empty("trace set"));
    }
    let t = ts.trace_len();
    let meta = serde_json::to_vec(&FileMeta {
        meta: ts.meta.clone(),
        sample_ids: ts.traces.iter().map(|tr| tr.sample_id).collect(),
    })?;
    let mut out = Vec::with_capacity(HEADER_LEN + ts.len() * t * 8 + 8 + meta.len());
    out.extend_from_slice(MAGIC);
    for v in [ts.meta.n as u64, t as u64, ts.len() as u64] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for tr in &ts.traces {
        for v in &tr.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    Ok(out)
}

fn u64_at(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"))
}

pub fn read_header(bytes: &[u8]) -> Result<TraceFileHeader> {
    if bytes.len() < 8 {
        return Err(Error::Format("file too short for a trace header".into()));
    }
    if &bytes[..8] != MAGIC {
        if &bytes[..6] == MAGIC_FAMILY {
            return Err(Error::Version { found: String::from_utf8_lossy(&bytes[..8]).into_owned() });
        }
        return Err(Error::Format("not a trace file (bad magic)".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format("truncated header".into()));
    }
    Ok(TraceFileHeader { n: u64_at(bytes, 8), trace_len: u64_at(bytes, 16), count: u64_at(bytes, 24) })
}

pub fn decode_trace_set(bytes: &[u8]) -> Result<TraceSet> {
    let h = read_header(bytes)?;
    if h.count == 0 {
        return Err(Error::Empty("trace file"));
    }
    let payload = h.payload_len().ok_or_else(|| Error::Format("header sizes overflow".into()))?;
    let meta_at = HEADER_LEN + payload;
    if bytes.len() < meta_at + 8 {
        return Err(Error::Format(format!(
            "truncated payload: header announces {payload} bytes, file holds {}",
            bytes.len().saturating_sub(HEADER_LEN)
        )));
    }
    let meta_len = u64_at(bytes, meta_at) as usize;
    let blob = &bytes[meta_at + 8..];
    if blob.len() != meta_len {
        return Err(Error::Format(format!("metadata length {meta_len} does not match {} remaining bytes", blob.len())));
    }
    let fm: FileMeta = serde_json::from_slice(blob)?;
    let t = h.trace_len as usize;
    if fm.meta.trace_len != t || fm.meta.n as u64 != h.n || fm.sample_ids.len() as u64 != h.count {
        return Err(Error::Format("metadata disagrees with header".into()));
    }
    let traces = bytes[HEADER_LEN..meta_at]
        .chunks_exact(t * 8)
        .zip(fm.sample_ids)
        .map(|(row, id)| PowerTrace {
            sample_id: id,
            values: row.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect(),
        })
        .collect();
    TraceSet::new(fm.meta, traces)
}

pub fn write_trace_set(ts: &TraceSet, path: &Path, overwrite: bool) -> Result<()> {
    write_atomic(path, &encode_trace_set(ts)?, overwrite)
}

pub fn read_trace_set(path: &Path) -> Result<TraceSet> {
    decode_trace_set(&fs::read(path)?)
}

/// One row per trace: `sample_id,c1,...,cT`. Values use the shortest
/// representation that parses back to the same float.
pub fn encode_csv(ts: &TraceSet) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["sample_id".to_string()];
    header.extend((1..=ts.trace_len()).map(|c| format!("c{c}")));
    w.write_record(&header).map_err(csv_err)?;
    for tr in &ts.traces {
        let mut rec = vec![tr.sample_id.to_string()];
        rec.extend(tr.values.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

pub fn write_csv(ts: &TraceSet, path: &Path, overwrite: bool) -> Result<()> {
    write_atomic(path, &encode_csv(ts)?, overwrite)
}

/// Parses traces written by [`write_csv`].
pub fn read_csv_traces(path: &Path) -> Result<Vec<PowerTrace>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let mut fields = rec.iter();
        let id = fields
            .next()
            .ok_or_else(|| Error::Format("empty csv row".into()))?
            .parse::<u64>()
            .map_err(|e| Error::Format(format!("sample id: {e}")))?;
        let values = fields
            .map(|f| f.parse::<f64>().map_err(|e| Error::Format(format!("value {f:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(PowerTrace { sample_id: id, values });
    }
    Ok(out)
}

/// Rebuilds a trace set from CSV values and separately stored metadata.
pub fn read_csv(path: &Path, meta: TraceMeta) -> Result<TraceSet> {
    TraceSet::new(meta, read_csv_traces(path)?)
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path, overwrite: bool) -> Result<()> {
    write_atomic(path, &to_json_bytes(value)?, overwrite)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
