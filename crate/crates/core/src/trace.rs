use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::noise::NoiseSpec;
use crate::systolic::{trace_len, InputSample, RegisterPolicy, WeightMatrix};

/// Power expense per cycle for one sample; `values[t-1]` is cycle `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerTrace {
    pub sample_id: u64,
    pub values: Vec<f64>,
}

/// Profiling sets are produced with attacker-chosen weights and may carry them;
/// attack sets only record a digest.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SetPurpose {
    #[default]
    Attack,
    Profiling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub n: usize,
    pub trace_len: usize,
    pub seed: u64,
    pub weights_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<WeightMatrix>,
    pub purpose: SetPurpose,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    #[serde(default)]
    pub register_policy: RegisterPolicy,
    /// Public inputs, aligned with the traces by index.
    #[serde(default)]
    pub inputs: Vec<InputSample>,
    #[serde(default)]
    pub params: BTreeMap<String, serde_json::Value>,
}

impl TraceMeta {
    pub fn new(weights: &WeightMatrix, seed: u64, purpose: SetPurpose, inputs: Vec<InputSample>) -> Self {
        let n = weights.n();
        Self {
            n,
            trace_len: trace_len(n),
            seed,
            weights_digest: weights_digest(weights),
            weights: (purpose == SetPurpose::Profiling).then(|| weights.clone()),
            purpose,
            noise: None,
            register_policy: RegisterPolicy::ResetPerSample,
            inputs,
            params: BTreeMap::new(),
        }
    }
}

/// SHA-256 over the dimension and the row-major weight bytes.
pub fn weights_digest(w: &WeightMatrix) -> String {
    let mut h = Sha256::new();
    h.update((w.n() as u64).to_le_bytes());
    h.update(w.as_slice());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSet {
    pub meta: TraceMeta,
    pub traces: Vec<PowerTrace>,
}

impl TraceSet {
    pub fn new(meta: TraceMeta, traces: Vec<PowerTrace>) -> Result<Self> {
        if traces.is_empty() {
            return Err(Error::Empty("trace set"));
        }
        if let Some(bad) = traces.iter().find(|t| t.values.len() != meta.trace_len) {
            return Err(Error::LengthMismatch { left: meta.trace_len, right: bad.values.len() });
        }
        if !meta.inputs.is_empty() && meta.inputs.len() != traces.len() {
            return Err(Error::LengthMismatch { left: traces.len(), right: meta.inputs.len() });
        }
        Ok(Self { meta, traces })
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn trace_len(&self) -> usize {
        self.meta.trace_len
    }

    pub fn inputs(&self) -> &[InputSample] {
        &self.meta.inputs
    }

    /// Values at 0-based cycle index `t` across all traces.
    pub fn column(&self, t: usize) -> Vec<f64> {
        self.traces.iter().map(|tr| tr.values[t]).collect()
    }

    /// Per-sample total energy.
    pub fn energies(&self) -> Vec<f64> {
        self.traces.iter().map(|t| t.values.iter().sum()).collect()
    }

    /// Keeps the traces at `idx` (and their inputs), in that order.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let mut meta = self.meta.clone();
        if !meta.inputs.is_empty() {
            meta.inputs = idx.iter().map(|&i| self.meta.inputs[i].clone()).collect();
        }
        Self::new(meta, idx.iter().map(|&i| self.traces[i].clone()).collect())
    }
}
