//! A victim accelerator the attacker can query for power traces.

use crate::error::Result;
use crate::noise::{add_noise, NoiseSpec};
use crate::power::generate_trace_set;
use crate::seed;
use crate::systolic::{InputSample, WeightMatrix};
use crate::trace::{SetPurpose, TraceSet};

/// Anything that returns one power trace per submitted input.
pub trait TraceSource {
    fn n(&self) -> usize;
    fn acquire(&mut self, samples: &[InputSample]) -> Result<TraceSet>;
    /// Number of traces handed out so far.
    fn traces_acquired(&self) -> usize;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Measurement {
    Noiseless,
    /// Sigma recalibrated on every acquired set.
    Snr(f64),
    Sigma(f64),
}

#[derive(Debug, Clone)]
pub struct SimulatedDevice {
    weights: WeightMatrix,
    measurement: Measurement,
    seed: u64,
    acquisitions: u64,
    acquired: usize,
}

impl SimulatedDevice {
    pub fn new(weights: WeightMatrix, measurement: Measurement, seed: u64) -> Self {
        Self { weights, measurement, seed, acquisitions: 0, acquired: 0 }
    }

    pub fn noiseless(weights: WeightMatrix) -> Self {
        Self::new(weights, Measurement::Noiseless, 0)
    }

    pub fn weights(&self) -> &WeightMatrix {
        &self.weights
    }
}

impl TraceSource for SimulatedDevice {
    fn n(&self) -> usize {
        self.weights.n()
    }

    fn acquire(&mut self, samples: &[InputSample]) -> Result<TraceSet> {
        let k = self.acquisitions;
        self.acquisitions += 1;
        let clean = generate_trace_set(&self.weights, samples, seed::derive(self.seed, "acquire", k), SetPurpose::Attack)?;
        self.acquired += clean.len();
        let noise_seed = seed::derive(self.seed, "acquire-noise", k);
        let spec = match self.measurement {
            Measurement::Noiseless => return Ok(clean),
            Measurement::Snr(snr) if snr.is_infinite() => return Ok(clean),
            Measurement::Snr(snr) => NoiseSpec::for_snr(&clean, snr, noise_seed)?,
            Measurement::Sigma(s) => NoiseSpec::gaussian(s, noise_seed)?,
        };
        Ok(add_noise(&clean, &spec))
    }

    fn traces_acquired(&self) -> usize {
        self.acquired
    }
}
