//! Additive measurement noise at a target SNR.
//!
//! SNR is the ratio of signal variance to noise variance, where the signal
//! variance is taken at the cycle of maximum variance of a noiseless reference
//! set. Noise is i.i.d. zero-mean Gaussian per estimation point.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::stats;
use crate::trace::{PowerTrace, TraceSet};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseDistribution {
    #[default]
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub distribution: NoiseDistribution,
    pub sigma: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_snr: Option<f64>,
}

impl NoiseSpec {
    pub fn gaussian(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma must be finite and >= 0, got {sigma}")));
        }
        Ok(Self { distribution: NoiseDistribution::Gaussian, sigma, seed, target_snr: None })
    }

    /// Spec whose sigma realises `snr` against the noiseless `reference` set.
    pub fn for_snr(reference: &TraceSet, snr: f64, seed: u64) -> Result<Self> {
        let sigma = calibrate_sigma(reference, snr)?;
        Ok(Self { target_snr: Some(snr), ..Self::gaussian(sigma, seed)? })
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    /// Noise value for point `(trace, cycle)` of the stream `label`.
    pub fn draws(&self, label: &str, trace: u64, len: usize) -> Vec<f64> {
        if self.sigma == 0.0 {
            return vec![0.0; len];
        }
        let mut rng = seed::rng(self.seed, label, trace);
        (0..len)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * self.sigma
            })
            .collect()
    }
}

/// Largest per-cycle variance across the traces of `ts`.
pub fn max_cycle_variance(ts: &TraceSet) -> f64 {
    (0..ts.trace_len()).map(|t| stats::variance(&ts.column(t))).fold(0.0, f64::max)
}

/// `sigma = sqrt(Var_signal / snr)`.
pub fn calibrate_sigma(ts: &TraceSet, snr: f64) -> Result<f64> {
    if !(snr > 0.0) {
        return Err(Error::InvalidParameter(format!("snr must be > 0, got {snr}")));
    }
    let var = max_cycle_variance(ts);
    if var <= 0.0 {
        return Err(Error::Degenerate("trace set is constant, SNR undefined".into()));
    }
    Ok((var / snr).sqrt())
}

/// Returns a perturbed copy of `ts`; the input is left untouched.
pub fn add_noise(ts: &TraceSet, spec: &NoiseSpec) -> TraceSet {
    let traces = ts
        .traces
        .par_iter()
        .enumerate()
        .map(|(i, tr)| {
            let r = spec.draws("noise", i as u64, tr.values.len());
            PowerTrace { sample_id: tr.sample_id, values: tr.values.iter().zip(r).map(|(v, r)| v + r).collect() }
        })
        .collect();
    let mut meta = ts.meta.clone();
    meta.noise = Some(*spec);
    TraceSet { meta, traces }
}

/// Analytic attenuation of the correlation coefficient under additive noise:
/// `sqrt(S) / sqrt(S + sum r^2)` with `S = sum (p - mean p)^2`.
pub fn lambda_factor(p: &[f64], r: &[f64]) -> Result<f64> {
    if p.len() != r.len() {
        return Err(Error::LengthMismatch { left: p.len(), right: r.len() });
    }
    if p.len() < 2 {
        return Err(Error::InvalidParameter("need at least two points".into()));
    }
    let mean = stats::mean(p);
    let s: f64 = p.iter().map(|v| (v - mean).powi(2)).sum();
    if s <= 0.0 {
        return Err(Error::Degenerate("zero signal variance".into()));
    }
    let rr: f64 = r.iter().map(|v| v * v).sum();
    Ok(s.sqrt() / (s + rr).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{SetPurpose, TraceMeta};
    use crate::systolic::WeightMatrix;

    fn set(values: Vec<Vec<f64>>) -> TraceSet {
        let w = WeightMatrix::zeros(1).unwrap();
        let mut meta = TraceMeta::new(&w, 0, SetPurpose::Attack, vec![]);
        meta.trace_len = values[0].len();
        TraceSet::new(
            meta,
            values.into_iter().enumerate().map(|(i, v)| PowerTrace { sample_id: i as u64, values: v }).collect(),
        )
        .unwrap()
    }

    #[test]
    fn sigma_formula() {
        // Column 0 has population variance 4, column 1 is constant.
        let ts = set(vec![vec![0.0, 1.0], vec![4.0, 1.0], vec![0.0, 1.0], vec![4.0, 1.0]]);
        assert_eq!(calibrate_sigma(&ts, 4.0).unwrap(), 1.0);
        assert_eq!(calibrate_sigma(&ts, f64::INFINITY).unwrap(), 0.0);
        assert!(calibrate_sigma(&ts, 1e12).unwrap() < 1e-5);
        assert!(calibrate_sigma(&ts, 0.0).is_err());
        let flat = set(vec![vec![3.0, 1.0], vec![3.0, 1.0]]);
        assert!(matches!(calibrate_sigma(&flat, 2.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn zero_sigma_is_identity() {
        let ts = set(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        let noisy = add_noise(&ts, &NoiseSpec::gaussian(0.0, 9).unwrap());
        assert_eq!(noisy.traces, ts.traces);
        assert!(noisy.meta.noise.is_some());
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let ts = set(vec![vec![0.0; 5]; 50]);
        let spec = NoiseSpec::gaussian(2.0, 1234).unwrap();
        assert_eq!(add_noise(&ts, &spec), add_noise(&ts, &spec));
        assert_ne!(add_noise(&ts, &spec).traces, add_noise(&ts, &spec.with_seed(1235)).traces);
        assert_eq!(ts.traces[0].values, vec![0.0; 5]);
    }

    #[test]
    fn noise_mean_is_zero() {
        let sigma = 3.0;
        let ts = set(vec![vec![0.0; 10]; 100_000]);
        let noisy = add_noise(&ts, &NoiseSpec::gaussian(sigma, 77).unwrap());
        let all: Vec<f64> = noisy.traces.iter().flat_map(|t| t.values.iter().copied()).collect();
        assert_eq!(all.len(), 1_000_000);
        assert!(stats::mean(&all).abs() <= 3.0 * sigma / 1e3);
        let sd = stats::variance(&all).sqrt();
        assert!((sd - sigma).abs() < 0.01 * sigma);
    }

    #[test]
    fn lambda_cases() {
        let p = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(lambda_factor(&p, &[0.0; 4]).unwrap(), 1.0);
        // sum (p - mean)^2 = 5
        let r = [5f64.sqrt(), 0.0, 0.0, 0.0];
        assert!((lambda_factor(&p, &r).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(lambda_factor(&[2.0, 2.0], &[0.0, 1.0]).is_err());
        assert!(lambda_factor(&p, &[0.0; 3]).is_err());
        let small = lambda_factor(&p, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let large = lambda_factor(&p, &[2.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(large < small && small < 1.0 && large > 0.0);
    }
}
