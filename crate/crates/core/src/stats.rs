//! Correlation statistics for comparing trace sets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::TraceSet;

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population variance.
pub fn variance(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64
}

/// Streaming first and second co-moments (Welford).
#[derive(Debug, Clone, Copy, Default)]
pub struct CoMoments {
    n: f64,
    mx: f64,
    my: f64,
    sxx: f64,
    syy: f64,
    sxy: f64,
}

impl CoMoments {
    pub fn push(&mut self, x: f64, y: f64) {
        self.n += 1.0;
        let dx = x - self.mx;
        self.mx += dx / self.n;
        let dy = y - self.my;
        self.my += dy / self.n;
        self.sxx += dx * (x - self.mx);
        self.syy += dy * (y - self.my);
        self.sxy += dx * (y - self.my);
    }

    pub fn correlation(&self) -> Option<f64> {
        if self.sxx <= 0.0 || self.syy <= 0.0 {
            return None;
        }
        // sqrt of the product keeps self-correlation at exactly 1.
        let denom = match self.sxx * self.syy {
            d if d.is_finite() && d > 0.0 => d.sqrt(),
            _ => self.sxx.sqrt() * self.syy.sqrt(),
        };
        Some((self.sxy / denom).clamp(-1.0, 1.0))
    }
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch { left: x.len(), right: y.len() });
    }
    if x.len() < 2 {
        return Err(Error::InvalidParameter("correlation needs at least two points".into()));
    }
    Ok(())
}

/// Pearson product-moment correlation coefficient.
pub fn pcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let mut m = CoMoments::default();
    for (&a, &b) in x.iter().zip(y) {
        m.push(a, b);
    }
    m.correlation().ok_or_else(|| Error::Degenerate("constant input, correlation undefined".into()))
}

/// 1-based ranks with ties replaced by their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson over average ranks.
pub fn scc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pcc(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    /// Each trace reduced to its summed energy.
    #[default]
    PerSampleEnergy,
    /// Coefficients per cycle; the cycle with the largest PCC is reported.
    PerPointMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub pcc: f64,
    pub scc: f64,
    pub n_points: usize,
    pub reduction: Reduction,
}

pub fn compare_trace_sets(a: &TraceSet, b: &TraceSet, reduction: Reduction) -> Result<CorrelationReport> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { left: a.len(), right: b.len() });
    }
    match reduction {
        Reduction::PerSampleEnergy => {
            let (x, y) = (a.energies(), b.energies());
            Ok(CorrelationReport { pcc: pcc(&x, &y)?, scc: scc(&x, &y)?, n_points: x.len(), reduction })
        }
        Reduction::PerPointMax => {
            if a.trace_len() != b.trace_len() {
                return Err(Error::LengthMismatch { left: a.trace_len(), right: b.trace_len() });
            }
            let mut best: Option<CorrelationReport> = None;
            for t in 0..a.trace_len() {
                let (x, y) = (a.column(t), b.column(t));
                let Ok(p) = pcc(&x, &y) else { continue };
                if best.is_none_or(|r| p > r.pcc) {
                    best = Some(CorrelationReport { pcc: p, scc: scc(&x, &y)?, n_points: x.len(), reduction });
                }
            }
            best.ok_or_else(|| Error::Degenerate("every cycle is constant".into()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Definitional forms, kept independent of the streaming implementation.
    fn two_pass_pcc(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let num: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let dx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let dy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        num / (dx.sqrt() * dy.sqrt())
    }

    fn brute_ranks(x: &[f64]) -> Vec<f64> {
        x.iter()
            .map(|&v| {
                let less = x.iter().filter(|&&u| u < v).count() as f64;
                let eq = x.iter().filter(|&&u| u == v).count() as f64;
                less + (eq + 1.0) / 2.0
            })
            .collect()
    }

    #[test]
    fn affine_and_sign() {
        let x: Vec<f64> = (0..20).map(|v| f64::from(v).sin()).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pcc(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        assert!((pcc(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((pcc(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!((scc(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        let cubed: Vec<f64> = x.iter().map(|v| v.powi(3) + 7.0).collect();
        assert!((scc(&x, &cubed).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn self_correlation_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let x: Vec<f64> = (0..rng.random_range(2..3000)).map(|_| f64::from(rng.random_range(0..400u16))).collect();
            if x.iter().any(|&v| v != x[0]) {
                assert_eq!(pcc(&x, &x).unwrap(), 1.0);
            }
        }
    }

    #[test]
    fn ties_are_averaged() {
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 3.0]), vec![1.0, 2.5, 2.5, 4.0]);
        let v = [1.0, 2.0, 2.0, 3.0];
        assert!((scc(&v, &v).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn error_paths() {
        assert!(matches!(pcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::Degenerate(_))));
        assert!(pcc(&[1.0], &[1.0]).is_err());
        assert!(matches!(scc(&[1.0, 2.0], &[1.0]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn matches_definitional_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for case in 0..1000 {
            let len = rng.random_range(2..200);
            let x: Vec<f64> = (0..len).map(|_| rng.random_range(-50.0..50.0)).collect();
            // Every third case uses coarse integer values so ties occur.
            let y: Vec<f64> = if case % 3 == 0 {
                x.iter().map(|v| (v / 10.0).round() + f64::from(rng.random_range(0..3))).collect()
            } else {
                (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
            };
            if y.iter().all(|&v| v == y[0]) {
                continue;
            }
            assert!((pcc(&x, &y).unwrap() - two_pass_pcc(&x, &y)).abs() < 1e-12);
            let s = two_pass_pcc(&brute_ranks(&x), &brute_ranks(&y));
            assert!((scc(&x, &y).unwrap() - s).abs() < 1e-12);
        }
    }

    #[test]
    fn independent_vectors_do_not_correlate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..20_000).map(|_| rng.random()).collect();
        let y: Vec<f64> = (0..20_000).map(|_| rng.random()).collect();
        assert!(pcc(&x, &y).unwrap().abs() < 0.05);
        assert!(scc(&x, &y).unwrap().abs() < 0.05);
    }
}
