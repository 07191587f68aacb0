//! Profiled (template) attack.
//!
//! During profiling the attacker owns an identical device and may set every
//! weight. For one target PE and one fixed probe input, each of the 256
//! candidate weights is a class: its traces give a mean vector over the points
//! of interest, and the residuals of all classes give one pooled covariance.
//! Attack traces recorded with the same probe on the victim are then scored
//! per class by their Gaussian log-density.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cpa::{chosen_inputs, feeding_rows, ValuePool, CANDIDATES};
use crate::device::TraceSource;
use crate::error::{Error, Result};
use crate::power::simulate;
use crate::seed;
use crate::stats;
use crate::systolic::{trace_len, InputSample, Pe, WeightMatrix};
use crate::trace::{PowerTrace, SetPurpose, TraceMeta, TraceSet};

pub const DEFAULT_POIS: usize = 5;
const MAX_REGULARIZATION_STEPS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub pe: Pe,
    pub probe: InputSample,
    /// 1-based cycles.
    pub pois: Vec<usize>,
    pub class_means: Vec<Vec<f64>>,
    pub pooled_covariance: Vec<Vec<f64>>,
    pub regularization: f64,
    /// Weights programmed during profiling; the target entry is overwritten
    /// by each class.
    pub context: WeightMatrix,
    pub traces_per_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateAttackResult {
    pub pe: Pe,
    pub log_likelihoods: Vec<f64>,
    pub recovered: u8,
    pub traces_used: usize,
}

impl TemplateAttackResult {
    fn from_scores(pe: Pe, log_likelihoods: Vec<f64>, traces_used: usize) -> Self {
        let recovered = argmax(&log_likelihoods) as u8;
        Self { pe, log_likelihoods, recovered, traces_used }
    }

    /// 1-based position of `class` when sorted by likelihood.
    pub fn rank_of(&self, class: u8) -> usize {
        let v = self.log_likelihoods[class as usize];
        1 + self.log_likelihoods.iter().filter(|&&x| x > v).count()
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfilingConfig {
    pub traces_per_class: usize,
    /// Gaussian noise sigma of the profiling device.
    pub sigma: f64,
    pub poi_count: usize,
    pub seed: u64,
}

impl Default for ProfilingConfig {
    fn default() -> Self {
        Self { traces_per_class: 100, sigma: 0.0, poi_count: DEFAULT_POIS, seed: 0 }
    }
}

// Profiling traces of one class, row-major `traces × t`.
struct Observed {
    t: usize,
    data: Vec<f64>,
}

impl Observed {
    fn from_set(set: &TraceSet) -> Self {
        Self { t: set.trace_len(), data: set.traces.iter().flat_map(|tr| tr.values.iter().copied()).collect() }
    }

    fn rows(&self) -> usize {
        self.data.len() / self.t
    }

    fn means(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.t];
        for row in self.data.chunks_exact(self.t) {
            for (a, v) in m.iter_mut().zip(row) {
                *a += v;
            }
        }
        let n = self.rows() as f64;
        m.iter_mut().for_each(|a| *a /= n);
        m
    }
}

fn pois_from_means(means: &[Vec<f64>], t: usize, k: usize, admissible: &[usize]) -> Result<Vec<usize>> {
    if k > t {
        return Err(Error::InvalidParameter(format!("{k} points of interest requested, traces have {t} cycles")));
    }
    if k == 0 {
        return Err(Error::InvalidParameter("at least one point of interest is needed".into()));
    }
    let mut scored: Vec<(usize, f64)> = admissible
        .iter()
        .filter(|&&c| c >= 1 && c <= t)
        .map(|&c| (c, stats::variance(&means.iter().map(|m| m[c - 1]).collect::<Vec<_>>())))
        .filter(|&(_, v)| v > 0.0)
        .collect();
    if scored.is_empty() {
        return Err(Error::Degenerate("no admissible cycle separates the classes".into()));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut pois: Vec<usize> = scored.into_iter().take(k).map(|(c, _)| c).collect();
    pois.sort_unstable();
    Ok(pois)
}

/// The `k` cycles (1-based) among `admissible` with the largest variance of
/// class means. Each entry of `classes` holds the traces of one class.
pub fn select_pois(classes: &[TraceSet], k: usize, admissible: &[usize]) -> Result<Vec<usize>> {
    if classes.len() < 2 || classes.iter().any(|c| c.len() < 2) {
        return Err(Error::InvalidParameter("need at least two classes with two traces each".into()));
    }
    let means: Vec<Vec<f64>> = classes.iter().map(|c| Observed::from_set(c).means()).collect();
    pois_from_means(&means, classes[0].trace_len(), k, admissible)
}

fn weights_for(context: &WeightMatrix, pe: Pe, class: u8) -> WeightMatrix {
    let mut w = context.clone();
    w.set(pe, class);
    w
}

fn check_profiling(pe: Pe, context: &WeightMatrix, cfg: &ProfilingConfig) -> Result<()> {
    pe.check(context.n())?;
    if cfg.traces_per_class < 2 {
        return Err(Error::InvalidParameter("need at least two profiling traces per class".into()));
    }
    if !(cfg.sigma >= 0.0 && cfg.sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!("invalid profiling sigma {}", cfg.sigma)));
    }
    Ok(())
}

// The clean trace is deterministic, so it is simulated once per class.
fn profile_observed(pe: Pe, probe: &InputSample, context: &WeightMatrix, cfg: &ProfilingConfig) -> Result<Vec<Observed>> {
    check_profiling(pe, context, cfg)?;
    (0..CANDIDATES)
        .into_par_iter()
        .map(|c| {
            let clean = simulate(&weights_for(context, pe, c as u8), probe, 0)?.values;
            let mut rng = seed::rng(cfg.seed, "profile", c as u64);
            let mut data = Vec::with_capacity(clean.len() * cfg.traces_per_class);
            for _ in 0..cfg.traces_per_class {
                for v in &clean {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push(v + cfg.sigma * z);
                }
            }
            Ok(Observed { t: clean.len(), data })
        })
        .collect()
}

/// Runs the profiling device: `traces_per_class` noisy traces of `probe`
/// for every class.
pub fn profile_classes(pe: Pe, probe: &InputSample, context: &WeightMatrix, cfg: &ProfilingConfig) -> Result<Vec<TraceSet>> {
    profile_observed(pe, probe, context, cfg)?
        .into_iter()
        .enumerate()
        .map(|(c, obs)| {
            let w = weights_for(context, pe, c as u8);
            let mut meta = TraceMeta::new(&w, cfg.seed, SetPurpose::Profiling, vec![probe.clone(); obs.rows()]);
            meta.params.insert("class".into(), c.into());
            let traces = obs
                .data
                .chunks_exact(obs.t)
                .enumerate()
                .map(|(i, v)| PowerTrace { sample_id: i as u64, values: v.to_vec() })
                .collect();
            TraceSet::new(meta, traces)
        })
        .collect()
}

fn cholesky(cov: &DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    cov.clone().cholesky()
}

/// Regularised pooled covariance: zero first, then a diagonal load starting at
/// 1e-6 of the mean variance, growing tenfold until positive definite.
fn regularize(cov: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    if cholesky(cov).is_some() {
        return Ok((cov.clone(), 0.0));
    }
    let k = cov.nrows();
    let mean_diag = cov.diagonal().mean();
    let mut r = if mean_diag > 0.0 { 1e-6 * mean_diag } else { 1e-6 };
    for _ in 0..MAX_REGULARIZATION_STEPS {
        let c = cov + DMatrix::identity(k, k) * r;
        if cholesky(&c).is_some() {
            return Ok((c, r));
        }
        r *= 10.0;
    }
    Err(Error::SingularCovariance(r))
}

fn template_from_observed(
    pe: Pe,
    probe: &InputSample,
    context: &WeightMatrix,
    classes: &[Observed],
    poi_count: usize,
    admissible: &[usize],
) -> Result<Template> {
    if classes.len() != CANDIDATES {
        return Err(Error::DimensionMismatch { expected: CANDIDATES, got: classes.len() });
    }
    let t = classes[0].t;
    let all_means: Vec<Vec<f64>> = classes.iter().map(Observed::means).collect();
    let pois = pois_from_means(&all_means, t, poi_count.min(admissible.len()).max(1), admissible)?;
    let k = pois.len();
    let mut scatter = vec![0.0; k * k];
    let mut total = 0usize;
    let mut d = vec![0.0; k];
    for (obs, m) in classes.iter().zip(&all_means) {
        for row in obs.data.chunks_exact(t) {
            for (j, &c) in pois.iter().enumerate() {
                d[j] = row[c - 1] - m[c - 1];
            }
            for a in 0..k {
                for b in 0..k {
                    scatter[a * k + b] += d[a] * d[b];
                }
            }
        }
        total += obs.rows();
    }
    let cov = DMatrix::from_row_slice(k, k, &scatter) / (total - CANDIDATES) as f64;
    let (cov, regularization) = regularize(&cov)?;
    Ok(Template {
        pe,
        probe: probe.clone(),
        pois: pois.clone(),
        class_means: all_means.iter().map(|m| pois.iter().map(|&c| m[c - 1]).collect()).collect(),
        pooled_covariance: (0..k).map(|i| cov.row(i).iter().copied().collect()).collect(),
        regularization,
        context: context.clone(),
        traces_per_class: classes[0].rows(),
    })
}

/// Builds a template from already profiled classes.
pub fn template_from_classes(
    pe: Pe,
    probe: &InputSample,
    context: &WeightMatrix,
    classes: &[TraceSet],
    poi_count: usize,
    admissible: &[usize],
) -> Result<Template> {
    if classes.iter().any(|c| c.len() < 2) {
        return Err(Error::InvalidParameter("need at least two traces per class".into()));
    }
    let obs: Vec<Observed> = classes.iter().map(Observed::from_set).collect();
    template_from_observed(pe, probe, context, &obs, poi_count, admissible)
}

/// Profiles `pe` under `probe` and `context` and builds its template.
pub fn build_template(
    pe: Pe,
    probe: &InputSample,
    context: &WeightMatrix,
    admissible: &[usize],
    cfg: &ProfilingConfig,
) -> Result<Template> {
    let classes = profile_observed(pe, probe, context, cfg)?;
    template_from_observed(pe, probe, context, &classes, cfg.poi_count, admissible)
}

impl Template {
    fn factor(&self) -> Result<(nalgebra::Cholesky<f64, nalgebra::Dyn>, f64)> {
        let k = self.pois.len();
        let cov = DMatrix::from_fn(k, k, |i, j| self.pooled_covariance[i][j]);
        let ch = cholesky(&cov).ok_or(Error::SingularCovariance(self.regularization))?;
        let log_det = 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok((ch, log_det))
    }

    /// Summed log-density of `traces` under every class.
    pub fn log_likelihoods(&self, traces: &[&PowerTrace]) -> Result<Vec<f64>> {
        let t = self.pois.iter().copied().max().unwrap_or(0);
        if let Some(bad) = traces.iter().find(|tr| tr.values.len() < t) {
            return Err(Error::DimensionMismatch { expected: t, got: bad.values.len() });
        }
        let (ch, log_det) = self.factor()?;
        let k = self.pois.len() as f64;
        let constant = -0.5 * (log_det + k * (2.0 * std::f64::consts::PI).ln());
        let obs: Vec<Vec<f64>> = traces.iter().map(|tr| self.pois.iter().map(|&c| tr.values[c - 1]).collect()).collect();
        Ok(self
            .class_means
            .iter()
            .map(|m| {
                obs.iter()
                    .map(|o| {
                        let d = DVector::from_iterator(m.len(), o.iter().zip(m).map(|(x, mu)| x - mu));
                        let y = ch.l().solve_lower_triangular(&d).expect("factor is non-singular");
                        constant - 0.5 * y.norm_squared()
                    })
                    .sum()
            })
            .collect())
    }
}

/// Scores the traces of `attack` recorded with this template's probe.
pub fn match_template(template: &Template, attack: &TraceSet) -> Result<TemplateAttackResult> {
    match_templates(std::slice::from_ref(template), attack)
}

/// Sums log-likelihoods over every attack trace whose input matches the probe
/// of one of `templates` (all for the same PE).
pub fn match_templates(templates: &[Template], attack: &TraceSet) -> Result<TemplateAttackResult> {
    let Some(first) = templates.first() else {
        return Err(Error::Empty("template list"));
    };
    if attack.inputs().len() != attack.len() {
        return Err(Error::LengthMismatch { left: attack.len(), right: attack.inputs().len() });
    }
    let mut total = vec![0.0; CANDIDATES];
    let mut used = 0;
    for t in templates {
        if t.pe != first.pe {
            return Err(Error::InvalidParameter("templates target different PEs".into()));
        }
        let traces: Vec<&PowerTrace> =
            attack.traces.iter().zip(attack.inputs()).filter(|(_, s)| **s == t.probe).map(|(tr, _)| tr).collect();
        if traces.is_empty() {
            continue;
        }
        used += traces.len();
        for (acc, ll) in total.iter_mut().zip(t.log_likelihoods(&traces)?) {
            *acc += ll;
        }
    }
    if used == 0 {
        return Err(Error::InvalidParameter(format!("no attack trace was recorded with the probes of {}", first.pe)));
    }
    Ok(TemplateAttackResult::from_scores(first.pe, total, used))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TraceReuse {
    /// One attack set per array row, shared by the PEs of that row.
    #[default]
    SharedStage,
    /// A fresh attack set for every PE.
    PerTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemplateAttackConfig {
    /// Attack traces per target.
    pub attack_traces: usize,
    /// Distinct probe inputs; attack traces cycle through them.
    pub probes: usize,
    pub profiling: ProfilingConfig,
    pub reuse: TraceReuse,
    pub beam_width: usize,
    pub seed: u64,
}

impl Default for TemplateAttackConfig {
    fn default() -> Self {
        Self {
            attack_traces: 15,
            probes: 15,
            profiling: ProfilingConfig::default(),
            reuse: TraceReuse::SharedStage,
            beam_width: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateOutcome {
    pub pe: Pe,
    pub recovered: u8,
    pub class: Vec<u8>,
    pub result: TemplateAttackResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullTemplateResult {
    pub recovered: WeightMatrix,
    pub outcomes: Vec<TemplateOutcome>,
    pub column_solutions: Vec<Vec<Vec<u8>>>,
    pub traces_used: usize,
    pub max_traces_per_target: usize,
    pub config: TemplateAttackConfig,
}

impl FullTemplateResult {
    pub fn outcome(&self, pe: Pe) -> &TemplateOutcome {
        self.outcomes.iter().find(|o| o.pe == pe).expect("every PE has an outcome")
    }

    pub fn ambiguous_columns(&self) -> Vec<usize> {
        (1..=self.recovered.n()).filter(|&c| self.column_solutions[c - 1].len() > 1).collect()
    }

    pub fn correct_count(&self, truth: &WeightMatrix) -> usize {
        self.outcomes.iter().filter(|o| o.class.contains(&truth.get(o.pe))).count()
    }

    pub fn exact_count(&self, truth: &WeightMatrix) -> usize {
        self.outcomes.iter().filter(|o| o.recovered == truth.get(o.pe)).count()
    }
}

/// Cycles at which every firing PE is the target, downstream of it, or fully
/// determined by known weights and silent rows.
pub fn admissible_cycles(target: Pe, known: &[Vec<bool>], silent_rows: &[bool]) -> Vec<usize> {
    let n = silent_rows.len();
    let determined = |p: Pe| {
        p == target
            || (p.col == target.col && p.row > target.row && silent_rows[p.row - 1])
            || (1..=p.row).all(|r| silent_rows[r - 1] || known[r - 1][p.col - 1])
    };
    (1..=trace_len(n))
        .filter(|&t| Pe::column_major(n).filter(|p| p.fire_cycle() == t).all(determined))
        .collect()
}

#[derive(Debug, Clone)]
struct Branch {
    prefix: Vec<u8>,
    score: f64,
    results: Vec<TemplateAttackResult>,
}

/// Probe inputs used for the attack traces of array row `row`.
pub fn stage_probes(n: usize, row: usize, cfg: &TemplateAttackConfig) -> Vec<InputSample> {
    let distinct = cfg.probes.min(cfg.attack_traces);
    chosen_inputs(n, &feeding_rows(Pe::new(row, 1)), distinct, ValuePool::Nonzero, seed::derive(cfg.seed, "probes", row as u64))
}

/// Noiseless profiling traces of PE(1,1) for every class under the first-row
/// probes; the reference for calibrating template-attack noise.
pub fn reference_set(n: usize, cfg: &TemplateAttackConfig) -> Result<TraceSet> {
    let pe = Pe::new(1, 1);
    let zero = WeightMatrix::zeros(n)?;
    let probes = stage_probes(n, 1, cfg);
    let mut traces = Vec::with_capacity(CANDIDATES * probes.len());
    let mut inputs = Vec::with_capacity(traces.capacity());
    for c in 0..CANDIDATES {
        let w = weights_for(&zero, pe, c as u8);
        for p in &probes {
            traces.push(simulate(&w, p, traces.len() as u64)?);
            inputs.push(p.clone());
        }
    }
    TraceSet::new(TraceMeta::new(&zero, cfg.seed, SetPurpose::Profiling, inputs), traces)
}

/// Recovers all weights with templates, row by row so that every other PE
/// active at a target's points of interest is already known.
pub fn full_template_attack(victim: &mut dyn TraceSource, cfg: &TemplateAttackConfig) -> Result<FullTemplateResult> {
    let n = victim.n();
    if cfg.attack_traces == 0 || cfg.probes == 0 {
        return Err(Error::InvalidParameter("need at least one attack trace and one probe".into()));
    }
    if cfg.beam_width == 0 {
        return Err(Error::InvalidParameter("beam width must be positive".into()));
    }
    let start = victim.traces_acquired();
    let mut beams: Vec<Vec<Branch>> = vec![vec![Branch { prefix: vec![], score: 0.0, results: vec![] }]; n];
    let mut used_probes: Vec<Vec<InputSample>> = Vec::with_capacity(n);
    let mut max_per_target = 0;

    for row in 1..=n {
        let rows = feeding_rows(Pe::new(row, 1));
        let probes = stage_probes(n, row, cfg);
        let distinct = probes.len();
        let schedule: Vec<InputSample> = (0..cfg.attack_traces).map(|k| probes[k % distinct].clone()).collect();
        let silent: Vec<bool> = (1..=n).map(|r| !rows.contains(&r)).collect();
        let shared = match cfg.reuse {
            TraceReuse::SharedStage => Some(victim.acquire(&schedule)?),
            TraceReuse::PerTarget => None,
        };
        for col in 1..=n {
            let target = Pe::new(row, col);
            let attack = match &shared {
                Some(s) => s.clone(),
                None => victim.acquire(&schedule)?,
            };
            max_per_target = max_per_target.max(attack.len());
            let mut context = WeightMatrix::zeros(n)?;
            let mut known = vec![vec![false; n]; n];
            for (c, beam) in beams.iter().enumerate() {
                if c + 1 != col {
                    for (r, &w) in beam[0].prefix.iter().enumerate() {
                        context.set(Pe::new(r + 1, c + 1), w);
                        known[r][c] = true;
                    }
                }
            }
            for r in 1..row {
                known[r - 1][col - 1] = true;
            }
            let admissible = admissible_cycles(target, &known, &silent);
            let mut cache: HashMap<Vec<u8>, TemplateAttackResult> = HashMap::new();
            let mut next = Vec::new();
            for branch in &beams[col - 1] {
                let mut ctx = context.clone();
                for (r, &w) in branch.prefix.iter().enumerate() {
                    ctx.set(Pe::new(r + 1, col), w);
                }
                // Weights on silent rows never influence the traces.
                for pe in Pe::column_major(n).filter(|p| silent[p.row - 1]) {
                    ctx.set(pe, 0);
                }
                let key = ctx.as_slice().to_vec();
                let res = match cache.get(&key) {
                    Some(r) => r.clone(),
                    None => {
                        let templates = probes
                            .iter()
                            .enumerate()
                            .map(|(p, probe)| {
                                let tag = format!("{row}/{col}/{p}/{key:?}");
                                let pcfg = ProfilingConfig {
                                    seed: seed::derive(cfg.profiling.seed, &tag, cfg.seed),
                                    ..cfg.profiling
                                };
                                build_template(target, probe, &ctx, &admissible, &pcfg)
                            })
                            .collect::<Result<Vec<_>>>()?;
                        let r = match_templates(&templates, &attack)?;
                        cache.insert(key, r.clone());
                        r
                    }
                };
                for (c, &ll) in res.log_likelihoods.iter().enumerate() {
                    let mut prefix = branch.prefix.clone();
                    prefix.push(c as u8);
                    let mut results = branch.results.clone();
                    results.push(res.clone());
                    next.push(Branch { prefix, score: branch.score + ll, results });
                }
            }
            next.sort_by(|a, b| b.score.total_cmp(&a.score));
            next.truncate(cfg.beam_width);
            beams[col - 1] = next;
        }
        used_probes.push(probes);
    }

    let mut recovered = WeightMatrix::zeros(n)?;
    let mut outcomes = Vec::with_capacity(n * n);
    let mut column_solutions = Vec::with_capacity(n);
    for (c, beam) in beams.into_iter().enumerate() {
        let best = &beam[0];
        for (r, &w) in best.prefix.iter().enumerate() {
            recovered.set(Pe::new(r + 1, c + 1), w);
        }
        let mut solutions = Vec::new();
        for b in &beam {
            if equivalent_columns(&recovered, c + 1, &best.prefix, &b.prefix, &used_probes)? {
                solutions.push(b.prefix.clone());
            }
        }
        for (r, &w) in best.prefix.iter().enumerate() {
            let mut class: Vec<u8> = solutions.iter().map(|s| s[r]).collect();
            class.sort_unstable();
            class.dedup();
            outcomes.push(TemplateOutcome { pe: Pe::new(r + 1, c + 1), recovered: w, class, result: best.results[r].clone() });
        }
        column_solutions.push(solutions);
    }
    outcomes.sort_by_key(|o| (o.pe.col, o.pe.row));
    Ok(FullTemplateResult {
        recovered,
        outcomes,
        column_solutions,
        traces_used: victim.traces_acquired() - start,
        max_traces_per_target: max_per_target,
        config: *cfg,
    })
}

// Two column solutions are equivalent when they produce identical noiseless
// traces for every probe used during the attack.
fn equivalent_columns(
    base: &WeightMatrix,
    col: usize,
    a: &[u8],
    b: &[u8],
    probes: &[Vec<InputSample>],
) -> Result<bool> {
    if a == b {
        return Ok(true);
    }
    let with = |v: &[u8]| {
        let mut w = base.clone();
        for (r, &x) in v.iter().enumerate() {
            w.set(Pe::new(r + 1, col), x);
        }
        w
    };
    let (wa, wb) = (with(a), with(b));
    for probe in probes.iter().flatten() {
        if simulate(&wa, probe, 0)?.values != simulate(&wb, probe, 0)?.values {
            return Ok(false);
        }
    }
    Ok(true)
}
