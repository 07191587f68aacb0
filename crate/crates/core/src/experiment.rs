//! Experiment configuration and runners behind the command-line verbs.
//!
//! Every runner derives all of its randomness from the configured master seed
//! and writes its artefacts below the output directory, so reruns from the
//! same configuration reproduce identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cpa::{
    self, chosen_inputs, feeding_rows, random_inputs, AttackPoints, CpaOptions, FullAttackConfig, FullAttackResult,
    LeakageModel, Strategy, ValuePool,
};
use crate::device::{Measurement, SimulatedDevice};
use crate::error::{Error, Result};
use crate::noise::{add_noise, calibrate_sigma, NoiseSpec};
use crate::power::generate_trace_set;
use crate::seed;
use crate::stats::{compare_trace_sets, CorrelationReport, Reduction};
use crate::systolic::{Pe, WeightMatrix};
use crate::template::{
    self, full_template_attack, FullTemplateResult, ProfilingConfig, Template, TemplateAttackConfig, TraceReuse,
};
use crate::trace::{weights_digest, SetPurpose, TraceSet};
use crate::trace_io::{read_json, to_json_bytes, write_atomic, write_json, write_trace_set};

pub const OUT_DIR_ENV: &str = "SYSTOLIC_SCA_OUT";
pub const DEFAULT_OUT_DIR: &str = "out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SampleStrategy {
    Random,
    /// Drive only the inputs that feed array row `column` (and the row above).
    Tuned { column: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    #[default]
    Cpa,
    Template,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CpaSettings {
    pub pool: ValuePool,
    pub model: LeakageModel,
    pub points: AttackPoints,
    pub class_threshold: f64,
    pub beam_width: usize,
    pub remove_known: bool,
    /// Traces per stage during noise sweeps.
    pub sweep_traces: usize,
    pub sweep_repetitions: usize,
}

impl Default for CpaSettings {
    fn default() -> Self {
        Self {
            pool: ValuePool::Balanced,
            model: LeakageModel::PeExpense,
            points: AttackPoints::FireCycle,
            class_threshold: 0.95,
            beam_width: 16,
            remove_known: true,
            sweep_traces: 30,
            sweep_repetitions: 15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplateSettings {
    pub attack_traces: usize,
    pub probes: usize,
    pub traces_per_class: usize,
    pub poi_count: usize,
    pub beam_width: usize,
    pub reuse: TraceReuse,
    /// Noise level of the profiling device; defaults to the attack SNR.
    pub profiling_snr: Option<f64>,
    pub repetitions: usize,
    pub sweep_repetitions: usize,
    /// Target of the standalone `template profile` verb, `[row, col]`.
    pub profile_target: [usize; 2],
    /// Weights assumed known while profiling the standalone target.
    pub known_upstream: Option<Vec<u8>>,
}

impl Default for TemplateSettings {
    fn default() -> Self {
        Self {
            attack_traces: 15,
            probes: 15,
            traces_per_class: 100,
            poi_count: template::DEFAULT_POIS,
            beam_width: 8,
            reuse: TraceReuse::SharedStage,
            profiling_snr: None,
            repetitions: 50,
            sweep_repetitions: 5,
            profile_target: [1, 1],
            known_upstream: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n: usize,
    /// Secret weights, row-major. Drawn from the seed when absent.
    pub weights: Option<Vec<u8>>,
    pub samples: SampleStrategy,
    pub traces: usize,
    /// `None` means noiseless.
    pub snr: Option<f64>,
    pub snr_grid: Vec<f64>,
    pub attack: AttackKind,
    pub cpa: CpaSettings,
    pub template: TemplateSettings,
    pub out_dir: Option<PathBuf>,
    pub csv: bool,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n: 3,
            weights: None,
            samples: SampleStrategy::Random,
            traces: 20_000,
            snr: None,
            snr_grid: vec![10.0, 8.0, 6.0, 4.0, 3.5, 3.0, 2.5, 2.0, 1.5],
            attack: AttackKind::Cpa,
            cpa: CpaSettings::default(),
            template: TemplateSettings::default(),
            out_dir: None,
            csv: false,
            seed: 0,
        }
    }
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(config_error("n must be at least 1"));
        }
        if let Some(w) = &self.weights {
            if w.len() != self.n * self.n {
                return Err(config_error(format!("weights must list {} values (n*n, row-major), got {}", self.n * self.n, w.len())));
            }
        }
        if let SampleStrategy::Tuned { column } = self.samples {
            if column == 0 || column > self.n {
                return Err(config_error(format!("tuned column must be in 1..={}, got {column}", self.n)));
            }
        }
        if self.traces < 2 {
            return Err(config_error("traces must be at least 2"));
        }
        let check_snr = |s: f64, what: &str| {
            if s > 0.0 && !s.is_nan() {
                Ok(())
            } else {
                Err(config_error(format!("{what} must be a positive number, got {s}")))
            }
        };
        if let Some(s) = self.snr {
            check_snr(s, "snr")?;
        }
        if let Some(s) = self.template.profiling_snr {
            check_snr(s, "template.profiling_snr")?;
        }
        for &s in &self.snr_grid {
            check_snr(s, "snr_grid entry")?;
        }
        if !(self.cpa.class_threshold > 0.0 && self.cpa.class_threshold <= 1.0) {
            return Err(config_error("cpa.class_threshold must be in (0, 1]"));
        }
        if self.cpa.beam_width == 0 || self.template.beam_width == 0 {
            return Err(config_error("beam widths must be positive"));
        }
        if self.cpa.sweep_traces < 2 || self.cpa.sweep_repetitions == 0 {
            return Err(config_error("cpa sweep needs at least 2 traces and 1 repetition"));
        }
        let t = &self.template;
        if t.attack_traces == 0 || t.probes == 0 || t.repetitions == 0 || t.sweep_repetitions == 0 {
            return Err(config_error("template trace, probe and repetition counts must be positive"));
        }
        if t.traces_per_class < 2 {
            return Err(config_error("template.traces_per_class must be at least 2"));
        }
        if t.poi_count == 0 || t.poi_count > crate::systolic::trace_len(self.n) {
            return Err(config_error(format!("template.poi_count must be in 1..={}", crate::systolic::trace_len(self.n))));
        }
        Pe::new(t.profile_target[0], t.profile_target[1]).check(self.n)?;
        if let Some(k) = &t.known_upstream {
            if k.len() != self.n * self.n {
                return Err(config_error("template.known_upstream must list n*n values"));
            }
        }
        Ok(())
    }

    pub fn secret_weights(&self) -> Result<WeightMatrix> {
        match &self.weights {
            Some(w) => WeightMatrix::new(self.n, w.clone()),
            None => {
                let mut rng = seed::rng(self.seed, "secret-weights", 0);
                WeightMatrix::new(self.n, (0..self.n * self.n).map(|_| rng.random()).collect())
            }
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }

    fn measurement(&self, snr: Option<f64>) -> Measurement {
        snr.map_or(Measurement::Noiseless, Measurement::Snr)
    }

    pub fn strategy(&self) -> Strategy {
        match self.samples {
            SampleStrategy::Random => Strategy::RandomInput,
            SampleStrategy::Tuned { .. } => Strategy::InputTuned,
        }
    }

    pub fn cpa_attack_config(&self, traces: usize, seed: u64) -> FullAttackConfig {
        FullAttackConfig {
            strategy: self.strategy(),
            traces_per_stage: traces,
            pool: self.cpa.pool,
            options: CpaOptions { model: self.cpa.model, points: self.cpa.points, class_threshold: self.cpa.class_threshold },
            beam_width: self.cpa.beam_width,
            remove_known: self.cpa.remove_known,
            seed,
        }
    }

    pub fn template_attack_config(&self, sigma: f64, seed: u64) -> TemplateAttackConfig {
        let t = &self.template;
        TemplateAttackConfig {
            attack_traces: t.attack_traces,
            probes: t.probes,
            profiling: ProfilingConfig {
                traces_per_class: t.traces_per_class,
                sigma,
                poi_count: t.poi_count,
                seed: seed::derive(seed, "profiling", 0),
            },
            reuse: t.reuse,
            beam_width: t.beam_width,
            seed,
        }
    }
}

/// SHA-256 of a byte string, hex encoded.
pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_out(path: &Path, bytes: &[u8], overwrite: bool) -> Result<()> {
    write_atomic(path, bytes, overwrite)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenReport {
    /// Relative to the output directory.
    pub file: PathBuf,
    pub file_digest: String,
    pub weights_digest: String,
    pub traces: usize,
    pub sigma: Option<f64>,
}

/// Generates one trace set from the configured samples and noise.
pub fn generate(cfg: &ExperimentConfig) -> Result<TraceSet> {
    cfg.validate()?;
    let w = cfg.secret_weights()?;
    let s = seed::derive(cfg.seed, "gen-samples", 0);
    let samples = match cfg.samples {
        SampleStrategy::Random => random_inputs(cfg.n, cfg.traces, s),
        SampleStrategy::Tuned { column } => {
            chosen_inputs(cfg.n, &feeding_rows(Pe::new(column, 1)), cfg.traces, ValuePool::Balanced, s)
        }
    };
    let mut ts = generate_trace_set(&w, &samples, cfg.seed, SetPurpose::Attack)?;
    ts.meta.params.insert("samples".into(), serde_json::to_value(cfg.samples)?);
    if let Some(snr) = cfg.snr {
        ts = add_noise(&ts, &NoiseSpec::for_snr(&ts, snr, seed::derive(cfg.seed, "gen-noise", 0))?);
    }
    Ok(ts)
}

pub fn cmd_gen_traces(cfg: &ExperimentConfig, overwrite: bool) -> Result<GenReport> {
    let ts = generate(cfg)?;
    let dir = cfg.out_dir();
    let path = dir.join("traces.bin");
    let bytes = crate::trace_io::encode_trace_set(&ts)?;
    write_out(&path, &bytes, overwrite)?;
    if cfg.csv {
        write_out(&dir.join("traces.csv"), &crate::trace_io::encode_csv(&ts)?, overwrite)?;
    }
    let report = GenReport {
        file: PathBuf::from("traces.bin"),
        file_digest: digest(&bytes),
        weights_digest: ts.meta.weights_digest.clone(),
        traces: ts.len(),
        sigma: ts.meta.noise.map(|n| n.sigma),
    };
    write_json(&report, &dir.join("gen.json"), overwrite)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeSummary {
    pub pe: Pe,
    pub recovered: u8,
    pub class: Vec<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub true_weight: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub true_rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub true_rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cycle: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub attack: AttackKind,
    pub recovered: Vec<Vec<u8>>,
    pub pes: Vec<PeSummary>,
    pub ambiguous_columns: Vec<usize>,
    pub column_solutions: Vec<Vec<Vec<u8>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub correct: Option<usize>,
    pub total: usize,
    pub traces_used: usize,
    pub max_traces_per_target: usize,
    pub snr: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub warnings: Vec<String>,
}

impl AttackSummary {
    /// All weights recovered, up to the reported equivalence classes.
    pub fn success(&self) -> bool {
        self.correct == Some(self.total)
    }
}

fn cpa_summary(res: &FullAttackResult, truth: Option<&WeightMatrix>, snr: Option<f64>, per_target: usize) -> AttackSummary {
    let pes = res
        .outcomes
        .iter()
        .map(|o| {
            let tw = truth.map(|t| t.get(o.pe));
            PeSummary {
                pe: o.pe,
                recovered: o.recovered,
                class: o.class.clone(),
                true_weight: tw,
                true_rank: tw.map(|w| o.result.rank_of(w)),
                true_rho: tw.map(|w| o.result.rho_of(w)),
                cycle: Some(o.result.cycle),
            }
        })
        .collect();
    AttackSummary {
        attack: AttackKind::Cpa,
        recovered: res.recovered.rows(),
        pes,
        ambiguous_columns: res.ambiguous_columns(),
        column_solutions: res.column_solutions.clone(),
        correct: truth.map(|t| res.correct_count(t)),
        total: res.outcomes.len(),
        traces_used: res.traces_used,
        max_traces_per_target: per_target,
        snr,
        warnings: vec![],
    }
}

fn template_summary(res: &FullTemplateResult, truth: Option<&WeightMatrix>, snr: Option<f64>) -> AttackSummary {
    let pes = res
        .outcomes
        .iter()
        .map(|o| {
            let tw = truth.map(|t| t.get(o.pe));
            PeSummary {
                pe: o.pe,
                recovered: o.recovered,
                class: o.class.clone(),
                true_weight: tw,
                true_rank: tw.map(|w| o.result.rank_of(w)),
                true_rho: None,
                cycle: None,
            }
        })
        .collect();
    AttackSummary {
        attack: AttackKind::Template,
        recovered: res.recovered.rows(),
        pes,
        ambiguous_columns: res.ambiguous_columns(),
        column_solutions: res.column_solutions.clone(),
        correct: truth.map(|t| res.correct_count(t)),
        total: res.outcomes.len(),
        traces_used: res.traces_used,
        max_traces_per_target: res.max_traces_per_target,
        snr,
        warnings: vec![],
    }
}

/// Runs the full CPA. With `inputs`, the recorded sets are attacked (one per
/// row, or a single shared set); otherwise a simulated victim is queried.
pub fn run_cpa(cfg: &ExperimentConfig, inputs: Option<&[TraceSet]>) -> Result<(FullAttackResult, AttackSummary)> {
    cfg.validate()?;
    let attack_seed = seed::derive(cfg.seed, "cpa", 0);
    let secret = cfg.secret_weights()?;
    let (res, truth, snr) = match inputs {
        None => {
            let mut dev = SimulatedDevice::new(secret.clone(), cfg.measurement(cfg.snr), seed::derive(cfg.seed, "cpa-device", 0));
            let acfg = cfg.cpa_attack_config(cfg.traces, attack_seed);
            (cpa::full_array_attack(&mut dev, &acfg)?, Some(secret), cfg.snr)
        }
        Some(sets) => {
            let first = sets.first().ok_or(Error::Empty("input trace sets"))?;
            let strategy = if sets.len() == 1 { Strategy::RandomInput } else { Strategy::InputTuned };
            let acfg = FullAttackConfig { strategy, ..cfg.cpa_attack_config(first.len(), attack_seed) };
            // Ground truth is only known for profiling sets or a matching configured secret.
            let truth = first.meta.weights.clone().or_else(|| {
                (cfg.weights.is_some() && weights_digest(&secret) == first.meta.weights_digest).then(|| secret.clone())
            });
            let snr = first.meta.noise.and_then(|n| n.target_snr);
            (cpa::attack_stages(sets, &acfg)?, truth, snr)
        }
    };
    let per_target = match res.config.strategy {
        Strategy::RandomInput => res.traces_used,
        Strategy::InputTuned => res.traces_used / cfg.n,
    };
    let summary = cpa_summary(&res, truth.as_ref(), snr, per_target);
    Ok((res, summary))
}

pub fn cmd_cpa(cfg: &ExperimentConfig, inputs: Option<&[TraceSet]>, overwrite: bool) -> Result<AttackSummary> {
    let (res, summary) = run_cpa(cfg, inputs)?;
    let dir = cfg.out_dir().join("cpa");
    for o in &res.outcomes {
        write_out(&dir.join(format!("scores_pe{}{}.csv", o.pe.row, o.pe.col)), &cpa::scores_csv(&o.result)?, overwrite)?;
    }
    write_json(&summary, &dir.join("summary.json"), overwrite)?;
    Ok(summary)
}

/// Sigma used for template experiments at `snr` (0 when noiseless).
pub fn template_sigma(cfg: &ExperimentConfig, snr: Option<f64>) -> Result<f64> {
    match snr {
        None => Ok(0.0),
        Some(s) if s.is_infinite() => Ok(0.0),
        Some(s) => {
            let tcfg = cfg.template_attack_config(0.0, seed::derive(cfg.seed, "template", 0));
            calibrate_sigma(&template::reference_set(cfg.n, &tcfg)?, s)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    /// Relative to the output directory.
    pub file: PathBuf,
    pub pe: Pe,
    pub templates: usize,
    pub sigma: f64,
    pub snr: Option<f64>,
}

fn require_weight_setting(allowed: bool) -> Result<()> {
    if allowed {
        Ok(())
    } else {
        Err(config_error("template profiling needs control over the device weights; pass --allow-weight-setting"))
    }
}

/// Profiles the configured target for every probe of its row.
pub fn cmd_template_profile(cfg: &ExperimentConfig, allow_weight_setting: bool, overwrite: bool) -> Result<ProfileReport> {
    cfg.validate()?;
    require_weight_setting(allow_weight_setting)?;
    let [r, c] = cfg.template.profile_target;
    let pe = Pe::new(r, c);
    let snr = cfg.template.profiling_snr.or(cfg.snr);
    let sigma = template_sigma(cfg, snr)?;
    let tcfg = cfg.template_attack_config(sigma, seed::derive(cfg.seed, "template", 0));
    let context = match &cfg.template.known_upstream {
        Some(k) => WeightMatrix::new(cfg.n, k.clone())?,
        None => WeightMatrix::zeros(cfg.n)?,
    };
    let n = cfg.n;
    let rows = feeding_rows(pe);
    let silent: Vec<bool> = (1..=n).map(|r| !rows.contains(&r)).collect();
    // The profiling context (zeros unless given) is what the attacker assumes
    // for every other PE.
    let known: Vec<Vec<bool>> = (1..=n).map(|r| (1..=n).map(|c| Pe::new(r, c) != pe).collect()).collect();
    let admissible = template::admissible_cycles(pe, &known, &silent);
    let templates: Vec<Template> = template::stage_probes(n, r, &tcfg)
        .iter()
        .enumerate()
        .map(|(i, probe)| {
            let pcfg = ProfilingConfig { seed: seed::derive(tcfg.profiling.seed, "standalone", i as u64), ..tcfg.profiling };
            template::build_template(pe, probe, &context, &admissible, &pcfg)
        })
        .collect::<Result<_>>()?;
    let file = PathBuf::from("templates").join(format!("pe{r}{c}.json"));
    write_json(&templates, &cfg.out_dir().join(&file), overwrite)?;
    let report = ProfileReport { file, pe, templates: templates.len(), sigma, snr };
    write_json(&report, &cfg.out_dir().join("templates").join("profile.json"), overwrite)?;
    Ok(report)
}

pub fn load_templates(path: &Path) -> Result<Vec<Template>> {
    read_json(path)
}

/// Runs the full template attack once, against a simulated victim.
pub fn run_template(cfg: &ExperimentConfig, snr: Option<f64>, rep: u64) -> Result<(FullTemplateResult, AttackSummary)> {
    cfg.validate()?;
    let secret = cfg.secret_weights()?;
    let profiling_snr = cfg.template.profiling_snr.or(snr);
    let attack_sigma = template_sigma(cfg, snr)?;
    let profiling_sigma = template_sigma(cfg, profiling_snr)?;
    let attack_seed = seed::derive(cfg.seed, "template", rep);
    let mut dev = SimulatedDevice::new(
        secret.clone(),
        Measurement::Sigma(attack_sigma),
        seed::derive(cfg.seed, "template-device", rep),
    );
    let res = full_template_attack(&mut dev, &cfg.template_attack_config(profiling_sigma, attack_seed))?;
    let mut summary = template_summary(&res, Some(&secret), snr);
    if profiling_snr != snr {
        summary.warnings.push(format!(
            "profiling noise (snr {profiling_snr:?}, sigma {profiling_sigma:.4}) differs from attack noise (snr {snr:?}, sigma {attack_sigma:.4}); templates assume matched noise"
        ));
    }
    Ok((res, summary))
}

pub fn cmd_template_attack(cfg: &ExperimentConfig, allow_weight_setting: bool, overwrite: bool) -> Result<AttackSummary> {
    require_weight_setting(allow_weight_setting)?;
    let (_, summary) = run_template(cfg, cfg.snr, 0)?;
    write_json(&summary, &cfg.out_dir().join("template").join("summary.json"), overwrite)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub snr: f64,
    pub attack: AttackKind,
    /// PEs recovered in a majority of the repetitions.
    pub recovered_count: usize,
    /// Fraction of repetitions recovering every weight.
    pub success_rate: f64,
    /// Mean true-candidate correlation of PE(1,1) (CPA only).
    pub true_rho: Option<f64>,
    /// Traces per stage (CPA) or per target (template).
    pub traces: usize,
    pub repetitions: usize,
}

fn majority(hits: &[usize], reps: usize) -> usize {
    hits.iter().filter(|&&h| 2 * h > reps).count()
}

/// CPA at `snr` repeated `reps` times with `traces` per stage.
pub fn cpa_sweep_point(cfg: &ExperimentConfig, snr: f64, traces: usize, reps: usize) -> Result<SweepRow> {
    let secret = cfg.secret_weights()?;
    let runs: Vec<FullAttackResult> = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let mut dev = SimulatedDevice::new(secret.clone(), Measurement::Snr(snr), seed::derive(cfg.seed, "sweep-device", r));
            cpa::full_array_attack(&mut dev, &cfg.cpa_attack_config(traces, seed::derive(cfg.seed, "sweep-attack", r)))
        })
        .collect::<Result<_>>()?;
    let mut hits = vec![0usize; cfg.n * cfg.n];
    let mut full = 0;
    let mut rho = 0.0;
    for res in &runs {
        for (k, o) in res.outcomes.iter().enumerate() {
            hits[k] += usize::from(o.class.contains(&secret.get(o.pe)));
        }
        full += usize::from(res.correct_count(&secret) == cfg.n * cfg.n);
        let pe = Pe::new(1, 1);
        rho += res.outcome(pe).result.rho_of(secret.get(pe));
    }
    Ok(SweepRow {
        snr,
        attack: AttackKind::Cpa,
        recovered_count: majority(&hits, reps),
        success_rate: full as f64 / reps as f64,
        true_rho: Some(rho / reps as f64),
        traces,
        repetitions: reps,
    })
}

/// Template attack at `snr` repeated `reps` times.
pub fn template_sweep_point(cfg: &ExperimentConfig, snr: f64, reps: usize) -> Result<SweepRow> {
    let secret = cfg.secret_weights()?;
    let mut hits = vec![0usize; cfg.n * cfg.n];
    let mut full = 0;
    let mut traces = 0;
    for r in 0..reps as u64 {
        let (res, _) = run_template(cfg, Some(snr), r)?;
        for o in &res.outcomes {
            hits[(o.pe.col - 1) * cfg.n + o.pe.row - 1] += usize::from(o.class.contains(&secret.get(o.pe)));
        }
        full += usize::from(res.correct_count(&secret) == cfg.n * cfg.n);
        traces = traces.max(res.max_traces_per_target);
    }
    Ok(SweepRow {
        snr,
        attack: AttackKind::Template,
        recovered_count: majority(&hits, reps),
        success_rate: full as f64 / reps as f64,
        true_rho: None,
        traces,
        repetitions: reps,
    })
}

pub fn noise_sweep(cfg: &ExperimentConfig, attack: AttackKind) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if cfg.snr_grid.is_empty() {
        return Err(config_error("snr_grid is empty"));
    }
    cfg.snr_grid
        .iter()
        .map(|&snr| match attack {
            AttackKind::Cpa => cpa_sweep_point(cfg, snr, cfg.cpa.sweep_traces, cfg.cpa.sweep_repetitions),
            AttackKind::Template => template_sweep_point(cfg, snr, cfg.template.sweep_repetitions),
        })
        .collect()
}

/// Lowest SNR of the leading run of full recoveries when walking the grid
/// from high to low SNR.
pub fn success_threshold(rows: &[SweepRow], total: usize) -> Option<f64> {
    let mut sorted: Vec<&SweepRow> = rows.iter().collect();
    sorted.sort_by(|a, b| b.snr.total_cmp(&a.snr));
    sorted.iter().take_while(|r| r.recovered_count == total).last().map(|r| r.snr)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("snr,attack,recovered_count,success_rate,true_rho,traces,repetitions\n");
    for r in rows {
        let attack = match r.attack {
            AttackKind::Cpa => "cpa",
            AttackKind::Template => "template",
        };
        let rho = r.true_rho.map_or(String::new(), |v| format!("{v:?}"));
        let _ = writeln!(
            s,
            "{:?},{attack},{},{:?},{rho},{},{}",
            r.snr, r.recovered_count, r.success_rate, r.traces, r.repetitions
        );
    }
    s
}

/// Line plot of the true-candidate rho (CPA) or success rate against SNR.
pub fn sweep_svg(rows: &[SweepRow], total: usize) -> String {
    let (w, h, m) = (640.0, 400.0, 60.0);
    let max_snr = rows.iter().map(|r| r.snr).fold(1.0, f64::max);
    let x = |snr: f64| m + (snr / max_snr) * (w - 2.0 * m);
    let y = |v: f64| h - m - v.clamp(0.0, 1.0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m);
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{tick}</text>"#, m - 6.0, y(tick) + 4.0);
    }
    let mut sorted: Vec<&SweepRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.snr.total_cmp(&b.snr));
    for r in &sorted {
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{}</text>"#, x(r.snr), h - m + 16.0, r.snr);
    }
    let series: [(&str, &str, Box<dyn Fn(&SweepRow) -> Option<f64>>); 2] = [
        ("true rho (PE11)", "steelblue", Box::new(|r: &SweepRow| r.true_rho.map(f64::abs))),
        ("recovered / total", "firebrick", Box::new(move |r: &SweepRow| Some(r.recovered_count as f64 / total as f64))),
    ];
    for (i, (label, color, f)) in series.iter().enumerate() {
        let pts: Vec<String> = sorted.iter().filter_map(|r| f(r).map(|v| format!("{:.2},{:.2}", x(r.snr), y(v)))).collect();
        if pts.is_empty() {
            continue;
        }
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" fill="{color}">{label}</text>"#, w - m - 150.0, m + 16.0 * i as f64);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">SNR</text>"#, w / 2.0, h - 12.0);
    s.push_str("</svg>\n");
    s
}

pub fn cmd_noise_sweep(cfg: &ExperimentConfig, overwrite: bool) -> Result<Vec<SweepRow>> {
    let rows = noise_sweep(cfg, cfg.attack)?;
    let dir = cfg.out_dir().join("sweep");
    let name = match cfg.attack {
        AttackKind::Cpa => "cpa",
        AttackKind::Template => "template",
    };
    write_out(&dir.join(format!("{name}_noise_sweep.csv")), sweep_csv(&rows).as_bytes(), overwrite)?;
    write_out(&dir.join(format!("{name}_noise_sweep.svg")), sweep_svg(&rows, cfg.n * cfg.n).as_bytes(), overwrite)?;
    write_json(&rows, &dir.join(format!("{name}_noise_sweep.json")), overwrite)?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyThresholds {
    pub min_pcc: Option<f64>,
    pub max_abs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub report: CorrelationReport,
    pub thresholds: VerifyThresholds,
    pub pass: bool,
}

pub fn verify(a: &TraceSet, b: &TraceSet, reduction: Reduction, thresholds: VerifyThresholds) -> Result<VerifyReport> {
    let report = compare_trace_sets(a, b, reduction)?;
    let pass = thresholds.min_pcc.is_none_or(|m| report.pcc >= m)
        && thresholds.max_abs.is_none_or(|m| report.pcc.abs() < m && report.scc.abs() < m);
    Ok(VerifyReport { report, thresholds, pass })
}

/// Collects whatever summaries exist under the output directory into a
/// Markdown report.
pub fn cmd_report(out_dir: &Path, overwrite: bool) -> Result<PathBuf> {
    let mut md = String::from("# Experiment report\n");
    let mut found = false;
    if let Ok(g) = read_json::<GenReport>(&out_dir.join("gen.json")) {
        found = true;
        let _ = write!(
            md,
            "\n## Trace generation\n\n- traces: {}\n- file digest: `{}`\n- weights digest: `{}`\n- noise sigma: {}\n",
            g.traces,
            g.file_digest,
            g.weights_digest,
            g.sigma.map_or("none".into(), |s| format!("{s:.4}"))
        );
    }
    for (title, path) in [("CPA", out_dir.join("cpa/summary.json")), ("Template attack", out_dir.join("template/summary.json"))] {
        let Ok(s) = read_json::<AttackSummary>(&path) else { continue };
        found = true;
        let _ = writeln!(md, "\n## {title}\n");
        let _ = writeln!(
            md,
            "- recovered: {}/{} (traces used {}, at most {} per target, snr {})",
            s.correct.map_or("?".into(), |c| c.to_string()),
            s.total,
            s.traces_used,
            s.max_traces_per_target,
            s.snr.map_or("none".into(), |v| v.to_string())
        );
        if !s.ambiguous_columns.is_empty() {
            let _ = writeln!(md, "- columns ambiguous up to scaling: {:?}", s.ambiguous_columns);
        }
        let _ = writeln!(md, "\n| PE | recovered | class | true | rank | rho |\n|---|---|---|---|---|---|");
        for p in &s.pes {
            let _ = writeln!(
                md,
                "| {} | {} | {:?} | {} | {} | {} |",
                p.pe,
                p.recovered,
                p.class,
                p.true_weight.map_or("-".into(), |v| v.to_string()),
                p.true_rank.map_or("-".into(), |v| v.to_string()),
                p.true_rho.map_or("-".into(), |v| format!("{v:.3}"))
            );
        }
        for w in &s.warnings {
            let _ = writeln!(md, "\n> warning: {w}");
        }
    }
    for name in ["cpa", "template"] {
        let Ok(rows) = read_json::<Vec<SweepRow>>(&out_dir.join(format!("sweep/{name}_noise_sweep.json"))) else { continue };
        found = true;
        let _ = writeln!(md, "\n## Noise sweep ({name})\n\n| SNR | recovered | success rate | true rho | traces |\n|---|---|---|---|---|");
        for r in &rows {
            let _ = writeln!(
                md,
                "| {} | {} | {:.2} | {} | {} |",
                r.snr,
                r.recovered_count,
                r.success_rate,
                r.true_rho.map_or("-".into(), |v| format!("{v:.3}")),
                r.traces
            );
        }
    }
    if !found {
        return Err(Error::InvalidParameter(format!("no experiment outputs found in {}", out_dir.display())));
    }
    let path = out_dir.join("report.md");
    write_out(&path, md.as_bytes(), overwrite)?;
    Ok(path)
}

/// JSON text of `cfg`, as accepted by [`ExperimentConfig::from_json`].
pub fn config_json(cfg: &ExperimentConfig) -> Result<String> {
    Ok(String::from_utf8(to_json_bytes(cfg)?).expect("json is utf-8"))
}

pub fn save_trace_set(ts: &TraceSet, path: &Path, overwrite: bool) -> Result<()> {
    write_trace_set(ts, path, overwrite)
}
