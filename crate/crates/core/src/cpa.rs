//! Correlation power analysis against the stationary weights.
//!
//! For a target PE and each of the 256 candidate weights the attacker predicts
//! a leakage value per sample, correlates it with the recorded power at the
//! target's estimation point and ranks candidates by `|rho|`.
//!
//! Two leakage models are available: the register Hamming distance of the
//! target's partial-sum register, and the full PE expense (multiplier, adder
//! and register) replicated from the power model. Expenses of PEs that are
//! already known to the attacker can be subtracted from the trace before
//! correlating, which removes their algorithmic noise.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::device::TraceSource;
use crate::error::{Error, Result};
use crate::power::mac_expense;
use crate::seed;
use crate::stats::{self, CoMoments};
use crate::systolic::{InputSample, Pe, WeightMatrix, ACC_MASK};
use crate::trace::TraceSet;

pub const CANDIDATES: usize = 256;

/// Hamming distance between two register words.
pub fn hd(x: u32, y: u32) -> u32 {
    (x ^ y).count_ones()
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    stats::pcc(x, y)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LeakageModel {
    /// HD of the target register transition (from a reset register).
    RegisterHd,
    /// Multiplier + adder + register expense of the target PE.
    #[default]
    PeExpense,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackPoints {
    /// Correlate only at the target's fire cycle.
    #[default]
    FireCycle,
    /// Score is the maximum `|rho|` over all cycles.
    AllCycles,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpaOptions {
    pub model: LeakageModel,
    pub points: AttackPoints,
    /// Candidates scoring at least this fraction of the best `|rho|` form the
    /// reported equivalence class.
    pub class_threshold: f64,
}

impl Default for CpaOptions {
    fn default() -> Self {
        Self { model: LeakageModel::PeExpense, points: AttackPoints::FireCycle, class_threshold: 0.95 }
    }
}

/// Partial sum arriving at `target` for `sample`, computed from `weights`.
pub fn upstream_acc(sample: &InputSample, target: Pe, weights: &WeightMatrix) -> u32 {
    (1..target.row)
        .map(|k| u32::from(sample.row(k)) * u32::from(weights.get(Pe::new(k, target.col))))
        .sum::<u32>()
        & ACC_MASK
}

#[inline]
fn leakage(model: LeakageModel, input: u8, candidate: u8, acc_in: u32) -> f64 {
    match model {
        LeakageModel::RegisterHd => {
            let reg_new = (u32::from(input) * u32::from(candidate) + acc_in) & ACC_MASK;
            f64::from(hd(0, reg_new))
        }
        LeakageModel::PeExpense => f64::from(mac_expense(input, candidate, acc_in, 0)),
    }
}

/// Register-HD estimates for `candidate` at `target`, with the upstream
/// partial sums rebuilt from `upstream` (rows below the target row are read).
pub fn hd_estimates(candidate: u8, samples: &[InputSample], target: Pe, upstream: &WeightMatrix) -> Vec<f64> {
    estimates(LeakageModel::RegisterHd, candidate, samples, target, upstream)
}

pub fn estimates(
    model: LeakageModel,
    candidate: u8,
    samples: &[InputSample],
    target: Pe,
    upstream: &WeightMatrix,
) -> Vec<f64> {
    samples
        .iter()
        .map(|s| leakage(model, s.row(target.row), candidate, upstream_acc(s, target, upstream)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub candidate: u8,
    pub rho: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpaResult {
    pub target: Pe,
    /// Sorted by `|rho|` descending; ranks run 1..=256.
    pub scores: Vec<CandidateScore>,
    pub recovered: u8,
    pub equivalence_class: Vec<u8>,
    /// Cycle (1-based) at which the recovered candidate peaked.
    pub cycle: usize,
}

impl CpaResult {
    pub fn rho_of(&self, candidate: u8) -> f64 {
        self.scores.iter().find(|s| s.candidate == candidate).map_or(0.0, |s| s.rho)
    }

    pub fn rank_of(&self, candidate: u8) -> usize {
        self.scores.iter().find(|s| s.candidate == candidate).map_or(CANDIDATES, |s| s.rank)
    }
}

/// Which weights the attacker already knows. Known PEs whose partial-sum
/// chain is fully determined have their expense subtracted from the trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Knowledge {
    pub weights: WeightMatrix,
    known: Vec<bool>,
}

impl Knowledge {
    pub fn unknown(n: usize) -> Result<Self> {
        Ok(Self { weights: WeightMatrix::zeros(n)?, known: vec![false; n * n] })
    }

    /// Only the listed weights are assumed; nothing else is known.
    pub fn from_weights(weights: WeightMatrix) -> Self {
        let n = weights.n();
        Self { weights, known: vec![false; n * n] }
    }

    pub fn set(&mut self, pe: Pe, weight: u8) {
        self.weights.set(pe, weight);
        self.known[pe.index(self.weights.n())] = true;
    }

    pub fn forget(&mut self, pe: Pe) {
        self.known[pe.index(self.weights.n())] = false;
    }

    pub fn is_known(&self, pe: Pe) -> bool {
        self.known[pe.index(self.weights.n())]
    }
}

/// Precomputed view of one attack trace set.
struct Prepared<'a> {
    inputs: &'a [InputSample],
    columns: Vec<Vec<f64>>,
    silent_rows: Vec<bool>,
}

impl<'a> Prepared<'a> {
    fn new(ts: &'a TraceSet) -> Result<Self> {
        let inputs = ts.inputs();
        if inputs.len() != ts.len() {
            return Err(Error::LengthMismatch { left: ts.len(), right: inputs.len() });
        }
        let n = ts.meta.n;
        if inputs.iter().any(|s| s.len() != n) {
            return Err(Error::DimensionMismatch { expected: n, got: inputs[0].len() });
        }
        let columns: Vec<Vec<f64>> = (0..ts.trace_len()).map(|t| ts.column(t)).collect();
        if columns.iter().all(|c| stats::variance(c) == 0.0) {
            return Err(Error::Degenerate("every cycle of the trace set is constant".into()));
        }
        let silent_rows = (1..=n).map(|r| inputs.iter().all(|s| s.row(r) == 0)).collect();
        Ok(Self { inputs, columns, silent_rows })
    }

    // A PE's expense can be predicted when every active PE above it (and the
    // PE itself, unless its input is silent) is known.
    fn predictable(&self, pe: Pe, k: &Knowledge) -> bool {
        (1..=pe.row).all(|r| self.silent_rows[r - 1] || k.is_known(Pe::new(r, pe.col)))
    }

    fn residual(&self, target: Pe, cycle: usize, k: &Knowledge) -> Vec<f64> {
        let n = k.weights.n();
        let mut out = self.columns[cycle - 1].clone();
        let others: Vec<Pe> = Pe::column_major(n)
            .filter(|&p| p != target && p.fire_cycle() == cycle && self.predictable(p, k))
            .collect();
        if others.is_empty() {
            return out;
        }
        for (v, s) in out.iter_mut().zip(self.inputs) {
            for &p in &others {
                let acc = upstream_acc(s, p, &k.weights);
                *v -= f64::from(mac_expense(s.row(p.row), k.weights.get(p), acc, 0));
            }
        }
        out
    }
}

fn correlate(h: &[f64], p: &[f64]) -> f64 {
    let mut m = CoMoments::default();
    for (&a, &b) in h.iter().zip(p) {
        m.push(a, b);
    }
    m.correlation().unwrap_or(0.0)
}

fn score_candidates(
    prep: &Prepared<'_>,
    target: Pe,
    k: &Knowledge,
    opts: &CpaOptions,
) -> Vec<(f64, usize)> {
    let n = k.weights.n();
    let cycles: Vec<usize> = match opts.points {
        AttackPoints::FireCycle => vec![target.fire_cycle()],
        AttackPoints::AllCycles => (1..=2 * n - 1).collect(),
    };
    let series: Vec<Vec<f64>> = cycles.iter().map(|&t| prep.residual(target, t, k)).collect();
    let accs: Vec<u32> = prep.inputs.iter().map(|s| upstream_acc(s, target, &k.weights)).collect();
    let inputs: Vec<u8> = prep.inputs.iter().map(|s| s.row(target.row)).collect();
    (0..CANDIDATES)
        .into_par_iter()
        .map(|c| {
            let h: Vec<f64> = inputs.iter().zip(&accs).map(|(&a, &acc)| leakage(opts.model, a, c as u8, acc)).collect();
            let mut best = (0.0f64, cycles[0]);
            for (t, p) in cycles.iter().zip(&series) {
                let r = correlate(&h, p);
                if r.abs() > best.0.abs() {
                    best = (r, *t);
                }
            }
            best
        })
        .collect()
}

fn assemble(target: Pe, raw: Vec<(f64, usize)>, threshold: f64) -> CpaResult {
    let mut order: Vec<usize> = (0..CANDIDATES).collect();
    // Stable on ties: lower candidate first.
    order.sort_by(|&a, &b| raw[b].0.abs().total_cmp(&raw[a].0.abs()));
    let scores: Vec<CandidateScore> = order
        .iter()
        .enumerate()
        .map(|(i, &c)| CandidateScore { candidate: c as u8, rho: raw[c].0, rank: i + 1 })
        .collect();
    let best = scores[0].rho.abs();
    let equivalence_class = scores.iter().take_while(|s| s.rho.abs() >= threshold * best).map(|s| s.candidate).collect();
    CpaResult { target, recovered: scores[0].candidate, cycle: raw[order[0]].1, scores, equivalence_class }
}

/// Ranks all candidates for `target`, with the upstream partial sums rebuilt
/// from `upstream`. No other activity is removed from the trace.
pub fn rank_candidates(ts: &TraceSet, target: Pe, upstream: &WeightMatrix, opts: &CpaOptions) -> Result<CpaResult> {
    rank_candidates_with(ts, target, &Knowledge::from_weights(upstream.clone()), opts)
}

/// As [`rank_candidates`], subtracting the expense of every predictable PE
/// other than the target first.
pub fn rank_candidates_with(ts: &TraceSet, target: Pe, k: &Knowledge, opts: &CpaOptions) -> Result<CpaResult> {
    target.check(ts.meta.n)?;
    if k.weights.n() != ts.meta.n {
        return Err(Error::DimensionMismatch { expected: ts.meta.n, got: k.weights.n() });
    }
    let prep = Prepared::new(ts)?;
    Ok(assemble(target, score_candidates(&prep, target, k, opts), opts.class_threshold))
}

/// Input values whose Hamming weight is exactly 4. Fixing the operand weight
/// keeps the number of partial-product additions constant across samples.
pub fn balanced_values() -> Vec<u8> {
    (1..=255u8).filter(|v| v.count_ones() == 4).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValuePool {
    /// Uniform over 1..=255.
    Nonzero,
    /// Uniform over the 70 values of Hamming weight 4.
    #[default]
    Balanced,
}

impl ValuePool {
    fn values(self) -> Vec<u8> {
        match self {
            Self::Nonzero => (1..=255).collect(),
            Self::Balanced => balanced_values(),
        }
    }
}

/// Rows whose inputs are driven when attacking `target`: its own row and the
/// row directly above, so the arriving partial sum is data dependent.
pub fn feeding_rows(target: Pe) -> Vec<usize> {
    if target.row == 1 {
        vec![1]
    } else {
        vec![target.row - 1, target.row]
    }
}

/// Chosen inputs: `rows` drawn from `pool`, every other element zero. No
/// sample is all-zero.
pub fn chosen_inputs(n: usize, rows: &[usize], count: usize, pool: ValuePool, seed: u64) -> Vec<InputSample> {
    let values = pool.values();
    let mut rng = seed::rng(seed, "chosen-inputs", 0);
    (0..count)
        .map(|_| {
            let mut v = vec![0u8; n];
            for &r in rows {
                v[r - 1] = values[rng.random_range(0..values.len())];
            }
            InputSample(v)
        })
        .collect()
}

/// Tuned inputs for attacking `target`.
pub fn chosen_plaintext_inputs(n: usize, target: Pe, count: usize, seed: u64) -> Result<Vec<InputSample>> {
    target.check(n)?;
    Ok(chosen_inputs(n, &feeding_rows(target), count, ValuePool::Balanced, seed))
}

/// Uniformly random inputs on every row.
pub fn random_inputs(n: usize, count: usize, seed: u64) -> Vec<InputSample> {
    let mut rng = seed::rng(seed, "random-inputs", 0);
    (0..count).map(|_| InputSample((0..n).map(|_| rng.random()).collect())).collect()
}

/// `candidate,rho,rank` rows in rank order.
pub fn scores_csv(res: &CpaResult) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    w.write_record(["candidate", "rho", "rank"]).map_err(err)?;
    for s in &res.scores {
        w.write_record([s.candidate.to_string(), format!("{:?}", s.rho), s.rank.to_string()]).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// One set of uniformly random inputs serves every row.
    RandomInput,
    /// A dedicated set per array row, driving only the rows it needs.
    #[default]
    InputTuned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FullAttackConfig {
    pub strategy: Strategy,
    pub traces_per_stage: usize,
    pub pool: ValuePool,
    pub options: CpaOptions,
    /// Column prefixes kept per row; exact ties are always kept.
    pub beam_width: usize,
    /// Subtract the expense of already recovered PEs before correlating.
    pub remove_known: bool,
    pub seed: u64,
}

impl Default for FullAttackConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::InputTuned,
            traces_per_stage: 20_000,
            pool: ValuePool::Balanced,
            options: CpaOptions::default(),
            beam_width: 16,
            remove_known: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeOutcome {
    pub pe: Pe,
    pub recovered: u8,
    /// Values this PE takes across the equally scoring column solutions.
    pub class: Vec<u8>,
    pub result: CpaResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullAttackResult {
    pub recovered: WeightMatrix,
    /// Column-major, top to bottom.
    pub outcomes: Vec<PeOutcome>,
    /// Per column, every column vector scoring exactly like the best one.
    pub column_solutions: Vec<Vec<Vec<u8>>>,
    pub traces_used: usize,
    pub config: FullAttackConfig,
}

impl FullAttackResult {
    pub fn outcome(&self, pe: Pe) -> &PeOutcome {
        self.outcomes.iter().find(|o| o.pe == pe).expect("every PE has an outcome")
    }

    /// A column is ambiguous when several solutions fit the traces equally.
    pub fn ambiguous_columns(&self) -> Vec<usize> {
        (1..=self.recovered.n()).filter(|&c| self.column_solutions[c - 1].len() > 1).collect()
    }

    /// Number of PEs whose true weight lies in the reported class.
    pub fn correct_count(&self, truth: &WeightMatrix) -> usize {
        self.outcomes.iter().filter(|o| o.class.contains(&truth.get(o.pe))).count()
    }

    /// Number of PEs whose single best guess is exactly right.
    pub fn exact_count(&self, truth: &WeightMatrix) -> usize {
        self.outcomes.iter().filter(|o| o.recovered == truth.get(o.pe)).count()
    }
}

#[derive(Debug, Clone)]
struct Branch {
    prefix: Vec<u8>,
    score: f64,
    results: Vec<CpaResult>,
}

fn same_score(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

fn prune(mut next: Vec<Branch>, threshold: f64, width: usize) -> Vec<Branch> {
    next.sort_by(|a, b| b.score.total_cmp(&a.score));
    let best = next[0].score;
    let mut kept = 0;
    next.retain(|b| {
        let keep = same_score(b.score, best) || (b.score >= threshold * best && kept < width);
        kept += usize::from(keep);
        keep
    });
    next
}

fn stage_rows(strategy: Strategy, n: usize, row: usize) -> Vec<usize> {
    match strategy {
        Strategy::RandomInput => (1..=n).collect(),
        Strategy::InputTuned => feeding_rows(Pe::new(row, 1)),
    }
}

/// Trace sets the attack needs from `device`: one per array row when tuned,
/// a single shared set otherwise.
pub fn acquire_stages(device: &mut dyn TraceSource, cfg: &FullAttackConfig) -> Result<Vec<TraceSet>> {
    let n = device.n();
    if cfg.traces_per_stage < 2 {
        return Err(Error::InvalidParameter("need at least two traces per stage".into()));
    }
    match cfg.strategy {
        Strategy::RandomInput => {
            Ok(vec![device.acquire(&random_inputs(n, cfg.traces_per_stage, seed::derive(cfg.seed, "stage", 0)))?])
        }
        Strategy::InputTuned => (1..=n)
            .map(|row| {
                let samples = chosen_inputs(
                    n,
                    &stage_rows(cfg.strategy, n, row),
                    cfg.traces_per_stage,
                    cfg.pool,
                    seed::derive(cfg.seed, "stage", row as u64),
                );
                device.acquire(&samples)
            })
            .collect(),
    }
}

/// Recovers every weight of the array behind `device`, row by row and left to
/// right within a row. Each column keeps a beam of prefixes so that a row
/// whose candidates tie can be resolved by the rows below.
pub fn full_array_attack(device: &mut dyn TraceSource, cfg: &FullAttackConfig) -> Result<FullAttackResult> {
    let sets = acquire_stages(device, cfg)?;
    attack_stages(&sets, cfg)
}

/// Runs the attack on recorded sets: either one set per row, or a single set
/// used for every row.
pub fn attack_stages(stage_sets: &[TraceSet], cfg: &FullAttackConfig) -> Result<FullAttackResult> {
    let Some(first) = stage_sets.first() else {
        return Err(Error::Empty("stage trace sets"));
    };
    let n = first.meta.n;
    if stage_sets.len() != 1 && stage_sets.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: stage_sets.len() });
    }
    if cfg.beam_width == 0 {
        return Err(Error::InvalidParameter("beam width must be positive".into()));
    }
    let traces_used = stage_sets.iter().map(TraceSet::len).sum();
    let sets: Vec<&TraceSet> = (0..n).map(|r| &stage_sets[r.min(stage_sets.len() - 1)]).collect();
    let mut beams: Vec<Vec<Branch>> = vec![vec![Branch { prefix: vec![], score: 0.0, results: vec![] }]; n];
    for row in 1..=n {
        let prep = Prepared::new(sets[row - 1])?;
        for col in 1..=n {
            let target = Pe::new(row, col);
            let mut base = Knowledge::unknown(n)?;
            if cfg.remove_known {
                for (c, beam) in beams.iter().enumerate() {
                    if c + 1 != col {
                        for (r, &w) in beam[0].prefix.iter().enumerate() {
                            base.set(Pe::new(r + 1, c + 1), w);
                        }
                    }
                }
            }
            let mut next = Vec::new();
            for branch in &beams[col - 1] {
                let mut k = base.clone();
                for (r, &w) in branch.prefix.iter().enumerate() {
                    k.set(Pe::new(r + 1, col), w);
                }
                let res = assemble(target, score_candidates(&prep, target, &k, &cfg.options), cfg.options.class_threshold);
                for s in &res.scores {
                    let mut prefix = branch.prefix.clone();
                    prefix.push(s.candidate);
                    let mut results = branch.results.clone();
                    results.push(res.clone());
                    next.push(Branch { prefix, score: s.rho.abs(), results });
                }
            }
            beams[col - 1] = prune(next, cfg.options.class_threshold, cfg.beam_width);
        }
    }

    let mut recovered = WeightMatrix::zeros(n)?;
    let mut outcomes = Vec::with_capacity(n * n);
    let mut column_solutions = Vec::with_capacity(n);
    for (c, beam) in beams.into_iter().enumerate() {
        let best = &beam[0];
        let tied: Vec<&Branch> = beam.iter().filter(|b| same_score(b.score, best.score)).collect();
        for (r, &w) in best.prefix.iter().enumerate() {
            let pe = Pe::new(r + 1, c + 1);
            recovered.set(pe, w);
            let mut class: Vec<u8> = tied.iter().map(|b| b.prefix[r]).collect();
            class.sort_unstable();
            class.dedup();
            outcomes.push(PeOutcome { pe, recovered: w, class, result: best.results[r].clone() });
        }
        column_solutions.push(tied.iter().map(|b| b.prefix.clone()).collect());
    }
    Ok(FullAttackResult {
        recovered,
        outcomes,
        column_solutions,
        traces_used,
        config: *cfg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::power::generate_trace_set;
    use crate::trace::SetPurpose;

    fn single_weight(pe: Pe, w: u8) -> WeightMatrix {
        let mut m = WeightMatrix::zeros(3).unwrap();
        m.set(pe, w);
        m
    }

    #[test]
    fn hd_basics() {
        assert_eq!(hd(12345, 12345), 0);
        assert_eq!(hd(0, ACC_MASK), 18);
        assert_eq!(hd(0b1100, 0b0101), hd(0b0101, 0b1100));
    }

    #[test]
    fn estimate_shapes() {
        let samples = chosen_plaintext_inputs(3, Pe::new(1, 1), 50, 1).unwrap();
        let zeros = WeightMatrix::zeros(3).unwrap();
        assert!(hd_estimates(0, &samples, Pe::new(1, 1), &zeros).iter().all(|&v| v == 0.0));
        let est = hd_estimates(23, &samples, Pe::new(1, 1), &zeros);
        for (e, s) in est.iter().zip(&samples) {
            assert_eq!(*e, f64::from((u32::from(s.row(1)) * 23).count_ones()));
        }
    }

    #[test]
    fn pearson_sign() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn tuned_inputs() {
        let s = chosen_plaintext_inputs(3, Pe::new(1, 1), 20_000, 3).unwrap();
        assert_eq!(s.len(), 20_000);
        assert!(s.iter().all(|x| x.row(1) != 0 && x.row(2) == 0 && x.row(3) == 0));
        assert_eq!(s, chosen_plaintext_inputs(3, Pe::new(1, 1), 20_000, 3).unwrap());
        let s = chosen_plaintext_inputs(3, Pe::new(3, 2), 100, 3).unwrap();
        assert!(s.iter().all(|x| x.row(1) == 0 && x.row(2) != 0 && x.row(3) != 0));
        assert!(chosen_plaintext_inputs(3, Pe::new(4, 1), 1, 0).is_err());
    }

    #[test]
    fn shift_relatives_tie_for_top_row_hd() {
        let samples = chosen_plaintext_inputs(3, Pe::new(1, 1), 2000, 11).unwrap();
        let ts = generate_trace_set(&single_weight(Pe::new(1, 1), 23), &samples, 0, SetPurpose::Attack).unwrap();
        let opts = CpaOptions { model: LeakageModel::RegisterHd, ..Default::default() };
        let res = rank_candidates(&ts, Pe::new(1, 1), &WeightMatrix::zeros(3).unwrap(), &opts).unwrap();
        assert!(res.equivalence_class.contains(&23));
        for c in [46, 92, 184] {
            assert_eq!(res.rho_of(c), res.rho_of(23));
            assert!(res.equivalence_class.contains(&c));
        }
        let ranks: Vec<usize> = res.scores.iter().map(|s| s.rank).collect();
        assert_eq!(ranks, (1..=256).collect::<Vec<_>>());
    }

    #[test]
    fn scaling_traces_keeps_ranking() {
        let samples = chosen_plaintext_inputs(3, Pe::new(1, 1), 1000, 5).unwrap();
        let w = WeightMatrix::new(3, vec![77, 3, 9, 200, 14, 5, 6, 7, 8]).unwrap();
        let ts = generate_trace_set(&w, &samples, 0, SetPurpose::Attack).unwrap();
        let mut scaled = ts.clone();
        for t in &mut scaled.traces {
            for v in &mut t.values {
                *v *= 3.7;
            }
        }
        let up = WeightMatrix::zeros(3).unwrap();
        let opts = CpaOptions::default();
        let a = rank_candidates(&ts, Pe::new(1, 1), &up, &opts).unwrap();
        let b = rank_candidates(&scaled, Pe::new(1, 1), &up, &opts).unwrap();
        let ca: Vec<u8> = a.scores.iter().map(|s| s.candidate).collect();
        let cb: Vec<u8> = b.scores.iter().map(|s| s.candidate).collect();
        assert_eq!(ca, cb);
    }

    #[test]
    fn degenerate_set_rejected() {
        let samples = vec![InputSample::zeros(3); 10];
        let ts = generate_trace_set(&WeightMatrix::zeros(3).unwrap(), &samples, 0, SetPurpose::Attack).unwrap();
        assert!(matches!(
            rank_candidates(&ts, Pe::new(1, 1), &WeightMatrix::zeros(3).unwrap(), &CpaOptions::default()),
            Err(Error::Degenerate(_))
        ));
    }
}
