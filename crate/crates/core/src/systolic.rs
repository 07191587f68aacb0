//! Cycle-accurate functional model of a weight-stationary systolic array.
//!
//! PE(i, j) holds weight `w[i][j]` and receives input element `a_i`. Partial
//! sums flow down each column: PE(i, j) adds its product to the register value
//! of PE(i-1, j). With skewed input delivery, PE(i, j) fires at cycle
//! `i + j - 1` (1-based), so column `j` delivers its result at cycle `n + j - 1`
//! and one inference spans `2n - 1` cycles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Partial-sum register width in bits.
pub const ACC_BITS: u32 = 18;
pub const ACC_MASK: u32 = (1 << ACC_BITS) - 1;

/// Coordinates of a processing element, 1-based as in `PE(1,1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pe {
    pub row: usize,
    pub col: usize,
}

impl Pe {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn check(self, n: usize) -> Result<Self> {
        if self.row == 0 || self.col == 0 || self.row > n || self.col > n {
            return Err(Error::PeOutOfRange { row: self.row, col: self.col, n });
        }
        Ok(self)
    }

    /// Row-major index into an `n x n` grid.
    pub fn index(self, n: usize) -> usize {
        (self.row - 1) * n + (self.col - 1)
    }

    /// Cycle at which this PE performs its MAC for a sample (1-based).
    pub fn fire_cycle(self) -> usize {
        self.row + self.col - 1
    }

    /// All PEs of an `n x n` array in column-major recovery order: columns
    /// left to right, top to bottom within a column.
    pub fn column_major(n: usize) -> impl Iterator<Item = Pe> {
        (1..=n).flat_map(move |col| (1..=n).map(move |row| Pe::new(row, col)))
    }
}

impl std::fmt::Display for Pe {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PE({},{})", self.row, self.col)
    }
}

/// Bounds-checked form of [`Pe::fire_cycle`].
pub fn fire_cycle(pe: Pe, n: usize) -> Result<usize> {
    Ok(pe.check(n)?.fire_cycle())
}

/// Number of cycles one sample occupies the array.
pub fn trace_len(n: usize) -> usize {
    2 * n - 1
}

/// The secret `n x n` 8-bit weights, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WeightMatrix {
    n: usize,
    w: Vec<u8>,
}

impl WeightMatrix {
    pub fn new(n: usize, w: Vec<u8>) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyArray);
        }
        if w.len() != n * n {
            return Err(Error::DimensionMismatch { expected: n * n, got: w.len() });
        }
        Ok(Self { n, w })
    }

    pub fn zeros(n: usize) -> Result<Self> {
        Self::new(n, vec![0; n * n])
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: rows.iter().map(Vec::len).find(|&l| l != n).unwrap_or(0),
            });
        }
        Self::new(n, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, pe: Pe) -> u8 {
        self.w[pe.index(self.n)]
    }

    pub fn set(&mut self, pe: Pe, value: u8) {
        let idx = pe.index(self.n);
        self.w[idx] = value;
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.w
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        self.w.chunks(self.n).map(<[u8]>::to_vec).collect()
    }
}

/// One input vector streamed through the array; `a[i-1]` feeds row `i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InputSample(pub Vec<u8>);

impl InputSample {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0)
    }

    /// Input element delivered to `row` (1-based).
    pub fn row(&self, row: usize) -> u8 {
        self.0[row - 1]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeState {
    pub weight: u8,
    pub reg: u32,
    pub reg_prev: u32,
}

/// Whether partial-sum registers are cleared before each sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegisterPolicy {
    #[default]
    ResetPerSample,
    Carry,
}

/// Per-PE MAC activity at one cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityEvent {
    pub cycle: usize,
    pub pe: Pe,
    pub input: u8,
    pub weight: u8,
    pub acc_in: u32,
    pub acc_out: u32,
    pub reg_old: u32,
    pub reg_new: u32,
}

impl ActivityEvent {
    pub fn check_consistent(&self) -> Result<()> {
        let expected = mac(self.input, self.weight, self.acc_in);
        if self.acc_out != expected {
            return Err(Error::InconsistentEvent {
                cycle: self.cycle,
                reason: format!("acc_out {} != {}", self.acc_out, expected),
            });
        }
        if self.reg_new != self.acc_out {
            return Err(Error::InconsistentEvent {
                cycle: self.cycle,
                reason: format!("reg_new {} != acc_out {}", self.reg_new, self.acc_out),
            });
        }
        if self.acc_in > ACC_MASK || self.reg_old > ACC_MASK {
            return Err(Error::InconsistentEvent {
                cycle: self.cycle,
                reason: "value exceeds 18-bit register".into(),
            });
        }
        Ok(())
    }
}

/// `input * weight + acc_in` truncated to the register width.
pub fn mac(input: u8, weight: u8, acc_in: u32) -> u32 {
    (u32::from(input) * u32::from(weight) + acc_in) & ACC_MASK
}

#[derive(Debug, Clone)]
pub struct Inference {
    /// Column results, `outputs[j-1]` available at cycle `n + j - 1`.
    pub outputs: Vec<u32>,
    /// Exactly `n^2` events ordered by (cycle, row).
    pub events: Vec<ActivityEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArrayState {
    n: usize,
    pes: Vec<PeState>,
    policy: RegisterPolicy,
}

impl ArrayState {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyArray);
        }
        Ok(Self { n, pes: vec![PeState::default(); n * n], policy: RegisterPolicy::default() })
    }

    /// Fresh array holding `m`, all registers zero.
    pub fn loaded(m: &WeightMatrix) -> Self {
        let mut s = Self::new(m.n()).expect("weight matrix has n >= 1");
        s.load_weights(m).expect("dimensions agree");
        s
    }

    pub fn with_policy(mut self, policy: RegisterPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn pe(&self, pe: Pe) -> &PeState {
        &self.pes[pe.index(self.n)]
    }

    pub fn load_weights(&mut self, m: &WeightMatrix) -> Result<()> {
        if m.n() != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, got: m.n() });
        }
        for (st, &w) in self.pes.iter_mut().zip(m.as_slice()) {
            *st = PeState { weight: w, reg: 0, reg_prev: 0 };
        }
        Ok(())
    }

    pub fn reset_registers(&mut self) {
        for st in &mut self.pes {
            st.reg = 0;
            st.reg_prev = 0;
        }
    }

    /// Streams one sample through the array and records every MAC.
    pub fn stream_inference(&mut self, sample: &InputSample) -> Result<Inference> {
        let n = self.n;
        if sample.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: sample.len() });
        }
        if self.policy == RegisterPolicy::ResetPerSample {
            self.reset_registers();
        }
        let mut events = Vec::with_capacity(n * n);
        for cycle in 1..=trace_len(n) {
            // PEs on the anti-diagonal row + col - 1 == cycle, top row first.
            for row in 1..=n.min(cycle) {
                let col = cycle + 1 - row;
                if col > n {
                    continue;
                }
                let pe = Pe::new(row, col);
                let acc_in = if row == 1 { 0 } else { self.pes[Pe::new(row - 1, col).index(n)].reg };
                let st = &mut self.pes[pe.index(n)];
                let input = sample.row(row);
                let acc_out = mac(input, st.weight, acc_in);
                events.push(ActivityEvent {
                    cycle,
                    pe,
                    input,
                    weight: st.weight,
                    acc_in,
                    acc_out,
                    reg_old: st.reg,
                    reg_new: acc_out,
                });
                st.reg_prev = st.reg;
                st.reg = acc_out;
            }
        }
        let outputs = (1..=n).map(|col| self.pes[Pe::new(n, col).index(n)].reg).collect();
        Ok(Inference { outputs, events })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reference_outputs(m: &WeightMatrix, s: &InputSample) -> Vec<u32> {
        let n = m.n();
        let mut out = vec![0u64; n];
        for (j, o) in out.iter_mut().enumerate() {
            for i in 0..n {
                *o += u64::from(s.0[i]) * u64::from(m.as_slice()[i * n + j]);
            }
        }
        out.into_iter().map(|v| (v % (1 << ACC_BITS)) as u32).collect()
    }

    #[test]
    fn load_zero_matrix() {
        let m = WeightMatrix::zeros(3).unwrap();
        let mut s = ArrayState::loaded(&m);
        for pe in Pe::column_major(3) {
            assert_eq!(*s.pe(pe), PeState::default());
        }
        let inf = s.stream_inference(&InputSample::zeros(3)).unwrap();
        assert_eq!(inf.outputs, vec![0, 0, 0]);
    }

    #[test]
    fn load_single_weight() {
        let mut m = WeightMatrix::zeros(3).unwrap();
        m.set(Pe::new(1, 1), 23);
        let s = ArrayState::loaded(&m);
        assert_eq!(s.pe(Pe::new(1, 1)).weight, 23);
        assert_eq!(s.pe(Pe::new(1, 1)).reg, 0);
    }

    #[test]
    fn load_dimension_mismatch() {
        let mut s = ArrayState::new(2).unwrap();
        assert!(matches!(
            s.load_weights(&WeightMatrix::zeros(3).unwrap()),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(WeightMatrix::new(3, vec![0; 8]).is_err());
        assert!(matches!(WeightMatrix::zeros(0), Err(Error::EmptyArray)));
    }

    #[test]
    fn fire_cycles() {
        assert_eq!(fire_cycle(Pe::new(1, 1), 3).unwrap(), 1);
        assert_eq!(fire_cycle(Pe::new(2, 1), 3).unwrap(), 2);
        assert_eq!(fire_cycle(Pe::new(3, 3), 3).unwrap(), 5);
        assert!(fire_cycle(Pe::new(0, 1), 3).is_err());
        assert!(fire_cycle(Pe::new(1, 4), 3).is_err());
    }

    #[test]
    fn column_one_chain() {
        let m = WeightMatrix::from_rows(&[vec![3, 0, 0], vec![5, 0, 0], vec![7, 0, 0]]).unwrap();
        let mut s = ArrayState::loaded(&m);
        let inf = s.stream_inference(&InputSample(vec![11, 13, 17])).unwrap();
        assert_eq!(inf.outputs[0], 17 * 7 + 13 * 5 + 11 * 3);
        let col1: Vec<_> = inf.events.iter().filter(|e| e.pe.col == 1).collect();
        assert_eq!(col1.iter().map(|e| e.cycle).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(col1[0].reg_new, 33);
        assert_eq!(col1[1].acc_in, 33);
        assert_eq!(col1[2].reg_new, 17 * 7 + 13 * 5 + 33);
    }

    #[test]
    fn single_input_max_weight() {
        let mut m = WeightMatrix::zeros(3).unwrap();
        m.set(Pe::new(1, 1), 255);
        let mut s = ArrayState::loaded(&m);
        let inf = s.stream_inference(&InputSample(vec![1, 0, 0])).unwrap();
        assert_eq!(inf.outputs, reference_outputs(&m, &InputSample(vec![1, 0, 0])));
        assert_eq!(inf.outputs[0], 255);
        let last = inf.events.iter().find(|e| e.pe == Pe::new(3, 1)).unwrap();
        assert_eq!(last.cycle, 3);
        assert_eq!(last.reg_new, 255);
    }

    #[test]
    fn zero_input_zero_events() {
        let m = WeightMatrix::new(3, (1..=9).collect()).unwrap();
        let mut s = ArrayState::loaded(&m);
        let inf = s.stream_inference(&InputSample::zeros(3)).unwrap();
        assert!(inf.events.iter().all(|e| e.reg_new == 0));
        assert_eq!(inf.outputs, vec![0, 0, 0]);
    }

    #[test]
    fn carry_policy_keeps_registers() {
        let m = WeightMatrix::new(2, vec![1, 1, 1, 1]).unwrap();
        let mut s = ArrayState::loaded(&m).with_policy(RegisterPolicy::Carry);
        s.stream_inference(&InputSample(vec![3, 4])).unwrap();
        let inf = s.stream_inference(&InputSample(vec![1, 1])).unwrap();
        let e11 = inf.events.iter().find(|e| e.pe == Pe::new(1, 1)).unwrap();
        assert_eq!(e11.reg_old, 3);
        assert_eq!(s.pe(Pe::new(1, 1)).reg_prev, 3);
    }

    #[test]
    fn wrong_sample_length() {
        let mut s = ArrayState::new(3).unwrap();
        assert!(s.stream_inference(&InputSample(vec![1, 2])).is_err());
    }

    fn arb_instance() -> impl Strategy<Value = (WeightMatrix, InputSample)> {
        (1usize..=5).prop_flat_map(|n| {
            (
                proptest::collection::vec(any::<u8>(), n * n),
                proptest::collection::vec(any::<u8>(), n),
            )
                .prop_map(move |(w, a)| (WeightMatrix::new(n, w).unwrap(), InputSample(a)))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn matches_triple_loop((m, s) in arb_instance()) {
            let n = m.n();
            let mut st = ArrayState::loaded(&m);
            let inf = st.stream_inference(&s).unwrap();
            prop_assert_eq!(&inf.outputs, &reference_outputs(&m, &s));
            prop_assert_eq!(inf.events.len(), n * n);
            for e in &inf.events {
                prop_assert_eq!(e.cycle, e.pe.fire_cycle());
                prop_assert!(e.check_consistent().is_ok());
            }
            // Replay the acc_in / reg_new chain.
            for col in 1..=n {
                let mut acc = 0;
                for row in 1..=n {
                    let e = inf.events.iter().find(|e| e.pe == Pe::new(row, col)).unwrap();
                    prop_assert_eq!(e.acc_in, acc);
                    acc = e.reg_new;
                }
                prop_assert_eq!(acc, inf.outputs[col - 1]);
            }
            let again = ArrayState::loaded(&m).stream_inference(&s).unwrap();
            prop_assert_eq!(again.events, inf.events);
        }
    }
}
