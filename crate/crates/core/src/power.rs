//! Input-dependent dynamic power model (the "resource handler").
//!
//! Every operation is charged in integer power-expense units. A full-adder
//! evaluation costs the PM column of the binary-adder table, a ripple-carry add
//! is the sum over its bit positions, a multiply is a shift-and-add series of
//! 18-bit ripple adds, and a register write costs the Hamming distance between
//! the old and new value. Static and clock-network power are not modelled.

use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::systolic::{trace_len, ActivityEvent, ArrayState, InputSample, WeightMatrix, ACC_BITS, ACC_MASK};
use crate::trace::{PowerTrace, SetPurpose, TraceMeta, TraceSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdderRow {
    pub a: u8,
    pub b: u8,
    pub cin: u8,
    pub cout: u8,
    pub s: u8,
    pub state_expense: u32,
    pub ce: u32,
    pub pm: u32,
}

const fn row(a: u8, b: u8, cin: u8, cout: u8, s: u8, state_expense: u32, ce: u32, pm: u32) -> AdderRow {
    AdderRow { a, b, cin, cout, s, state_expense, ce, pm }
}

/// Full-adder power expenses per input combination. Note the
/// `(0,0,1)` row charges its unit as state expense with CE 0.
pub const ADDER_TABLE: [AdderRow; 8] = [
    row(0, 0, 0, 0, 0, 0, 0, 0),
    row(1, 0, 0, 0, 1, 0, 1, 1),
    row(0, 1, 0, 0, 1, 0, 1, 1),
    row(1, 1, 0, 1, 0, 1, 2, 3),
    row(0, 0, 1, 0, 1, 1, 0, 1),
    row(1, 0, 1, 1, 0, 0, 1, 1),
    row(0, 1, 1, 1, 0, 0, 1, 1),
    row(1, 1, 1, 1, 1, 0, 2, 2),
];

// ADDER_TABLE indexed by a | b << 1 | cin << 2.
const PM_BY_BITS: [u32; 8] = {
    let mut t = [0u32; 8];
    let mut i = 0;
    while i < 8 {
        let r = ADDER_TABLE[i];
        t[(r.a | (r.b << 1) | (r.cin << 2)) as usize] = r.pm;
        i += 1;
    }
    t
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FullAdd {
    pub sum: u8,
    pub cout: u8,
    pub pm: u32,
}

/// Evaluates one full adder. Inputs are taken modulo 2.
pub fn full_adder_expense(a: u8, b: u8, cin: u8) -> FullAdd {
    let (a, b, c) = (a & 1, b & 1, cin & 1);
    let total = a + b + c;
    FullAdd { sum: total & 1, cout: total >> 1, pm: PM_BY_BITS[usize::from(a | (b << 1) | (c << 2))] }
}

/// `width`-bit ripple-carry addition with carry-in 0. Returns the wrapped sum
/// and the summed full-adder expense.
pub fn ripple_add_expense(x: u32, y: u32, width: u32) -> (u32, u32) {
    assert!((1..=ACC_BITS).contains(&width), "ripple adder width must be 1..=18");
    let mut carry = 0u32;
    let mut pm = 0;
    for bit in 0..width {
        let a = (x >> bit) & 1;
        let b = (y >> bit) & 1;
        pm += PM_BY_BITS[(a | (b << 1) | (carry << 2)) as usize];
        carry = (a + b + carry) >> 1;
    }
    let mask = if width == 32 { u32::MAX } else { (1 << width) - 1 };
    (x.wrapping_add(y) & mask, pm)
}

/// Shift-and-add multiplier: one 18-bit ripple add of `w << k` into a running
/// accumulator for every set bit `k` of `a`.
pub fn multiply_expense(a: u8, w: u8) -> (u32, u32) {
    let mut acc = 0;
    let mut pm = 0;
    if a == 0 || w == 0 {
        return (0, 0);
    }
    for k in 0..8 {
        if (a >> k) & 1 == 1 {
            let (s, p) = ripple_add_expense(acc, (u32::from(w) << k) & ACC_MASK, ACC_BITS);
            acc = s;
            pm += p;
        }
    }
    (acc, pm)
}

fn multiply_table() -> &'static [u16] {
    static TABLE: OnceLock<Vec<u16>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = vec![0u16; 1 << 16];
        for a in 0..=255u8 {
            for w in 0..=255u8 {
                t[(usize::from(a) << 8) | usize::from(w)] = multiply_expense(a, w).1 as u16;
            }
        }
        t
    })
}

/// Table-backed multiply expense, identical to `multiply_expense(a, w).1`.
#[inline]
pub fn multiply_pm(a: u8, w: u8) -> u32 {
    u32::from(multiply_table()[(usize::from(a) << 8) | usize::from(w)])
}

// Carry-chained 6-bit slices of the ripple adder: entry [cin][x][y] packs the
// slice expense in the upper bits and carry-out in bit 0.
fn slice_table() -> &'static [u16] {
    static TABLE: OnceLock<Vec<u16>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = vec![0u16; 2 * 64 * 64];
        for cin in 0..2u32 {
            for x in 0..64u32 {
                for y in 0..64u32 {
                    let mut carry = cin;
                    let mut pm = 0;
                    for bit in 0..6 {
                        let a = (x >> bit) & 1;
                        let b = (y >> bit) & 1;
                        pm += PM_BY_BITS[(a | (b << 1) | (carry << 2)) as usize];
                        carry = (a + b + carry) >> 1;
                    }
                    t[((cin as usize) << 12) | ((x as usize) << 6) | y as usize] = ((pm << 1) | carry) as u16;
                }
            }
        }
        t
    })
}

/// Expense of an 18-bit ripple add, identical to `ripple_add_expense(x, y, 18).1`.
#[inline]
pub fn ripple_add_pm(x: u32, y: u32) -> u32 {
    let t = slice_table();
    let mut carry = 0usize;
    let mut pm = 0u32;
    for shift in [0, 6, 12] {
        let e = t[(carry << 12) | ((((x >> shift) & 63) as usize) << 6) | ((y >> shift) & 63) as usize];
        pm += u32::from(e >> 1);
        carry = usize::from(e & 1);
    }
    pm
}

/// Register write expense: Hamming distance between old and new contents.
pub fn register_write_expense(old: u32, new: u32) -> u32 {
    (old ^ new).count_ones()
}

/// Single-bit switching cost: only a rising transition is charged.
pub fn bit_flip_expense(old: bool, new: bool) -> u32 {
    u32::from(!old && new)
}

/// Expense of one PE evaluating `input * weight + acc_in` and writing the
/// result over `reg_old`. Shared by the simulator and by attacker-side
/// leakage hypotheses.
#[inline]
pub fn mac_expense(input: u8, weight: u8, acc_in: u32, reg_old: u32) -> u32 {
    let product = (u32::from(input) * u32::from(weight)) & ACC_MASK;
    let acc_out = (product + acc_in) & ACC_MASK;
    multiply_pm(input, weight) + ripple_add_pm(product, acc_in) + register_write_expense(reg_old, acc_out)
}

/// `PM_PE = PM_MAC + PM_Reg` for one event.
pub fn pe_cycle_expense(e: &ActivityEvent) -> Result<u32> {
    e.check_consistent()?;
    Ok(mac_expense(e.input, e.weight, e.acc_in, e.reg_old))
}

/// Sums the per-PE expenses of one inference into a per-cycle trace.
pub fn trace_for_sample(n: usize, events: &[ActivityEvent], sample_id: u64) -> Result<PowerTrace> {
    let mut values = vec![0.0; trace_len(n)];
    for e in events {
        if e.cycle == 0 || e.cycle > values.len() {
            return Err(Error::InconsistentEvent { cycle: e.cycle, reason: "cycle outside trace".into() });
        }
        values[e.cycle - 1] += f64::from(pe_cycle_expense(e)?);
    }
    Ok(PowerTrace { sample_id, values })
}

/// Noiseless trace of `sample` on a freshly loaded array.
pub fn simulate(weights: &WeightMatrix, sample: &InputSample, sample_id: u64) -> Result<PowerTrace> {
    let mut state = ArrayState::loaded(weights);
    let inf = state.stream_inference(sample)?;
    trace_for_sample(weights.n(), &inf.events, sample_id)
}

/// Runs every sample through the array (registers reset per sample) and
/// collects the noiseless traces.
pub fn generate_trace_set(
    weights: &WeightMatrix,
    samples: &[InputSample],
    seed: u64,
    purpose: SetPurpose,
) -> Result<TraceSet> {
    if samples.is_empty() {
        return Err(Error::Empty("sample list"));
    }
    let traces = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| simulate(weights, s, i as u64))
        .collect::<Result<Vec<_>>>()?;
    let meta = TraceMeta::new(weights, seed, purpose, samples.to_vec());
    TraceSet::new(meta, traces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systolic::Pe;
    use proptest::prelude::*;

    // Independent bit-level oracle: adds with explicit carry propagation and
    // looks expenses up from the table rows directly.
    fn oracle_add(x: u32, y: u32, width: u32) -> (u32, u32) {
        let mut c = 0u8;
        let mut sum = 0u32;
        let mut pm = 0;
        for i in 0..width {
            let a = ((x >> i) & 1) as u8;
            let b = ((y >> i) & 1) as u8;
            let r = ADDER_TABLE.iter().find(|r| r.a == a && r.b == b && r.cin == c).unwrap();
            pm += r.pm;
            sum |= u32::from(r.s) << i;
            c = r.cout;
        }
        (sum, pm)
    }

    #[test]
    fn table_rows() {
        for r in ADDER_TABLE {
            let fa = full_adder_expense(r.a, r.b, r.cin);
            assert_eq!((fa.cout, fa.sum), (r.cout, r.s), "{r:?}");
            assert_eq!(fa.pm, r.pm);
            assert_eq!(r.pm, r.state_expense + r.ce);
            assert_eq!(u32::from(r.a + r.b + r.cin), u32::from(r.s) + 2 * u32::from(r.cout));
        }
        assert_eq!(full_adder_expense(1, 1, 0), FullAdd { sum: 0, cout: 1, pm: 3 });
        assert_eq!(full_adder_expense(0, 0, 1), FullAdd { sum: 1, cout: 0, pm: 1 });
        assert_eq!(full_adder_expense(0, 0, 0), FullAdd { sum: 0, cout: 0, pm: 0 });
    }

    #[test]
    fn ripple_small_cases() {
        assert_eq!(ripple_add_expense(0, 0, 18), (0, 0));
        assert_eq!(ripple_add_expense(1, 1, 2), (2, 4));
    }

    #[test]
    fn ripple_exhaustive_8bit() {
        for x in 0..256u32 {
            for y in 0..256u32 {
                let (s, pm) = ripple_add_expense(x, y, 8);
                assert_eq!(s, (x + y) % 256);
                assert_eq!((s, pm), oracle_add(x, y, 8));
            }
        }
    }

    #[test]
    fn multiply_exhaustive() {
        for a in 0..=255u8 {
            for w in 0..=255u8 {
                let (p, pm) = multiply_expense(a, w);
                assert_eq!(p, u32::from(a) * u32::from(w));
                assert_eq!(pm, multiply_pm(a, w));
                if a == 0 || w == 0 {
                    assert_eq!(pm, 0);
                }
            }
        }
        assert_eq!(multiply_expense(1, 1), (1, oracle_add(0, 1, 18).1));
        assert_eq!(multiply_expense(1, 1).1, 1);
    }

    #[test]
    fn register_expense() {
        assert_eq!(register_write_expense(77, 77), 0);
        assert_eq!(register_write_expense(0, ACC_MASK), 18);
        assert_eq!(register_write_expense(0b1010, 0b0110), 2);
        assert!(bit_flip_expense(false, true) > bit_flip_expense(true, false));
        assert_eq!(bit_flip_expense(false, false) + bit_flip_expense(true, true), 0);
    }

    fn event(input: u8, weight: u8, acc_in: u32, reg_old: u32) -> ActivityEvent {
        let acc_out = crate::systolic::mac(input, weight, acc_in);
        ActivityEvent { cycle: 1, pe: Pe::new(1, 1), input, weight, acc_in, acc_out, reg_old, reg_new: acc_out }
    }

    #[test]
    fn pe_expense_cases() {
        assert_eq!(pe_cycle_expense(&event(0, 0, 0, 0)).unwrap(), 0);
        let mult = multiply_expense(1, 1).1;
        let add = oracle_add(1, 0, 18).1;
        assert_eq!(pe_cycle_expense(&event(1, 1, 0, 0)).unwrap(), mult + add + 1);
        // reg_old == reg_new contributes nothing on the register side.
        let e = event(5, 9, 3, 48);
        let (_, add) = oracle_add(45, 3, 18);
        assert_eq!(pe_cycle_expense(&e).unwrap(), multiply_expense(5, 9).1 + add);
        let mut bad = event(2, 2, 0, 0);
        bad.acc_out = 5;
        assert!(pe_cycle_expense(&bad).is_err());
    }

    #[test]
    fn isolated_pe_trace() {
        let m = WeightMatrix::from_rows(&[vec![0, 0, 0], vec![0, 0, 0], vec![0, 0, 0]]).unwrap();
        let t = simulate(&m, &InputSample::zeros(3), 0).unwrap();
        assert_eq!(t.values, vec![0.0; 5]);
        // Only PE(3,3) is fed and no partial sum passes through it.
        let mut m = WeightMatrix::zeros(3).unwrap();
        m.set(Pe::new(3, 3), 200);
        let t = simulate(&m, &InputSample(vec![0, 0, 77]), 0).unwrap();
        assert_eq!(t.values.len(), 5);
        assert!(t.values[4] > 0.0);
        assert!(t.values[..4].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_samples_rejected() {
        let m = WeightMatrix::zeros(3).unwrap();
        assert!(matches!(generate_trace_set(&m, &[], 1, SetPurpose::Attack), Err(Error::Empty(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn random_18bit_adds(x in 0u32..(1 << 18), y in 0u32..(1 << 18)) {
            let (s, pm) = ripple_add_expense(x, y, 18);
            prop_assert_eq!(s, (x + y) & ACC_MASK);
            prop_assert_eq!((s, pm), oracle_add(x, y, 18));
            prop_assert_eq!(ripple_add_pm(x, y), pm);
        }

        #[test]
        fn trace_is_sum_of_pe_series(w in proptest::collection::vec(any::<u8>(), 9), a in proptest::collection::vec(any::<u8>(), 3)) {
            let m = WeightMatrix::new(3, w).unwrap();
            let mut st = ArrayState::loaded(&m);
            let inf = st.stream_inference(&InputSample(a)).unwrap();
            let trace = trace_for_sample(3, &inf.events, 0).unwrap();
            let mut total = vec![0.0; 5];
            for e in &inf.events {
                let mut series = vec![0.0; 5];
                series[e.cycle - 1] = f64::from(pe_cycle_expense(e).unwrap());
                for (t, v) in total.iter_mut().zip(series) { *t += v; }
            }
            prop_assert_eq!(trace.values, total);
        }
    }
}
