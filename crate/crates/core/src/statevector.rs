//! Dense statevector simulation over the gate set {H, RZ, CNOT}.
//!
//! Qubit 0 is the least-significant bit of a basis-state index, so the
//! amplitude of `|q1 q0⟩ = |10⟩` lives at index 2.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_1_SQRT_2;

use num_complex::Complex64;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Largest register the dense simulator will allocate (2^25 amplitudes).
pub const MAX_QUBITS: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gate {
    H(usize),
    /// `diag(e^{-iθ/2}, e^{+iθ/2})` on one qubit.
    Rz { qubit: usize, angle: f64 },
    Cnot { control: usize, target: usize },
}

impl Gate {
    pub fn qubits(&self) -> GateQubits {
        match *self {
            Gate::H(q) | Gate::Rz { qubit: q, .. } => GateQubits::One(q),
            Gate::Cnot { control, target } => GateQubits::Two(control, target),
        }
    }

    fn validate(&self, num_qubits: usize) -> Result<()> {
        let check = |q: usize| {
            if q < num_qubits {
                Ok(())
            } else {
                Err(Error::Index(format!(
                    "qubit {q} in {self:?} on a {num_qubits}-qubit register"
                )))
            }
        };
        match *self {
            Gate::H(q) => check(q),
            Gate::Rz { qubit, angle } => {
                if !angle.is_finite() {
                    return Err(Error::Argument(format!("non-finite RZ angle {angle}")));
                }
                check(qubit)
            }
            Gate::Cnot { control, target } => {
                check(control)?;
                check(target)?;
                if control == target {
                    return Err(Error::Index(format!(
                        "CNOT control and target are both qubit {control}"
                    )));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateQubits {
    One(usize),
    Two(usize, usize),
}

impl GateQubits {
    pub fn iter(self) -> impl Iterator<Item = usize> {
        let (a, b) = match self {
            GateQubits::One(q) => (q, None),
            GateQubits::Two(c, t) => (c, Some(t)),
        };
        std::iter::once(a).chain(b)
    }
}

/// An ordered gate list over a fixed register. Gates are validated on insertion.
#[derive(Debug, Clone, PartialEq)]
pub struct Circuit {
    num_qubits: usize,
    gates: Vec<Gate>,
}

impl Circuit {
    pub fn new(num_qubits: usize) -> Self {
        Circuit {
            num_qubits,
            gates: Vec::new(),
        }
    }

    pub fn from_gates(num_qubits: usize, gates: impl IntoIterator<Item = Gate>) -> Result<Self> {
        let mut circuit = Circuit::new(num_qubits);
        for gate in gates {
            circuit.push(gate)?;
        }
        Ok(circuit)
    }

    pub fn push(&mut self, gate: Gate) -> Result<()> {
        gate.validate(self.num_qubits)?;
        self.gates.push(gate);
        Ok(())
    }

    pub fn h(&mut self, qubit: usize) -> Result<()> {
        self.push(Gate::H(qubit))
    }

    pub fn rz(&mut self, qubit: usize, angle: f64) -> Result<()> {
        self.push(Gate::Rz { qubit, angle })
    }

    pub fn cnot(&mut self, control: usize, target: usize) -> Result<()> {
        self.push(Gate::Cnot { control, target })
    }

    pub fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    pub fn gates(&self) -> &[Gate] {
        &self.gates
    }

    pub fn len(&self) -> usize {
        self.gates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gates.is_empty()
    }

    /// Restricts the circuit to the gates that can influence the joint
    /// measurement statistics of `measured` when started from `|0…0⟩`.
    ///
    /// The returned circuit acts on a compacted register; the second element
    /// maps each of its qubits back to the original index, and every measured
    /// qubit is listed. Dropped gates either act outside the
    /// Heisenberg-evolved observable's support or are diagonal gates on qubits
    /// where that observable is itself diagonal, so they commute with it.
    pub fn light_cone(&self, measured: &[usize]) -> Result<(Circuit, Vec<usize>)> {
        // None: outside the support. Some(true): diagonal on that qubit.
        let mut support: Vec<Option<bool>> = vec![None; self.num_qubits];
        for &qubit in measured {
            if qubit >= self.num_qubits {
                return Err(Error::Index(format!(
                    "qubit {qubit} on a {}-qubit circuit",
                    self.num_qubits
                )));
            }
            support[qubit] = Some(true);
        }
        let ops = segment_ops(&self.gates);
        let mut kept = Vec::new();
        for op in ops.iter().rev() {
            let qubits = op.qubits();
            if qubits.iter().all(|&q| support[q].is_none()) {
                continue;
            }
            let all_diagonal = qubits.iter().all(|&q| support[q] != Some(false));
            match op.kind {
                OpKind::Diagonal if all_diagonal => continue,
                OpKind::Diagonal => {
                    for &q in &qubits {
                        support[q].get_or_insert(true);
                    }
                }
                OpKind::Permutation => {
                    for &q in &qubits {
                        support[q] = Some(all_diagonal);
                    }
                }
                OpKind::General => {
                    for &q in &qubits {
                        support[q] = Some(false);
                    }
                }
            }
            kept.push(op);
        }
        kept.reverse();

        let mapping: Vec<usize> = (0..self.num_qubits)
            .filter(|&q| support[q].is_some())
            .collect();
        let mut relabel = vec![usize::MAX; self.num_qubits];
        for (new, &old) in mapping.iter().enumerate() {
            relabel[old] = new;
        }
        let mut reduced = Circuit::new(mapping.len());
        for op in kept {
            for gate in &self.gates[op.start..op.end] {
                reduced.push(match *gate {
                    Gate::H(q) => Gate::H(relabel[q]),
                    Gate::Rz { qubit, angle } => Gate::Rz {
                        qubit: relabel[qubit],
                        angle,
                    },
                    Gate::Cnot { control, target } => Gate::Cnot {
                        control: relabel[control],
                        target: relabel[target],
                    },
                })?;
            }
        }
        Ok((reduced, mapping))
    }

    /// Per-qubit probability of measuring 1 after running the circuit on
    /// `|0…0⟩`, computed one light cone at a time. Matches
    /// [`Statevector::one_probabilities`] on the full state but never
    /// allocates more than the largest cone.
    pub fn one_probabilities_from_zero(&self) -> Result<Vec<f64>> {
        (0..self.num_qubits)
            .map(|q| {
                let (state, local) = self.cone_state(&[q])?;
                Ok(state.one_probability(local[0]))
            })
            .collect()
    }

    /// For each pair, the probability that both qubits read the same bit
    /// after running the circuit on `|0…0⟩`, one two-qubit light cone at a
    /// time.
    pub fn agreement_probabilities_from_zero(&self, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
        pairs
            .iter()
            .map(|&(a, b)| {
                let (state, local) = self.cone_state(&[a, b])?;
                state.agreement_probability(local[0], local[1])
            })
            .collect()
    }

    /// Shot-based counterpart of
    /// [`agreement_probabilities_from_zero`](Self::agreement_probabilities_from_zero):
    /// `shots` measurements of each pair's light cone, pair `k` seeded with
    /// `derive(seed, k)`.
    pub fn agreement_frequencies_from_zero(&self, pairs: &[(usize, usize)], shots: u64, seed: u64) -> Result<Vec<f64>> {
        pairs
            .iter()
            .enumerate()
            .map(|(k, &(a, b))| {
                let (state, local) = self.cone_state(&[a, b])?;
                state
                    .sample_shots(shots, crate::seed::derive(seed, k as u64))?
                    .agreement_frequency(local[0], local[1])
            })
            .collect()
    }

    fn cone_state(&self, measured: &[usize]) -> Result<(Statevector, Vec<usize>)> {
        let (cone, mapping) = self.light_cone(measured)?;
        let local = measured
            .iter()
            .map(|q| {
                mapping
                    .iter()
                    .position(|m| m == q)
                    .expect("measured qubits are always in the cone")
            })
            .collect();
        let mut state = Statevector::zero(cone.num_qubits())?;
        state.apply_circuit(&cone)?;
        Ok((state, local))
    }

    /// Dense unitary of a small circuit, `matrix[row][col]`, built column by
    /// column from the basis states.
    pub fn unitary(&self) -> Result<Vec<Vec<Complex64>>> {
        if self.num_qubits > 12 {
            return Err(Error::Size(format!(
                "unitary of a {}-qubit circuit",
                self.num_qubits
            )));
        }
        let dim = 1usize << self.num_qubits;
        let mut matrix = vec![vec![Complex64::new(0.0, 0.0); dim]; dim];
        for col in 0..dim {
            let mut state = Statevector::basis(self.num_qubits, col)?;
            state.apply_circuit(self)?;
            for (row, amp) in state.amplitudes().iter().enumerate() {
                matrix[row][col] = *amp;
            }
        }
        Ok(matrix)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OpKind {
    Diagonal,
    Permutation,
    General,
}

#[derive(Debug, Clone, Copy)]
struct Op {
    start: usize,
    end: usize,
    kind: OpKind,
    a: usize,
    b: Option<usize>,
}

impl Op {
    fn qubits(&self) -> Vec<usize> {
        std::iter::once(self.a).chain(self.b).collect()
    }
}

/// Groups `CNOT(a,b) · RZ(b) · CNOT(a,b)` triples into single diagonal ZZ ops.
fn segment_ops(gates: &[Gate]) -> Vec<Op> {
    let mut ops = Vec::with_capacity(gates.len());
    let mut i = 0;
    while i < gates.len() {
        if let (
            Some(Gate::Cnot { control, target }),
            Some(Gate::Rz { qubit, .. }),
            Some(Gate::Cnot {
                control: c2,
                target: t2,
            }),
        ) = (gates.get(i), gates.get(i + 1), gates.get(i + 2))
        {
            if qubit == target && c2 == control && t2 == target {
                ops.push(Op {
                    start: i,
                    end: i + 3,
                    kind: OpKind::Diagonal,
                    a: *control,
                    b: Some(*target),
                });
                i += 3;
                continue;
            }
        }
        let (kind, a, b) = match gates[i] {
            Gate::H(q) => (OpKind::General, q, None),
            Gate::Rz { qubit, .. } => (OpKind::Diagonal, qubit, None),
            Gate::Cnot { control, target } => (OpKind::Permutation, control, Some(target)),
        };
        ops.push(Op {
            start: i,
            end: i + 1,
            kind,
            a,
            b,
        });
        i += 1;
    }
    ops
}

/// Pure state of `num_qubits` qubits as `2^n` complex amplitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct Statevector {
    num_qubits: usize,
    amplitudes: Vec<Complex64>,
}

impl Statevector {
    /// `|0…0⟩` on `n` qubits, `1 ≤ n ≤ 25`.
    pub fn zero(num_qubits: usize) -> Result<Self> {
        Self::basis(num_qubits, 0)
    }

    pub fn basis(num_qubits: usize, index: usize) -> Result<Self> {
        if !(1..=MAX_QUBITS).contains(&num_qubits) {
            return Err(Error::Size(format!(
                "{num_qubits} qubits (supported: 1..={MAX_QUBITS})"
            )));
        }
        let dim = 1usize << num_qubits;
        if index >= dim {
            return Err(Error::Index(format!(
                "basis state {index} of a {num_qubits}-qubit register"
            )));
        }
        let mut amplitudes = vec![Complex64::new(0.0, 0.0); dim];
        amplitudes[index] = Complex64::new(1.0, 0.0);
        Ok(Statevector {
            num_qubits,
            amplitudes,
        })
    }

    /// Wraps raw amplitudes; the norm must be 1 within 1e-10.
    pub fn from_amplitudes(amplitudes: Vec<Complex64>) -> Result<Self> {
        let len = amplitudes.len();
        if len < 2 || !len.is_power_of_two() {
            return Err(Error::Size(format!(
                "{len} amplitudes is not a power of two ≥ 2"
            )));
        }
        let num_qubits = len.trailing_zeros() as usize;
        if num_qubits > MAX_QUBITS {
            return Err(Error::Size(format!("{num_qubits} qubits")));
        }
        let state = Statevector {
            num_qubits,
            amplitudes,
        };
        let norm = state.norm_sqr();
        if (norm - 1.0).abs() > 1e-10 {
            return Err(Error::Argument(format!("state norm² is {norm}, expected 1")));
        }
        Ok(state)
    }

    pub fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }

    pub fn apply_gate(&mut self, gate: &Gate) -> Result<()> {
        gate.validate(self.num_qubits)?;
        match *gate {
            Gate::H(q) => {
                let bit = 1usize << q;
                for i in 0..self.amplitudes.len() {
                    if i & bit == 0 {
                        let a = self.amplitudes[i];
                        let b = self.amplitudes[i | bit];
                        self.amplitudes[i] = (a + b) * FRAC_1_SQRT_2;
                        self.amplitudes[i | bit] = (a - b) * FRAC_1_SQRT_2;
                    }
                }
            }
            Gate::Rz { qubit, angle } => {
                let bit = 1usize << qubit;
                let zero = Complex64::from_polar(1.0, -angle / 2.0);
                let one = Complex64::from_polar(1.0, angle / 2.0);
                for (i, amp) in self.amplitudes.iter_mut().enumerate() {
                    *amp *= if i & bit == 0 { zero } else { one };
                }
            }
            Gate::Cnot { control, target } => {
                let cbit = 1usize << control;
                let tbit = 1usize << target;
                for i in 0..self.amplitudes.len() {
                    if i & cbit != 0 && i & tbit == 0 {
                        self.amplitudes.swap(i, i | tbit);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn apply_circuit(&mut self, circuit: &Circuit) -> Result<()> {
        if circuit.num_qubits() != self.num_qubits {
            return Err(Error::Shape(format!(
                "{}-qubit circuit on a {}-qubit state",
                circuit.num_qubits(),
                self.num_qubits
            )));
        }
        for gate in circuit.gates() {
            self.apply_gate(gate)?;
        }
        Ok(())
    }

    /// `|amplitude|²` for every basis state.
    pub fn probabilities(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|a| a.norm_sqr()).collect()
    }

    fn one_probability(&self, qubit: usize) -> f64 {
        let bit = 1usize << qubit;
        self.amplitudes
            .iter()
            .enumerate()
            .filter(|(i, _)| i & bit != 0)
            .map(|(_, a)| a.norm_sqr())
            .sum()
    }

    /// Probability of reading 1 on each qubit, indexed by qubit.
    pub fn one_probabilities(&self) -> Vec<f64> {
        let mut ones = vec![0.0; self.num_qubits];
        for (i, amp) in self.amplitudes.iter().enumerate() {
            let p = amp.norm_sqr();
            for (q, slot) in ones.iter_mut().enumerate() {
                if i >> q & 1 == 1 {
                    *slot += p;
                }
            }
        }
        ones
    }

    /// Probability that qubits `a` and `b` read the same bit.
    pub fn agreement_probability(&self, a: usize, b: usize) -> Result<f64> {
        check_pair(self.num_qubits, a, b)?;
        Ok(self
            .amplitudes
            .iter()
            .enumerate()
            .filter(|(i, _)| (i >> a ^ i >> b) & 1 == 0)
            .map(|(_, amp)| amp.norm_sqr())
            .sum())
    }

    /// `P(|00⟩) + P(|11⟩)` of a two-qubit state.
    pub fn same_state_probability(&self) -> Result<f64> {
        if self.num_qubits != 2 {
            return Err(Error::Shape(format!(
                "same-state probability needs 2 qubits, got {}",
                self.num_qubits
            )));
        }
        Ok(self.amplitudes[0].norm_sqr() + self.amplitudes[3].norm_sqr())
    }

    /// Draws `shots` computational-basis measurements. The histogram depends
    /// only on the state and `seed`.
    pub fn sample_shots(&self, shots: u64, seed: u64) -> Result<ShotHistogram> {
        if shots == 0 {
            return Err(Error::Argument("shots must be at least 1".into()));
        }
        let mut cumulative = Vec::with_capacity(self.amplitudes.len());
        let mut acc = 0.0;
        for amp in &self.amplitudes {
            acc += amp.norm_sqr();
            cumulative.push(acc);
        }
        let total = acc;
        // Outcomes with zero probability can never be selected: the search
        // lands on the first index whose cumulative mass exceeds the draw.
        let last_nonzero = self
            .amplitudes
            .iter()
            .rposition(|a| a.norm_sqr() > 0.0)
            .unwrap_or(0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut counts = BTreeMap::new();
        for _ in 0..shots {
            let u: f64 = rng.random::<f64>() * total;
            let idx = cumulative
                .partition_point(|&c| c <= u)
                .min(last_nonzero);
            *counts.entry(idx).or_insert(0u64) += 1;
        }
        Ok(ShotHistogram {
            num_qubits: self.num_qubits,
            counts,
            total_shots: shots,
        })
    }
}

fn check_pair(num_qubits: usize, a: usize, b: usize) -> Result<()> {
    if a >= num_qubits || b >= num_qubits || a == b {
        return Err(Error::Index(format!(
            "qubit pair ({a}, {b}) on a {num_qubits}-qubit register"
        )));
    }
    Ok(())
}

/// Measurement counts keyed by basis-state index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShotHistogram {
    num_qubits: usize,
    counts: BTreeMap<usize, u64>,
    total_shots: u64,
}

impl ShotHistogram {
    pub fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    pub fn total_shots(&self) -> u64 {
        self.total_shots
    }

    pub fn counts(&self) -> &BTreeMap<usize, u64> {
        &self.counts
    }

    pub fn count(&self, index: usize) -> u64 {
        self.counts.get(&index).copied().unwrap_or(0)
    }

    pub fn frequencies(&self) -> Vec<f64> {
        let mut freq = vec![0.0; 1usize << self.num_qubits];
        for (&idx, &count) in &self.counts {
            freq[idx] = count as f64 / self.total_shots as f64;
        }
        freq
    }

    /// Fraction of shots in which each qubit read 1.
    pub fn one_frequencies(&self) -> Vec<f64> {
        let mut ones = vec![0u64; self.num_qubits];
        for (&idx, &count) in &self.counts {
            for (q, slot) in ones.iter_mut().enumerate() {
                if idx >> q & 1 == 1 {
                    *slot += count;
                }
            }
        }
        ones.into_iter()
            .map(|c| c as f64 / self.total_shots as f64)
            .collect()
    }

    /// Fraction of shots in which qubits `a` and `b` read the same bit.
    pub fn agreement_frequency(&self, a: usize, b: usize) -> Result<f64> {
        check_pair(self.num_qubits, a, b)?;
        let agree: u64 = self
            .counts
            .iter()
            .filter(|(&i, _)| (i >> a ^ i >> b) & 1 == 0)
            .map(|(_, &c)| c)
            .sum();
        Ok(agree as f64 / self.total_shots as f64)
    }
}
