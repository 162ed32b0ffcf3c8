//! QAOA ansatz construction over a qubit-connectivity graph.
//!
//! Each quanvolutional filter is a MaxCut instance on the device topology
//! with its own random edge weights. A layer is one ZZ cost term per edge
//! (`CNOT · Rz · CNOT`, the rotation on the edge's second qubit) followed by
//! an X-mixer compiled as `H · Rz(β) · H` on every qubit.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::statevector::Circuit;

const ASPEN25: &str = include_str!("../data/aspen25.topo");

/// Edge weights are drawn uniformly from this closed range.
pub const WEIGHT_RANGE: (f64, f64) = (0.1, 1.0);

/// Largest supported layer count.
pub const MAX_LAYERS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceTopology {
    num_qubits: usize,
    edges: Vec<(usize, usize)>,
}

impl DeviceTopology {
    pub fn new(num_qubits: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if num_qubits == 0 {
            return Err(Error::Validation("topology has no qubits".into()));
        }
        let mut seen = HashSet::new();
        for &(a, b) in &edges {
            if a >= num_qubits || b >= num_qubits {
                return Err(Error::Validation(format!(
                    "edge ({a},{b}) outside {num_qubits} qubits"
                )));
            }
            if a == b {
                return Err(Error::Validation(format!("self-loop on qubit {a}")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::Validation(format!("duplicate edge ({a},{b})")));
            }
        }
        Ok(DeviceTopology { num_qubits, edges })
    }

    /// Parses a topology description.
    ///
    /// The file form is one `qubits=<n>` line followed by `edge=<a>,<b>`
    /// lines. Statements may also be separated by `;`, and `edges=` accepts a
    /// list such as `(0,1),(1,2)`. `#` starts a comment. Edge order is kept.
    pub fn parse(source: &str) -> Result<Self> {
        let mut num_qubits = None;
        let mut edges = Vec::new();
        for (lineno, line) in source.lines().enumerate() {
            let lineno = lineno + 1;
            let line = line.split('#').next().unwrap_or("");
            for stmt in line.split(';').map(str::trim).filter(|s| !s.is_empty()) {
                let (key, value) = stmt
                    .split_once('=')
                    .ok_or_else(|| Error::parse(lineno, format!("expected key=value, got {stmt:?}")))?;
                let value = value.trim();
                match key.trim() {
                    "qubits" => {
                        if num_qubits.is_some() {
                            return Err(Error::parse(lineno, "qubits given twice"));
                        }
                        num_qubits = Some(value.parse::<usize>().map_err(|e| {
                            Error::parse(lineno, format!("qubit count {value:?}: {e}"))
                        })?);
                    }
                    "edge" => edges.push(parse_pair(value, lineno)?),
                    "edges" => {
                        for pair in value.split(')').map(str::trim).filter(|s| !s.is_empty()) {
                            let pair = pair.trim_start_matches(',').trim();
                            edges.push(parse_pair(pair, lineno)?);
                        }
                    }
                    other => {
                        return Err(Error::parse(lineno, format!("unknown key {other:?}")));
                    }
                }
            }
        }
        let num_qubits = num_qubits.ok_or_else(|| Error::parse(0, "missing qubits=<n>"))?;
        Self::new(num_qubits, edges)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// The bundled 25-qubit, 24-coupler device.
    pub fn aspen25() -> Self {
        Self::parse(ASPEN25).expect("bundled topology is valid")
    }

    /// Text in the file format accepted by [`DeviceTopology::parse`].
    pub fn to_text(&self) -> String {
        let mut out = format!("qubits={}\n", self.num_qubits);
        for (a, b) in &self.edges {
            out.push_str(&format!("edge={a},{b}\n"));
        }
        out
    }

    pub fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }
}

fn parse_pair(text: &str, line: usize) -> Result<(usize, usize)> {
    let inner = text.trim().trim_start_matches('(').trim_end_matches(')');
    let (a, b) = inner
        .split_once(',')
        .ok_or_else(|| Error::parse(line, format!("expected a,b pair, got {text:?}")))?;
    let idx = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|e| Error::parse(line, format!("qubit index {s:?}: {e}")))
    };
    Ok((idx(a)?, idx(b)?))
}

/// A MaxCut instance: one weight per topology edge.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGraph {
    topology: DeviceTopology,
    weights: Vec<f64>,
}

impl WeightedGraph {
    pub fn new(topology: DeviceTopology, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != topology.edges().len() {
            return Err(Error::Shape(format!(
                "{} weights for {} edges",
                weights.len(),
                topology.edges().len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w == 0.0) {
            return Err(Error::Validation(format!("edge weight {w} must be finite and nonzero")));
        }
        Ok(WeightedGraph { topology, weights })
    }

    /// Uniform weights on [`WEIGHT_RANGE`], a pure function of `seed`.
    pub fn random(topology: DeviceTopology, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lo, hi) = WEIGHT_RANGE;
        let weights = (0..topology.edges().len())
            .map(|_| rng.random_range(lo..=hi))
            .collect();
        WeightedGraph { topology, weights }
    }

    pub fn topology(&self) -> &DeviceTopology {
        &self.topology
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QaoaAnsatz {
    graph: WeightedGraph,
    layers: usize,
}

impl QaoaAnsatz {
    pub fn new(graph: WeightedGraph, layers: usize) -> Result<Self> {
        if !(1..=MAX_LAYERS).contains(&layers) {
            return Err(Error::Argument(format!(
                "layer count {layers} outside 1..={MAX_LAYERS}"
            )));
        }
        Ok(QaoaAnsatz { graph, layers })
    }

    pub fn graph(&self) -> &WeightedGraph {
        &self.graph
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    /// One angle per edge plus one mixer angle, per layer.
    pub fn parameter_count(&self) -> usize {
        (self.graph.topology().edges().len() + 1) * self.layers
    }

    /// Compiles the ansatz for `params`, laid out layer by layer as
    /// `[θ_edge0, …, θ_edgeE-1, β]`. Edge angles are scaled by the edge weight;
    /// mixer angles are not.
    pub fn build_circuit(&self, params: &[f64]) -> Result<Circuit> {
        if params.len() != self.parameter_count() {
            return Err(Error::Shape(format!(
                "{} parameters for an ansatz with {}",
                params.len(),
                self.parameter_count()
            )));
        }
        let topology = self.graph.topology();
        let n = topology.num_qubits();
        let per_layer = topology.edges().len() + 1;
        let mut circuit = Circuit::new(n);
        for q in 0..n {
            circuit.h(q)?;
        }
        for layer in params.chunks_exact(per_layer) {
            let (thetas, beta) = layer.split_at(per_layer - 1);
            for ((&(a, b), &w), &theta) in topology.edges().iter().zip(self.graph.weights()).zip(thetas) {
                circuit.cnot(a, b)?;
                circuit.rz(b, w * theta)?;
                circuit.cnot(a, b)?;
            }
            for q in 0..n {
                circuit.h(q)?;
                circuit.rz(q, beta[0])?;
                circuit.h(q)?;
            }
        }
        Ok(circuit)
    }
}

/// Critical-path length with every gate taking one time step and gates on
/// disjoint qubits sharing a step.
pub fn circuit_depth(circuit: &Circuit) -> usize {
    let mut level = vec![0usize; circuit.num_qubits()];
    let mut depth = 0;
    for gate in circuit.gates() {
        let qubits = gate.qubits();
        let step = qubits.iter().map(|q| level[q]).max().unwrap_or(0) + 1;
        for q in qubits.iter() {
            level[q] = step;
        }
        depth = depth.max(step);
    }
    depth
}
