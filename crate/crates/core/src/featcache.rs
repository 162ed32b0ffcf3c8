//! Nearest-neighbour reuse of simulated filter outputs.
//!
//! Only a bounded number of distinct blocks are ever simulated. Everything
//! else borrows the output of the closest simulated block, found through a
//! balltree over the normalized block vectors.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::num::NonZeroUsize;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::quanv::{QuanvLayer, TensorBlock};

pub const DEFAULT_LEAF_SIZE: usize = 16;

/// Euclidean distance.
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone)]
struct Node {
    center: Vec<f64>,
    radius: f64,
    /// Range into `BallTree::order`.
    start: usize,
    end: usize,
    children: Option<(usize, usize)>,
}

/// Ball tree with one payload per stored point. Immutable once built.
#[derive(Debug, Clone)]
pub struct BallTree<P> {
    dim: usize,
    leaf_size: usize,
    points: Vec<Vec<f64>>,
    payloads: Vec<P>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor<'a, P> {
    pub index: usize,
    pub distance: f64,
    pub payload: &'a P,
}

impl<P> BallTree<P> {
    pub fn build(points: Vec<Vec<f64>>, payloads: Vec<P>) -> Result<Self> {
        Self::with_leaf_size(points, payloads, DEFAULT_LEAF_SIZE)
    }

    pub fn with_leaf_size(points: Vec<Vec<f64>>, payloads: Vec<P>, leaf_size: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("ball tree needs at least one point".into()));
        }
        if points.len() != payloads.len() {
            return Err(Error::Shape(format!(
                "{} points with {} payloads",
                points.len(),
                payloads.len()
            )));
        }
        if leaf_size == 0 {
            return Err(Error::Argument("leaf size must be at least 1".into()));
        }
        let dim = points[0].len();
        if let Some((i, p)) = points.iter().enumerate().find(|(_, p)| p.len() != dim) {
            return Err(Error::Shape(format!(
                "point {i} has dimension {}, expected {dim}",
                p.len()
            )));
        }
        let mut tree = BallTree {
            dim,
            leaf_size,
            order: (0..points.len()).collect(),
            points,
            payloads,
            nodes: Vec::new(),
        };
        tree.build_node(0, tree.points.len());
        Ok(tree)
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let members = &self.order[start..end];
        let mut center = vec![0.0; self.dim];
        for &i in members {
            for (c, x) in center.iter_mut().zip(&self.points[i]) {
                *c += x;
            }
        }
        let count = members.len() as f64;
        center.iter_mut().for_each(|c| *c /= count);
        let radius = members
            .iter()
            .map(|&i| euclidean(&self.points[i], &center))
            .fold(0.0, f64::max);

        let id = self.nodes.len();
        self.nodes.push(Node {
            center,
            radius,
            start,
            end,
            children: None,
        });
        if end - start <= self.leaf_size {
            return id;
        }

        // Split at the median of the coordinate with the widest spread.
        let split_dim = (0..self.dim)
            .map(|d| {
                let (lo, hi) = members.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                    let x = self.points[i][d];
                    (lo.min(x), hi.max(x))
                });
                (d, hi - lo)
            })
            .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
            .0;
        let points = &self.points;
        self.order[start..end].sort_by(|&a, &b| {
            points[a][split_dim]
                .total_cmp(&points[b][split_dim])
                .then(a.cmp(&b))
        });
        let mid = start + (end - start) / 2;
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id].children = Some((left, right));
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn leaf_size(&self) -> usize {
        self.leaf_size
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn payloads(&self) -> &[P] {
        &self.payloads
    }

    /// Closest stored point, ties going to the lowest stored index.
    pub fn nearest(&self, query: &[f64]) -> Result<Neighbor<'_, P>> {
        self.nearest_counting(query).map(|(n, _)| n)
    }

    /// Like [`nearest`](Self::nearest), also reporting how many nodes were opened.
    pub fn nearest_counting(&self, query: &[f64]) -> Result<(Neighbor<'_, P>, usize)> {
        if query.len() != self.dim {
            return Err(Error::Shape(format!(
                "query of dimension {} against a {}-dimensional tree",
                query.len(),
                self.dim
            )));
        }
        let mut best = (f64::INFINITY, usize::MAX);
        let mut visited = 0;
        let mut stack = vec![(0usize, self.lower_bound(0, query))];
        while let Some((id, bound)) = stack.pop() {
            // Rounding in `bound` is far below this slack; a tie can still
            // hide behind an equal bound, so only strictly worse balls go.
            if bound > best.0 + 1e-12 * (1.0 + best.0) {
                continue;
            }
            visited += 1;
            let node = &self.nodes[id];
            match node.children {
                None => {
                    for &i in &self.order[node.start..node.end] {
                        let d = euclidean(&self.points[i], query);
                        if d < best.0 || (d == best.0 && i < best.1) {
                            best = (d, i);
                        }
                    }
                }
                Some((l, r)) => {
                    let lb = self.lower_bound(l, query);
                    let rb = self.lower_bound(r, query);
                    // Push the farther child first so the nearer one is searched first.
                    if lb <= rb {
                        stack.push((r, rb));
                        stack.push((l, lb));
                    } else {
                        stack.push((l, lb));
                        stack.push((r, rb));
                    }
                }
            }
        }
        let (distance, index) = best;
        Ok((
            Neighbor {
                index,
                distance,
                payload: &self.payloads[index],
            },
            visited,
        ))
    }

    fn lower_bound(&self, id: usize, query: &[f64]) -> f64 {
        let node = &self.nodes[id];
        (euclidean(query, &node.center) - node.radius).max(0.0)
    }

    /// Checks that every point lies inside each ball on its root path and that
    /// leaves respect the size limit.
    pub fn audit(&self) -> Result<()> {
        for (id, node) in self.nodes.iter().enumerate() {
            for &i in &self.order[node.start..node.end] {
                let d = euclidean(&self.points[i], &node.center);
                if d > node.radius * (1.0 + 1e-12) + 1e-15 {
                    return Err(Error::Validation(format!(
                        "point {i} at distance {d} escapes node {id} of radius {}",
                        node.radius
                    )));
                }
            }
            match node.children {
                None if node.end - node.start > self.leaf_size => {
                    return Err(Error::Validation(format!("leaf {id} exceeds the leaf size")));
                }
                Some((l, r)) => {
                    let (ln, rn) = (&self.nodes[l], &self.nodes[r]);
                    if ln.start != node.start || ln.end != rn.start || rn.end != node.end {
                        return Err(Error::Validation(format!("node {id} children do not partition it")));
                    }
                }
                None => {}
            }
        }
        Ok(())
    }
}

/// Maximum number of distinct blocks simulated per filter bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComputeBudget(NonZeroUsize);

impl ComputeBudget {
    pub fn new(max_exact_evaluations: usize) -> Result<Self> {
        NonZeroUsize::new(max_exact_evaluations)
            .map(ComputeBudget)
            .ok_or_else(|| Error::Argument("compute budget must be at least 1".into()))
    }

    pub fn get(&self) -> usize {
        self.0.get()
    }
}

/// Where a block's output came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Provenance {
    /// Simulated, or an exact duplicate of a simulated block.
    Exact { processed: usize },
    /// Borrowed from the nearest simulated block.
    Mapped { processed: usize, distance: f64 },
}

impl Provenance {
    pub fn processed(&self) -> usize {
        match *self {
            Provenance::Exact { processed } | Provenance::Mapped { processed, .. } => processed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BudgetedOutputs {
    /// One output vector (one value per filter) per input block.
    pub outputs: Vec<Vec<f64>>,
    pub provenance: Vec<Provenance>,
    /// Tree over the simulated blocks; payloads are their outputs.
    pub tree: BallTree<Vec<f64>>,
}

impl BudgetedOutputs {
    pub fn exact_count(&self) -> usize {
        self.provenance
            .iter()
            .filter(|p| matches!(p, Provenance::Exact { .. }))
            .count()
    }

    pub fn mapped_count(&self) -> usize {
        self.provenance.len() - self.exact_count()
    }

    pub fn evaluations(&self) -> usize {
        self.tree.len()
    }
}

/// Simulates the first `budget` distinct blocks in input order and maps the
/// rest onto their nearest simulated block.
///
/// A simulated block's shot seed uses its position in `blocks`.
pub fn process_with_budget(
    blocks: &[TensorBlock],
    layer: &QuanvLayer,
    budget: ComputeBudget,
) -> Result<BudgetedOutputs> {
    if blocks.is_empty() {
        return Err(Error::Empty("no blocks to process".into()));
    }
    let mut first_seen: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut selected = Vec::new();
    for (i, block) in blocks.iter().enumerate() {
        if selected.len() == budget.get() {
            break;
        }
        let key: Vec<u64> = block.values().iter().map(|v| v.to_bits()).collect();
        if let std::collections::hash_map::Entry::Vacant(e) = first_seen.entry(key) {
            e.insert(selected.len());
            selected.push(i);
        }
    }

    let payloads: Vec<Vec<f64>> = selected
        .par_iter()
        .map(|&i| layer.evaluate_block(&blocks[i], i as u64))
        .collect::<Result<_>>()?;
    let points = selected.iter().map(|&i| blocks[i].values().to_vec()).collect();
    let tree = BallTree::build(points, payloads)?;

    let resolved: Vec<(Vec<f64>, Provenance)> = blocks
        .par_iter()
        .map(|block| {
            let hit = tree.nearest(block.values())?;
            let provenance = if hit.distance == 0.0 {
                Provenance::Exact { processed: hit.index }
            } else {
                Provenance::Mapped {
                    processed: hit.index,
                    distance: hit.distance,
                }
            };
            Ok((hit.payload.clone(), provenance))
        })
        .collect::<Result<_>>()?;
    let (outputs, provenance) = resolved.into_iter().unzip();
    Ok(BudgetedOutputs {
        outputs,
        provenance,
        tree,
    })
}

/// Writes simulated blocks as `point_index,x0..xd-1,y0..yk-1` rows with a
/// header naming the split between block and payload columns.
pub fn write_processed_csv<W: Write>(writer: W, tree: &BallTree<Vec<f64>>) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    let k = tree.payloads().first().map_or(0, Vec::len);
    let header: Vec<String> = std::iter::once("point_index".to_string())
        .chain((0..tree.dim()).map(|d| format!("x{d}")))
        .chain((0..k).map(|f| format!("y{f}")))
        .collect();
    out.write_record(&header)?;
    for (i, (p, y)) in tree.points().iter().zip(tree.payloads()).enumerate() {
        let row: Vec<String> = std::iter::once(i.to_string())
            .chain(p.iter().map(f64::to_string))
            .chain(y.iter().map(f64::to_string))
            .collect();
        out.write_record(&row)?;
    }
    out.flush().map_err(|e| Error::io("<processed csv>", e))?;
    Ok(())
}

/// Rebuilds the tree from [`write_processed_csv`] output.
pub fn read_processed_csv<R: Read>(reader: R) -> Result<BallTree<Vec<f64>>> {
    let mut input = csv::Reader::from_reader(reader);
    let header = input.headers()?.clone();
    let dim = header.iter().filter(|h| h.starts_with('x')).count();
    let k = header.iter().filter(|h| h.starts_with('y')).count();
    if header.len() != 1 + dim + k {
        return Err(Error::parse(1, "header must be point_index, x*, y*"));
    }
    let mut points = Vec::new();
    let mut payloads = Vec::new();
    for (i, record) in input.records().enumerate() {
        let line = i + 2;
        let record = record?;
        if record.len() != header.len() {
            return Err(Error::parse(line, format!("expected {} fields, got {}", header.len(), record.len())));
        }
        let values = record
            .iter()
            .skip(1)
            .map(|f| f.trim().parse::<f64>().map_err(|e| Error::parse(line, format!("{f:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        points.push(values[..dim].to_vec());
        payloads.push(values[dim..].to_vec());
    }
    BallTree::build(points, payloads)
}
