//! The quanvolutional layer.
//!
//! An image is cut into complete `w × w × M` blocks, each block is reduced to
//! rotation angles by averaging consecutive groups of normalized pixels, and
//! every filter runs its QAOA circuit on those angles. The decoded feature is
//! the mean over graph edges of the probability that both endpoints read the
//! same bit.
//!
//! Single-qubit marginals carry no signal here: `|+⟩^n`, the ZZ cost terms
//! and the X mixers all commute with a global bit flip, so every qubit reads
//! 1 with probability exactly 1/2 whatever the angles.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::featcache::BallTree;
use crate::qaoa::{DeviceTopology, QaoaAnsatz, WeightedGraph};
use crate::seed;

/// Default shot count for [`ReadoutMode::Shots`].
pub const DEFAULT_SHOTS: u64 = 1000;

/// An `height × width × channels` 8-bit image, row-major with the channel
/// index fastest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<u8>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "image dimensions {height}×{width}×{channels}"
            )));
        }
        if values.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values for a {height}×{width}×{channels} image",
                values.len()
            )));
        }
        Ok(ImageTensor {
            height,
            width,
            channels,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: u8) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> u8 {
        self.values[(row * self.width + col) * self.channels + channel]
    }
}

/// A flattened image block with entries normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlock {
    values: Vec<f64>,
}

impl TensorBlock {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Argument(format!("block entry {v} outside [0,1]")));
        }
        Ok(TensorBlock { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Averages consecutive runs of `group_size` entries and scales the means
    /// by π, giving one angle in `[0, π]` per group. Each group is summed in
    /// sorted order, so reordering entries within a group never changes a bit.
    pub fn encode(&self, group_size: usize) -> Result<Vec<f64>> {
        if group_size == 0 || !self.values.len().is_multiple_of(group_size) {
            return Err(Error::Shape(format!(
                "block of {} entries cannot be split into groups of {group_size}",
                self.values.len()
            )));
        }
        Ok(self
            .values
            .chunks_exact(group_size)
            .map(|g| {
                let mut sorted = g.to_vec();
                sorted.sort_by(f64::total_cmp);
                PI * sorted.iter().sum::<f64>() / group_size as f64
            })
            .collect())
    }
}

/// Number of complete windows along one side.
pub fn blocks_per_side(side: usize, window: usize, stride: usize) -> usize {
    if window == 0 || stride == 0 || window > side {
        0
    } else {
        (side - window) / stride + 1
    }
}

/// Cuts `image` into complete `window × window` blocks at multiples of
/// `stride`, row-major over block positions.
pub fn tile_image(image: &ImageTensor, window: usize, stride: usize) -> Result<Vec<TensorBlock>> {
    if window == 0 || window > image.height || window > image.width {
        return Err(Error::Shape(format!(
            "window {window} does not fit a {}×{} image",
            image.height, image.width
        )));
    }
    if stride == 0 {
        return Err(Error::Argument("stride must be at least 1".into()));
    }
    let rows = blocks_per_side(image.height, window, stride);
    let cols = blocks_per_side(image.width, window, stride);
    let mut blocks = Vec::with_capacity(rows * cols);
    for br in 0..rows {
        for bc in 0..cols {
            let mut values = Vec::with_capacity(window * window * image.channels);
            for r in br * stride..br * stride + window {
                let start = (r * image.width + bc * stride) * image.channels;
                let end = start + window * image.channels;
                values.extend(image.values[start..end].iter().map(|&v| f64::from(v) / 255.0));
            }
            blocks.push(TensorBlock { values });
        }
    }
    Ok(blocks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadoutMode {
    /// Exact edge agreement probabilities.
    Exact,
    /// Frequencies over the filter's shot count, sampled per edge from that
    /// edge's light cone.
    Shots,
}

impl std::str::FromStr for ReadoutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(ReadoutMode::Exact),
            "shots" => Ok(ReadoutMode::Shots),
            other => Err(Error::Argument(format!("unknown mode {other:?} (exact|shots)"))),
        }
    }
}

impl std::fmt::Display for ReadoutMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReadoutMode::Exact => "exact",
            ReadoutMode::Shots => "shots",
        })
    }
}

/// One quanvolutional filter: a fixed QAOA circuit on a randomly weighted graph.
#[derive(Debug, Clone, PartialEq)]
pub struct QuanvFilter {
    id: usize,
    ansatz: QaoaAnsatz,
    shots: u64,
    seed: u64,
}

impl QuanvFilter {
    /// Draws the filter's edge weights from `seed`.
    pub fn new(id: usize, topology: DeviceTopology, layers: usize, shots: u64, seed: u64) -> Result<Self> {
        Self::with_graph(id, WeightedGraph::random(topology, seed), layers, shots, seed)
    }

    pub fn with_graph(id: usize, graph: WeightedGraph, layers: usize, shots: u64, seed: u64) -> Result<Self> {
        if shots == 0 {
            return Err(Error::Argument("filter shot count must be at least 1".into()));
        }
        Ok(QuanvFilter {
            id,
            ansatz: QaoaAnsatz::new(graph, layers)?,
            shots,
            seed,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn ansatz(&self) -> &QaoaAnsatz {
        &self.ansatz
    }

    pub fn shots(&self) -> u64 {
        self.shots
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn parameter_count(&self) -> usize {
        self.ansatz.parameter_count()
    }

    /// Runs the filter on encoded angles and decodes one scalar in `[0, 1]`.
    ///
    /// `block_index` only feeds the shot-sampling seed: edge `k` samples
    /// with `derive(derive(filter seed, block_index), k)`.
    pub fn apply(&self, angles: &[f64], mode: ReadoutMode, block_index: u64) -> Result<f64> {
        let circuit = self.ansatz.build_circuit(angles)?;
        let edges = self.ansatz.graph().topology().edges();
        let agree = match mode {
            ReadoutMode::Exact => circuit.agreement_probabilities_from_zero(edges)?,
            ReadoutMode::Shots => {
                circuit.agreement_frequencies_from_zero(edges, self.shots, seed::derive(self.seed, block_index))?
            }
        };
        let mean = agree.iter().sum::<f64>() / agree.len() as f64;
        Ok(mean.clamp(0.0, 1.0))
    }
}

/// Geometry and readout settings shared by a filter bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuanvConfig {
    pub window: usize,
    pub stride: usize,
    pub group_size: usize,
    pub mode: ReadoutMode,
}

impl Default for QuanvConfig {
    fn default() -> Self {
        QuanvConfig {
            window: 5,
            stride: 5,
            group_size: 4,
            mode: ReadoutMode::Exact,
        }
    }
}

/// A bank of filters sharing one topology and layer count.
#[derive(Debug, Clone, PartialEq)]
pub struct QuanvLayer {
    filters: Vec<QuanvFilter>,
    config: QuanvConfig,
}

impl QuanvLayer {
    pub fn new(filters: Vec<QuanvFilter>, config: QuanvConfig) -> Result<Self> {
        let first = filters
            .first()
            .ok_or_else(|| Error::Empty("quanvolutional layer without filters".into()))?;
        let topology = first.ansatz.graph().topology();
        let layers = first.ansatz.layers();
        let mut seeds = std::collections::HashSet::new();
        for f in &filters {
            if f.ansatz.graph().topology() != topology || f.ansatz.layers() != layers {
                return Err(Error::Validation(format!(
                    "filter {} does not share the bank's topology and layer count",
                    f.id
                )));
            }
            if !seeds.insert(f.seed) {
                return Err(Error::Validation(format!("filter {} reuses seed {}", f.id, f.seed)));
            }
        }
        if config.window == 0 || config.stride == 0 || config.group_size == 0 {
            return Err(Error::Argument(format!("degenerate layer geometry {config:?}")));
        }
        Ok(QuanvLayer { filters, config })
    }

    /// `count` filters with seeds derived from `base_seed`.
    pub fn bank(
        topology: &DeviceTopology,
        count: usize,
        layers: usize,
        shots: u64,
        base_seed: u64,
        config: QuanvConfig,
    ) -> Result<Self> {
        let filters = (0..count)
            .map(|i| QuanvFilter::new(i, topology.clone(), layers, shots, seed::derive(base_seed, i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(filters, config)
    }

    pub fn filters(&self) -> &[QuanvFilter] {
        &self.filters
    }

    pub fn config(&self) -> &QuanvConfig {
        &self.config
    }

    /// Output of every filter on one block.
    pub fn evaluate_block(&self, block: &TensorBlock, block_index: u64) -> Result<Vec<f64>> {
        let angles = block.encode(self.config.group_size)?;
        let expected = self.filters[0].parameter_count();
        if angles.len() != expected {
            return Err(Error::Shape(format!(
                "block of {} entries gives {} angles; the ansatz takes {expected}",
                block.len(),
                angles.len()
            )));
        }
        self.filters
            .iter()
            .map(|f| f.apply(&angles, self.config.mode, block_index))
            .collect()
    }

    /// Feature map of one image.
    ///
    /// Without a cache every block is simulated, seeded by its row-major
    /// position in the image. With a cache every block takes the payload of
    /// its nearest cached block instead.
    pub fn forward(&self, image: &ImageTensor, cache: Option<&BallTree<Vec<f64>>>) -> Result<FeatureMap> {
        let QuanvConfig { window, stride, .. } = self.config;
        let blocks = tile_image(image, window, stride)?;
        let rows = blocks_per_side(image.height(), window, stride);
        let cols = blocks_per_side(image.width(), window, stride);
        let outputs: Vec<Vec<f64>> = match cache {
            None => blocks
                .par_iter()
                .enumerate()
                .map(|(i, b)| self.evaluate_block(b, i as u64))
                .collect::<Result<_>>()?,
            Some(tree) => blocks
                .iter()
                .map(|b| {
                    let hit = tree.nearest(b.values())?;
                    if hit.payload.len() != self.filters.len() {
                        return Err(Error::Shape(format!(
                            "cached payload has {} features for {} filters",
                            hit.payload.len(),
                            self.filters.len()
                        )));
                    }
                    Ok(hit.payload.clone())
                })
                .collect::<Result<_>>()?,
        };
        FeatureMap::from_block_outputs(rows, cols, &outputs)
    }
}

/// `rows × cols × filters` decoded features, filter index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    rows: usize,
    cols: usize,
    filters: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(rows: usize, cols: usize, filters: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols * filters {
            return Err(Error::Shape(format!(
                "{} values for a {rows}×{cols}×{filters} feature map",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("feature value {v} outside [0,1]")));
        }
        Ok(FeatureMap {
            rows,
            cols,
            filters,
            values,
        })
    }

    /// Assembles a map from per-block filter outputs in row-major block order.
    pub fn from_block_outputs(rows: usize, cols: usize, outputs: &[Vec<f64>]) -> Result<Self> {
        if outputs.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} block outputs for a {rows}×{cols} grid",
                outputs.len()
            )));
        }
        let filters = outputs.first().map_or(0, Vec::len);
        if outputs.iter().any(|o| o.len() != filters) {
            return Err(Error::Shape("ragged block outputs".into()));
        }
        Self::new(rows, cols, filters, outputs.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn filters(&self) -> usize {
        self.filters
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize, filter: usize) -> f64 {
        self.values[(row * self.cols + col) * self.filters + filter]
    }
}

/// Writes feature maps as `image_index,block_row,block_col,filter_id,value`
/// rows. Values use Rust's shortest round-trip float formatting.
pub fn write_feature_csv<W: Write>(writer: W, maps: &[(usize, &FeatureMap)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["image_index", "block_row", "block_col", "filter_id", "value"])?;
    for &(image, map) in maps {
        for r in 0..map.rows {
            for c in 0..map.cols {
                for f in 0..map.filters {
                    out.write_record([
                        image.to_string(),
                        r.to_string(),
                        c.to_string(),
                        f.to_string(),
                        map.get(r, c, f).to_string(),
                    ])?;
                }
            }
        }
    }
    out.flush().map_err(|e| Error::io("<feature csv>", e))?;
    Ok(())
}

/// Reads a feature CSV back into maps keyed by image index. Every image must
/// cover a full grid.
pub fn read_feature_csv<R: Read>(reader: R) -> Result<BTreeMap<usize, FeatureMap>> {
    let mut input = csv::Reader::from_reader(reader);
    let mut cells: BTreeMap<usize, BTreeMap<(usize, usize, usize), f64>> = BTreeMap::new();
    for (i, record) in input.records().enumerate() {
        let line = i + 2;
        let record = record?;
        if record.len() != 5 {
            return Err(Error::parse(line, format!("expected 5 fields, got {}", record.len())));
        }
        let field = |k: usize| -> Result<usize> {
            record[k]
                .trim()
                .parse()
                .map_err(|e| Error::parse(line, format!("field {k} {:?}: {e}", &record[k])))
        };
        let value: f64 = record[4]
            .trim()
            .parse()
            .map_err(|e| Error::parse(line, format!("value {:?}: {e}", &record[4])))?;
        if cells
            .entry(field(0)?)
            .or_default()
            .insert((field(1)?, field(2)?, field(3)?), value)
            .is_some()
        {
            return Err(Error::parse(line, "duplicate feature cell"));
        }
    }
    cells
        .into_iter()
        .map(|(image, grid)| {
            let (rows, cols, filters) = grid.keys().fold((0, 0, 0), |(r, c, f), &(a, b, d)| {
                (r.max(a + 1), c.max(b + 1), f.max(d + 1))
            });
            if grid.len() != rows * cols * filters {
                return Err(Error::Validation(format!(
                    "image {image} has {} cells, expected {rows}×{cols}×{filters}",
                    grid.len()
                )));
            }
            // BTreeMap order is (row, col, filter), the map's storage order.
            let map = FeatureMap::new(rows, cols, filters, grid.into_values().collect())?;
            Ok((image, map))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::f64::consts::FRAC_PI_2;

    use proptest::prelude::*;

    use super::*;
    use crate::statevector::Statevector;

    fn gradient_image(n: usize, m: usize) -> ImageTensor {
        let values = (0..n * n * m).map(|i| (i * 37 % 256) as u8).collect();
        ImageTensor::new(n, n, m, values).unwrap()
    }

    fn pair_filter(seed: u64, shots: u64) -> QuanvFilter {
        let t = DeviceTopology::parse("qubits=2\nedge=0,1").unwrap();
        QuanvFilter::with_graph(0, WeightedGraph::new(t, vec![1.0]).unwrap(), 1, shots, seed).unwrap()
    }

    #[test]
    fn tiling_counts() {
        let blocks = tile_image(&gradient_image(28, 4), 5, 5).unwrap();
        assert_eq!(blocks.len(), 25);
        assert!(blocks.iter().all(|b| b.len() == 100));

        let single = ImageTensor::filled(5, 5, 1, 10).unwrap();
        assert_eq!(tile_image(&single, 5, 5).unwrap().len(), 1);

        let bright = ImageTensor::filled(28, 28, 4, 255).unwrap();
        for b in tile_image(&bright, 5, 5).unwrap() {
            assert!(b.values().iter().all(|&v| v == 1.0));
        }
        assert!(matches!(tile_image(&single, 6, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn tiling_takes_row_major_windows() {
        let img = gradient_image(28, 4);
        let blocks = tile_image(&img, 5, 5).unwrap();
        // Block (1, 2) starts at pixel (5, 10).
        let b = &blocks[5 + 2];
        assert_eq!(b.values()[0], f64::from(img.get(5, 10, 0)) / 255.0);
        assert_eq!(b.values()[4 * 4 + 3], f64::from(img.get(5, 14, 3)) / 255.0);
        assert_eq!(b.values()[20 + 1], f64::from(img.get(6, 10, 1)) / 255.0);
    }

    #[test]
    fn block_count_formula() {
        for n in 1..=30 {
            for w in 1..=n.min(7) {
                for s in 1..=6 {
                    let img = ImageTensor::filled(n, n, 1, 0).unwrap();
                    let expected = ((n - w) / s + 1).pow(2);
                    assert_eq!(tile_image(&img, w, s).unwrap().len(), expected);
                }
            }
        }
    }

    #[test]
    fn encoding_examples() {
        let zeros = TensorBlock::new(vec![0.0; 100]).unwrap();
        assert_eq!(zeros.encode(4).unwrap(), vec![0.0; 25]);
        let ones = TensorBlock::new(vec![1.0; 100]).unwrap();
        assert!(ones.encode(4).unwrap().iter().all(|&a| (a - PI).abs() < 1e-15));

        let mut v = vec![0.0, 0.0, 0.0, 1.0];
        v.extend([1.0; 96]);
        let angles = TensorBlock::new(v).unwrap().encode(4).unwrap();
        assert!((angles[0] - PI / 4.0).abs() < 1e-15);
        assert!((angles[1] - PI).abs() < 1e-15);

        assert!(matches!(zeros.encode(3), Err(Error::Shape(_))));
        assert!(TensorBlock::new(vec![1.5]).is_err());
    }

    #[test]
    fn zero_angles_erase_weights() {
        let t = DeviceTopology::aspen25();
        let angles = vec![0.0; 25];
        let values: Vec<f64> = (0..4)
            .map(|s| {
                QuanvFilter::new(s, t.clone(), 1, 100, s as u64 * 17 + 3)
                    .unwrap()
                    .apply(&angles, ReadoutMode::Exact, 0)
                    .unwrap()
            })
            .collect();
        // H · (H Rz(0) H) = H leaves every qubit in |+⟩.
        for v in values {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn pair_filter_matches_statevector_oracle() {
        let f = pair_filter(1, 100);
        let value = f.apply(&[FRAC_PI_2, PI / 4.0], ReadoutMode::Exact, 0).unwrap();
        // Independent route: full dense simulation of the same circuit.
        let mut s = Statevector::zero(2).unwrap();
        s.apply_circuit(&f.ansatz().build_circuit(&[FRAC_PI_2, PI / 4.0]).unwrap())
            .unwrap();
        let p = s.probabilities();
        assert!((value - (p[0] + p[3])).abs() < 1e-12);
        // The maximal state is (|00⟩ + |11⟩)/√2 up to phase.
        assert!((value - 1.0).abs() < 1e-12);
        assert!(matches!(f.apply(&[0.1], ReadoutMode::Exact, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn pair_filter_follows_closed_form() {
        let f = pair_filter(1, 100);
        for i in 0..16 {
            for j in 0..8 {
                let (theta, beta) = (i as f64 * PI / 8.0, j as f64 * PI / 8.0);
                let value = f.apply(&[theta, beta], ReadoutMode::Exact, 0).unwrap();
                let closed = 0.5 * (1.0 + theta.sin() * (2.0 * beta).sin());
                assert!((value - closed).abs() < 1e-12, "{theta} {beta}");
            }
        }
    }

    #[test]
    fn qubit_marginals_are_flip_symmetric() {
        let f = QuanvFilter::new(0, DeviceTopology::aspen25(), 2, 100, 5).unwrap();
        let angles: Vec<f64> = (0..f.parameter_count()).map(|i| 0.37 * i as f64 + 0.1).collect();
        let circuit = f.ansatz().build_circuit(&angles).unwrap();
        for p in circuit.one_probabilities_from_zero().unwrap() {
            assert!((p - 0.5).abs() < 1e-12);
        }
        let value = f.apply(&angles, ReadoutMode::Exact, 0).unwrap();
        assert!((value - 0.5).abs() > 1e-3);
    }

    #[test]
    fn shots_converge_to_exact() {
        let f = pair_filter(42, 100_000);
        for angles in [[0.3, 0.9], [2.0, 0.4], [1.1, 2.6]] {
            let exact = f.apply(&angles, ReadoutMode::Exact, 0).unwrap();
            let shots = f.apply(&angles, ReadoutMode::Shots, 7).unwrap();
            assert!((exact - shots).abs() < 0.01, "{exact} vs {shots}");
        }
    }

    fn layer(filters: usize) -> QuanvLayer {
        QuanvLayer::bank(&DeviceTopology::aspen25(), filters, 1, 200, 2024, QuanvConfig::default()).unwrap()
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let l = layer(5);
        let img = gradient_image(28, 4);
        let a = l.forward(&img, None).unwrap();
        assert_eq!((a.rows(), a.cols(), a.filters()), (5, 5, 5));
        assert!(a.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, l.forward(&img, None).unwrap());
    }

    #[test]
    fn forward_single_block_equals_apply() {
        let l = layer(1);
        let img = gradient_image(5, 4);
        let map = l.forward(&img, None).unwrap();
        assert_eq!((map.rows(), map.cols(), map.filters()), (1, 1, 1));
        let angles = tile_image(&img, 5, 5).unwrap()[0].encode(4).unwrap();
        let direct = l.filters()[0].apply(&angles, ReadoutMode::Exact, 0).unwrap();
        assert_eq!(map.get(0, 0, 0), direct);
    }

    #[test]
    fn shots_forward_is_deterministic() {
        let topo = DeviceTopology::parse("qubits=4\nedge=0,1\nedge=1,2\nedge=2,3").unwrap();
        let cfg = QuanvConfig {
            window: 2,
            stride: 2,
            group_size: 1,
            mode: ReadoutMode::Shots,
        };
        let l = QuanvLayer::bank(&topo, 3, 1, 500, 9, cfg).unwrap();
        let img = gradient_image(4, 1);
        assert_eq!(l.forward(&img, None).unwrap(), l.forward(&img, None).unwrap());
    }

    #[test]
    fn layer_validation() {
        let t = DeviceTopology::aspen25();
        let a = QuanvFilter::new(0, t.clone(), 1, 10, 5).unwrap();
        let b = QuanvFilter::new(1, t.clone(), 1, 10, 5).unwrap();
        assert!(QuanvLayer::new(vec![a.clone(), b], QuanvConfig::default()).is_err());
        let c = QuanvFilter::new(1, t, 2, 10, 6).unwrap();
        assert!(QuanvLayer::new(vec![a, c], QuanvConfig::default()).is_err());
        assert!(QuanvLayer::new(vec![], QuanvConfig::default()).is_err());
    }

    #[test]
    fn feature_csv_round_trip() {
        let l = layer(2);
        let m0 = l.forward(&gradient_image(28, 4), None).unwrap();
        let m1 = l.forward(&ImageTensor::filled(28, 28, 4, 77).unwrap(), None).unwrap();
        let mut buf = Vec::new();
        write_feature_csv(&mut buf, &[(0, &m0), (3, &m1)]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 25 * 2);
        let back = read_feature_csv(buf.as_slice()).unwrap();
        assert_eq!(back[&0], m0);
        assert_eq!(back[&3], m1);
    }

    proptest! {
        #[test]
        fn encoding_ignores_order_within_groups(values in prop::collection::vec(0.0..=1.0f64, 100), seed in any::<u64>()) {
            let mut permuted = values.clone();
            let mut s = seed;
            for group in permuted.chunks_exact_mut(4) {
                s = seed::mix64(s);
                group.rotate_left((s % 4) as usize);
                if s & 4 != 0 { group.swap(0, 3); }
            }
            let a = TensorBlock::new(values).unwrap().encode(4).unwrap();
            let b = TensorBlock::new(permuted).unwrap().encode(4).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn encoding_scales_linearly(values in prop::collection::vec(0.0..=1.0f64, 100), k in 0.0..=1.0f64) {
            let base = TensorBlock::new(values.clone()).unwrap().encode(4).unwrap();
            let scaled = TensorBlock::new(values.iter().map(|v| v * k).collect()).unwrap().encode(4).unwrap();
            for (a, b) in base.iter().zip(&scaled) {
                prop_assert!((a * k - b).abs() < 1e-12);
            }
        }
    }
}
