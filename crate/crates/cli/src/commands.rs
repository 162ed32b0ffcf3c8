//! The subcommands as library functions. Each writes its CSV outputs under an
//! output directory and returns what it wrote for the caller to summarize.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_4, PI};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use quanv_core::data::{self, generate_synthetic, image_to_tensor, PATCH_CHANNELS};
use quanv_core::featcache::{process_with_budget, write_processed_csv, ComputeBudget};
use quanv_core::nn::{self, LabeledSet, MetricRow, Shape, Tensor, TrainConfig};
use quanv_core::quanv::{self, blocks_per_side, tile_image, QuanvConfig};
use quanv_core::{seed, Dataset, DeviceTopology, FeatureMap, Network, QaoaAnsatz, QuanvLayer, Statevector, WeightedGraph};
use rayon::prelude::*;

use crate::config::{DatasetSource, ExperimentConfig};
use crate::error::{CliError, CliResult};

/// Largest tolerated `|simulated − analytic|` in the appendix sweep.
pub const APPENDIX_TOLERANCE: f64 = 1e-9;

pub const APPENDIX_FILE: &str = "appendix.csv";
pub const FEATURES_FILE: &str = "features.csv";
pub const PROCESSED_FILE: &str = "processed_blocks.csv";
pub const STATS_FILE: &str = "feature_stats.csv";
pub const METRICS_FILE: &str = "metrics.csv";

const WINDOW: usize = 5;
const STRIDE: usize = 5;

// Stream tags for seed::derive(config seed, tag).
const SEED_DATA: u64 = 0;
const SEED_SPLIT: u64 = 1;
const SEED_FILTERS: u64 = 2;
const SEED_INIT: u64 = 3;
const SEED_SHUFFLE: u64 = 4;

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AppendixRow {
    pub theta: f64,
    pub beta: f64,
    pub analytic: f64,
    pub simulated: f64,
    pub abs_delta: f64,
}

/// `resolution` evenly spaced θ values over `[0, 2π]` (both ends included)
/// for each β in {π/8, π/4, 3π/8}, comparing the simulated two-qubit
/// same-state probability with `½(1 + sin θ sin 2β)`.
pub fn appendix_rows(resolution: usize) -> CliResult<Vec<AppendixRow>> {
    if resolution < 2 {
        return Err(CliError::Config(format!("resolution must be at least 2, got {resolution}")));
    }
    let pair = DeviceTopology::new(2, vec![(0, 1)])?;
    let ansatz = QaoaAnsatz::new(WeightedGraph::new(pair, vec![1.0])?, 1)?;
    let mut rows = Vec::with_capacity(3 * resolution);
    for beta in [PI / 8.0, FRAC_PI_4, 3.0 * PI / 8.0] {
        for i in 0..resolution {
            let theta = 2.0 * PI * i as f64 / (resolution - 1) as f64;
            let mut state = Statevector::zero(2)?;
            state.apply_circuit(&ansatz.build_circuit(&[theta, beta])?)?;
            let simulated = state.same_state_probability()?;
            let analytic = 0.5 * (1.0 + theta.sin() * (2.0 * beta).sin());
            rows.push(AppendixRow {
                theta,
                beta,
                analytic,
                simulated,
                abs_delta: (simulated - analytic).abs(),
            });
        }
    }
    Ok(rows)
}

/// Writes `appendix.csv` under `out`. Fails validation when any row misses
/// [`APPENDIX_TOLERANCE`]; the CSV is written either way.
pub fn validate_appendix(resolution: usize, out: &Path) -> CliResult<Vec<AppendixRow>> {
    let rows = appendix_rows(resolution)?;
    let path = out.join(APPENDIX_FILE);
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["theta", "beta", "analytic", "simulated", "abs_delta"])?;
    for r in &rows {
        w.write_record([r.theta, r.beta, r.analytic, r.simulated, r.abs_delta].map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    let failures = rows.iter().filter(|r| r.abs_delta >= APPENDIX_TOLERANCE).count();
    if failures > 0 {
        let worst = rows.iter().map(|r| r.abs_delta).fold(0.0, f64::max);
        return Err(CliError::Validation(format!(
            "{failures} of {} appendix points exceed {APPENDIX_TOLERANCE:e} (worst {worst:e})",
            rows.len()
        )));
    }
    Ok(rows)
}

pub fn load_dataset(cfg: &ExperimentConfig) -> CliResult<Dataset> {
    Ok(match &cfg.dataset {
        DatasetSource::Synthetic { per_class } => generate_synthetic(*per_class, seed::derive(cfg.seed, SEED_DATA))?,
        DatasetSource::Csv(path) => Dataset::load(path)?,
    })
}

/// The dataset and the row indices of its train and test split.
pub fn split(cfg: &ExperimentConfig) -> CliResult<(Dataset, Vec<usize>, Vec<usize>)> {
    let dataset = load_dataset(cfg)?;
    let (train, test) = dataset.split_indices(cfg.train_count, cfg.test_count, seed::derive(cfg.seed, SEED_SPLIT))?;
    Ok((dataset, train, test))
}

pub fn filter_bank(cfg: &ExperimentConfig) -> CliResult<QuanvLayer> {
    let topology = match &cfg.topology {
        Some(path) => DeviceTopology::load(path)?,
        None => DeviceTopology::aspen25(),
    };
    let block_len = WINDOW * WINDOW * PATCH_CHANNELS;
    let params = (topology.edges().len() + 1) * cfg.layers;
    if !block_len.is_multiple_of(params) {
        return Err(CliError::Config(format!(
            "{block_len}-entry blocks cannot be grouped evenly into {params} angles ({} edges, layers = {})",
            topology.edges().len(),
            cfg.layers
        )));
    }
    let qc = QuanvConfig {
        window: WINDOW,
        stride: STRIDE,
        group_size: block_len / params,
        mode: cfg.mode,
    };
    Ok(QuanvLayer::bank(
        &topology,
        cfg.filters,
        cfg.layers,
        cfg.shots,
        seed::derive(cfg.seed, SEED_FILTERS),
        qc,
    )?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureStats {
    pub images: usize,
    pub blocks: usize,
    /// `None` means every distinct block was simulated.
    pub budget: Option<usize>,
    /// Distinct blocks actually simulated.
    pub evaluations: usize,
    /// Blocks answered by simulation or by an identical simulated block.
    pub exact_blocks: usize,
    /// Blocks answered by the nearest simulated block.
    pub mapped_blocks: usize,
}

/// Runs the filter bank over every train and test image (train first, then
/// test, each in split order) and writes `features.csv`,
/// `processed_blocks.csv` and `feature_stats.csv` under `out`. Feature rows
/// carry the image's row index in the source dataset.
pub fn precompute_features(cfg: &ExperimentConfig, out: &Path) -> CliResult<FeatureStats> {
    let (dataset, train, test) = split(cfg)?;
    let layer = filter_bank(cfg)?;
    let order: Vec<usize> = train.iter().chain(&test).copied().collect();
    let per_image: Vec<Vec<_>> = order
        .par_iter()
        .map(|&i| tile_image(&dataset.images()[i], WINDOW, STRIDE))
        .collect::<Result<_, _>>()?;
    let image = &dataset.images()[order[0]];
    let (rows, cols) = (
        blocks_per_side(image.height(), WINDOW, STRIDE),
        blocks_per_side(image.width(), WINDOW, STRIDE),
    );
    let blocks: Vec<_> = per_image.into_iter().flatten().collect();
    let budget = ComputeBudget::new(cfg.budget.unwrap_or(blocks.len()))?;
    let result = process_with_budget(&blocks, &layer, budget)?;

    let maps = result
        .outputs
        .chunks(rows * cols)
        .map(|chunk| FeatureMap::from_block_outputs(rows, cols, chunk))
        .collect::<Result<Vec<_>, _>>()?;
    let keyed: Vec<(usize, &FeatureMap)> = order.iter().copied().zip(&maps).collect();
    let path = out.join(FEATURES_FILE);
    let mut w = create(&path)?;
    quanv::write_feature_csv(&mut w, &keyed)?;
    w.flush().map_err(|e| CliError::io(&path, e))?;

    let path = out.join(PROCESSED_FILE);
    let mut w = create(&path)?;
    write_processed_csv(&mut w, &result.tree)?;
    w.flush().map_err(|e| CliError::io(&path, e))?;

    let stats = FeatureStats {
        images: order.len(),
        blocks: blocks.len(),
        budget: cfg.budget,
        evaluations: result.evaluations(),
        exact_blocks: result.exact_count(),
        mapped_blocks: result.mapped_count(),
    };
    let path = out.join(STATS_FILE);
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["key", "value"])?;
    let budget = cfg.budget.map_or("all".to_string(), |b| b.to_string());
    for (k, v) in [
        ("images", stats.images.to_string()),
        ("blocks", stats.blocks.to_string()),
        ("budget", budget),
        ("evaluations", stats.evaluations.to_string()),
        ("exact_blocks", stats.exact_blocks.to_string()),
        ("mapped_blocks", stats.mapped_blocks.to_string()),
        ("filters", cfg.filters.to_string()),
        ("layers", cfg.layers.to_string()),
        ("mode", cfg.mode.to_string()),
        ("shots", cfg.shots.to_string()),
        ("seed", cfg.seed.to_string()),
    ] {
        w.write_record([k, v.as_str()])?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    Ok(stats)
}

/// One row of `metrics.csv`. `model_id` is the replica index, or `mean` for
/// the averaged stream.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub model_id: String,
    pub model_kind: &'static str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub model_kind: &'static str,
    pub replicas: Vec<Vec<MetricRow>>,
    /// Row-wise arithmetic mean of the replica streams.
    pub mean: Vec<MetricRow>,
}

impl TrainSummary {
    pub fn final_accuracy(&self) -> f64 {
        self.mean.last().map_or(0.0, |r| r.test_accuracy)
    }

    pub fn final_iteration(&self) -> usize {
        self.mean.last().map_or(0, |r| r.iteration)
    }
}

/// Row-wise mean of equally long metric streams.
pub fn average_streams(streams: &[Vec<MetricRow>]) -> Vec<MetricRow> {
    let n = streams.len() as f64;
    (0..streams.first().map_or(0, Vec::len))
        .map(|i| MetricRow {
            iteration: streams[0][i].iteration,
            train_loss: streams.iter().map(|s| s[i].train_loss).sum::<f64>() / n,
            test_accuracy: streams.iter().map(|s| s[i].test_accuracy).sum::<f64>() / n,
        })
        .collect()
}

fn labeled(dataset: &Dataset, indices: &[usize], input: impl Fn(usize) -> CliResult<Tensor>) -> CliResult<LabeledSet> {
    let inputs = indices.iter().map(|&i| input(i)).collect::<CliResult<Vec<_>>>()?;
    let labels = indices.iter().map(|&i| dataset.labels()[i]).collect();
    Ok(LabeledSet::new(inputs, labels)?)
}

fn missing_features(path: &Path, detail: &str) -> CliError {
    CliError::Config(format!(
        "{detail} in {}; run `quanv precompute-features` with the same config first",
        path.display()
    ))
}

fn read_features(path: &Path, cfg: &ExperimentConfig, wanted: &[usize]) -> CliResult<BTreeMap<usize, FeatureMap>> {
    let file = File::open(path).map_err(|_| missing_features(path, "no features"))?;
    let maps = quanv::read_feature_csv(std::io::BufReader::new(file))?;
    for &i in wanted {
        match maps.get(&i) {
            None => return Err(missing_features(path, &format!("no features for image {i}"))),
            Some(m) if m.filters() != cfg.filters => {
                return Err(missing_features(
                    path,
                    &format!("image {i} has {} filters but filters = {}", m.filters(), cfg.filters),
                ))
            }
            Some(_) => {}
        }
    }
    Ok(maps)
}

fn run_replicas(
    cfg: &ExperimentConfig,
    kind: &'static str,
    build: impl Fn(u64) -> CliResult<Network> + Sync,
    train: &LabeledSet,
    test: &LabeledSet,
    checkpoints: &Path,
) -> CliResult<TrainSummary> {
    // Collected in replica order regardless of which finishes first.
    let replicas = (0..cfg.replicas)
        .into_par_iter()
        .map(|r| -> CliResult<Vec<MetricRow>> {
            let mut net = build(seed::derive(seed::derive(cfg.seed, SEED_INIT), r as u64))?;
            let tc = TrainConfig {
                learning_rate: cfg.learning_rate,
                epochs: cfg.epochs,
                batch_size: cfg.batch_size,
                seed: seed::derive(seed::derive(cfg.seed, SEED_SHUFFLE), r as u64),
                eval_every: cfg.eval_every,
            };
            let rows = nn::train(&mut net, train, test, &tc)?;
            let path = checkpoints.join(format!("{kind}-{r}.ckpt"));
            let mut w = create(&path)?;
            nn::write_checkpoint(&mut w, &net).map_err(|e| CliError::io(&path, e))?;
            w.flush().map_err(|e| CliError::io(&path, e))?;
            Ok(rows)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mean = average_streams(&replicas);
    Ok(TrainSummary {
        model_kind: kind,
        replicas,
        mean,
    })
}

/// Trains `cfg.replicas` copies of each requested model and writes
/// `metrics.csv` plus one checkpoint per replica under `out/checkpoints`.
/// qnn models read the feature CSV named by `features` (default
/// `out/features.csv`).
pub fn train(cfg: &ExperimentConfig, out: &Path) -> CliResult<Vec<TrainSummary>> {
    let (dataset, train_idx, test_idx) = split(cfg)?;
    let checkpoints = out.join("checkpoints");
    let mut summaries = Vec::new();

    if cfg.model.includes_cnn() {
        let tensor = |i: usize| Ok(image_to_tensor(&dataset.images()[i]));
        let (train, test) = (labeled(&dataset, &train_idx, tensor)?, labeled(&dataset, &test_idx, tensor)?);
        summaries.push(run_replicas(cfg, "cnn", |s| Ok(nn::reference_cnn(s)), &train, &test, &checkpoints)?);
    }
    if cfg.model.includes_qnn() {
        let path: PathBuf = cfg.features.clone().unwrap_or_else(|| out.join(FEATURES_FILE));
        let wanted: Vec<usize> = train_idx.iter().chain(&test_idx).copied().collect();
        let maps = read_features(&path, cfg, &wanted)?;
        let tensor = |i: usize| Ok(Tensor::from(&maps[&i]));
        let (train, test) = (labeled(&dataset, &train_idx, tensor)?, labeled(&dataset, &test_idx, tensor)?);
        let first = &maps[&train_idx[0]];
        let shape = Shape::new(first.rows(), first.cols(), first.filters());
        summaries.push(run_replicas(
            cfg,
            "qnn",
            |s| Ok(nn::reference_qnn(s, shape)?),
            &train,
            &test,
            &checkpoints,
        )?);
    }

    let path = out.join(METRICS_FILE);
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["iteration", "train_loss", "test_accuracy", "model_id", "model_kind"])?;
    for s in &summaries {
        let ids = (0..s.replicas.len()).map(|r| r.to_string()).chain(["mean".to_string()]);
        for (id, stream) in ids.zip(s.replicas.iter().chain([&s.mean])) {
            for row in stream {
                w.write_record([
                    row.iteration.to_string(),
                    row.train_loss.to_string(),
                    row.test_accuracy.to_string(),
                    id.clone(),
                    s.model_kind.to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    Ok(summaries)
}

/// Reads `metrics.csv` back, mostly for checking runs after the fact.
pub fn read_metrics(path: &Path) -> CliResult<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for record in r.records() {
        let record = record?;
        let field = |k: usize| record.get(k).unwrap_or("").to_string();
        let num = |k: usize| -> CliResult<f64> {
            field(k).parse().map_err(|e| CliError::Config(format!("{}: {:?}: {e}", path.display(), field(k))))
        };
        rows.push(MetricsRecord {
            iteration: num(0)? as usize,
            train_loss: num(1)?,
            test_accuracy: num(2)?,
            model_id: field(3),
            model_kind: match field(4).as_str() {
                "cnn" => "cnn",
                "qnn" => "qnn",
                other => return Err(CliError::Config(format!("unknown model_kind {other:?}"))),
            },
        });
    }
    Ok(rows)
}

/// Writes a synthetic dataset (gzip when the name ends in `.gz`).
pub fn dataset_gen(per_class: usize, seed: u64, out: &Path) -> CliResult<Dataset> {
    let ds = generate_synthetic(per_class, seed)?;
    ensure_parent(out)?;
    ds.save(out)?;
    Ok(ds)
}

/// Splits a dataset file into `train.csv` and `test.csv` under `out`.
pub fn dataset_split(input: &Path, n_train: usize, n_test: usize, seed: u64, out: &Path) -> CliResult<(Dataset, Dataset)> {
    let ds = Dataset::load(input)?;
    let (train, test) = ds.split(n_train, n_test, seed)?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    train.save(out.join("train.csv"))?;
    test.save(out.join("test.csv"))?;
    Ok((train, test))
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e)),
        _ => Ok(()),
    }
}

/// Class counts, for `dataset` command summaries.
pub fn histogram_line(ds: &Dataset) -> String {
    ds.label_histogram()
        .iter()
        .zip(data::CLASS_NAMES)
        .map(|(n, name)| format!("{name} {n}"))
        .collect::<Vec<_>>()
        .join(", ")
}
