//! Labelled 28×28×4 patch datasets.
//!
//! The on-disk format is headerless CSV: each row holds 3136 pixel values in
//! `[0, 255]` (row-major, channel fastest) followed by the label in `0..4`.
//! Paths ending in `.gz` are read and written gzip-compressed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{Shape, Tensor, NUM_CLASSES};
use crate::quanv::ImageTensor;

pub const PATCH_SIDE: usize = 28;
pub const PATCH_CHANNELS: usize = 4;
pub const PATCH_LEN: usize = PATCH_SIDE * PATCH_SIDE * PATCH_CHANNELS;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["barren", "trees", "grassland", "other"];

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    images: Vec<ImageTensor>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Vec<ImageTensor>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} images with {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(Error::Validation(format!("label {l} outside 0..{NUM_CLASSES}")));
        }
        let patch = Shape::new(PATCH_SIDE, PATCH_SIDE, PATCH_CHANNELS);
        if let Some(img) = images
            .iter()
            .find(|i| Shape::new(i.height(), i.width(), i.channels()) != patch)
        {
            return Err(Error::Shape(format!(
                "image {}×{}×{} is not a {patch} patch",
                img.height(),
                img.width(),
                img.channels()
            )));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[ImageTensor] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Examples per label.
    pub fn label_histogram(&self) -> [usize; NUM_CLASSES] {
        let mut hist = [0; NUM_CLASSES];
        for &l in &self.labels {
            hist[l] += 1;
        }
        hist
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut input = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(reader);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (i, record) in input.records().enumerate() {
            let row = i + 1;
            let record = record?;
            if record.len() != PATCH_LEN + 1 {
                return Err(Error::parse(
                    row,
                    format!("expected {} fields, found {}", PATCH_LEN + 1, record.len()),
                ));
            }
            let mut pixels = Vec::with_capacity(PATCH_LEN);
            for (col, field) in record.iter().take(PATCH_LEN).enumerate() {
                let v: u8 = field.trim().parse().map_err(|_| {
                    Error::parse(row, format!("pixel {col} value {field:?} is not in 0..=255"))
                })?;
                pixels.push(v);
            }
            let raw = record[PATCH_LEN].trim();
            let label: usize = raw
                .parse()
                .ok()
                .filter(|&l| l < NUM_CLASSES)
                .ok_or_else(|| Error::parse(row, format!("label {raw:?} is not in 0..{NUM_CLASSES}")))?;
            images.push(ImageTensor::new(PATCH_SIDE, PATCH_SIDE, PATCH_CHANNELS, pixels)?);
            labels.push(label);
        }
        Ok(Dataset { images, labels })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        for (img, label) in self.images.iter().zip(&self.labels) {
            let row = img
                .values()
                .iter()
                .map(u8::to_string)
                .chain(std::iter::once(label.to_string()));
            out.write_record(row)?;
        }
        out.flush().map_err(|e| Error::io("<dataset csv>", e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        if is_gzip(path) {
            Self::read_csv(BufReader::new(GzDecoder::new(file)))
        } else {
            Self::read_csv(BufReader::new(file))
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        if is_gzip(path) {
            let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
            self.write_csv(&mut enc)?;
            enc.finish()
                .and_then(|mut w| w.flush())
                .map_err(|e| Error::io(path, e))
        } else {
            self.write_csv(BufWriter::new(file))
        }
    }

    /// Seeded shuffle, then the first `n_train` rows for training and the next
    /// `n_test` for testing.
    pub fn split(&self, n_train: usize, n_test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        let (train, test) = self.split_indices(n_train, n_test, seed)?;
        Ok((self.subset(&train), self.subset(&test)))
    }

    /// Row indices of [`split`](Self::split).
    pub fn split_indices(&self, n_train: usize, n_test: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
        if n_train + n_test > self.len() {
            return Err(Error::Argument(format!(
                "cannot draw {n_train} + {n_test} rows from {}",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let test = order[n_train..n_train + n_test].to_vec();
        order.truncate(n_train);
        Ok((order, test))
    }
}

fn is_gzip(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

/// Maps pixels linearly onto `[-1, 1]` for the classical network.
pub fn image_to_tensor(image: &ImageTensor) -> Tensor {
    Tensor::new(
        Shape::new(image.height(), image.width(), image.channels()),
        image.values().iter().map(|&v| f64::from(v) / 127.5 - 1.0).collect(),
    )
    .expect("image and tensor sizes agree")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stripes {
    None,
    Horizontal,
    Vertical,
    Diagonal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassSignature {
    /// Per-channel mean intensity in `[0, 1]`.
    pub channel_means: [f64; PATCH_CHANNELS],
    pub stripes: Stripes,
}

/// Constants of the synthetic four-class generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub classes: [ClassSignature; NUM_CLASSES],
    pub stripe_amplitude: f64,
    pub stripe_period: usize,
    /// Standard deviation of per-pixel noise.
    pub pixel_noise: f64,
    /// Half-width of the per-image brightness offset.
    pub brightness_jitter: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let sig = |channel_means, stripes| ClassSignature {
            channel_means,
            stripes,
        };
        SyntheticConfig {
            // Channel-averaged brightness is 0.25, 0.42, 0.58, 0.75.
            classes: [
                sig([0.34, 0.28, 0.22, 0.16], Stripes::None),
                sig([0.30, 0.40, 0.36, 0.62], Stripes::Horizontal),
                sig([0.50, 0.66, 0.44, 0.72], Stripes::Vertical),
                sig([0.80, 0.76, 0.74, 0.70], Stripes::Diagonal),
            ],
            stripe_amplitude: 0.12,
            stripe_period: 4,
            pixel_noise: 0.08,
            brightness_jitter: 0.05,
        }
    }
}

/// `count_per_class` images of each label, interleaved by label.
pub fn generate_synthetic(count_per_class: usize, seed: u64) -> Result<Dataset> {
    generate_synthetic_with(&SyntheticConfig::default(), count_per_class, seed)
}

pub fn generate_synthetic_with(config: &SyntheticConfig, count_per_class: usize, seed: u64) -> Result<Dataset> {
    if count_per_class == 0 {
        return Err(Error::Argument("count per class must be at least 1".into()));
    }
    let noise = Normal::new(0.0, config.pixel_noise)
        .map_err(|e| Error::Argument(format!("pixel noise: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(count_per_class * NUM_CLASSES);
    let mut labels = Vec::with_capacity(count_per_class * NUM_CLASSES);
    let period = config.stripe_period.max(1);
    for _ in 0..count_per_class {
        for (label, class) in config.classes.iter().enumerate() {
            let jitter = if config.brightness_jitter > 0.0 {
                rng.random_range(-config.brightness_jitter..=config.brightness_jitter)
            } else {
                0.0
            };
            let phase = rng.random_range(0..period);
            let mut pixels = Vec::with_capacity(PATCH_LEN);
            for y in 0..PATCH_SIDE {
                for x in 0..PATCH_SIDE {
                    let coord = match class.stripes {
                        Stripes::None => None,
                        Stripes::Horizontal => Some(y),
                        Stripes::Vertical => Some(x),
                        Stripes::Diagonal => Some(x + y),
                    };
                    let stripe = coord.map_or(0.0, |c| {
                        if (c + phase) % period < period / 2 {
                            config.stripe_amplitude
                        } else {
                            -config.stripe_amplitude
                        }
                    });
                    for mean in class.channel_means {
                        let v = mean + jitter + stripe + noise.sample(&mut rng);
                        pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                    }
                }
            }
            images.push(ImageTensor::new(PATCH_SIDE, PATCH_SIDE, PATCH_CHANNELS, pixels)?);
            labels.push(label);
        }
    }
    Dataset::new(images, labels)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn row(pixels: usize, value: &str, label: &str) -> String {
        let mut fields = vec![value; pixels];
        fields.push(label);
        fields.join(",")
    }

    #[test]
    fn tensor_conversion_centers_pixels() {
        let img = ImageTensor::new(1, 3, 1, vec![0, 255, 51]).unwrap();
        let t = image_to_tensor(&img);
        assert_eq!(t.shape(), Shape::new(1, 3, 1));
        assert_eq!(&t.data()[..2], &[-1.0, 1.0]);
        assert!((t.data()[2] + 0.6).abs() < 1e-15);
    }

    #[test]
    fn reads_single_row() {
        let text = row(PATCH_LEN, "12", "3");
        let ds = Dataset::read_csv(text.as_bytes()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.labels(), &[3]);
        assert!(ds.images()[0].values().iter().all(|&v| v == 12));
    }

    #[test]
    fn short_row_names_the_row() {
        let text = format!("{}\n{}\n", row(PATCH_LEN, "0", "1"), row(PATCH_LEN - 1, "0", "1"));
        match Dataset::read_csv(text.as_bytes()) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("3136"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_values_fail() {
        let bad_pixel = row(PATCH_LEN, "256", "0");
        assert!(matches!(Dataset::read_csv(bad_pixel.as_bytes()), Err(Error::Parse { line: 1, .. })));
        let bad_label = row(PATCH_LEN, "1", "4");
        assert!(matches!(Dataset::read_csv(bad_label.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn gzip_round_trip() {
        let ds = generate_synthetic(2, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for name in ["d.csv", "d.csv.gz"] {
            let path = dir.path().join(name);
            ds.save(&path).unwrap();
            assert_eq!(Dataset::load(&path).unwrap(), ds);
        }
        let plain = std::fs::metadata(dir.path().join("d.csv")).unwrap().len();
        let packed = std::fs::metadata(dir.path().join("d.csv.gz")).unwrap().len();
        assert!(packed < plain);
    }

    #[test]
    fn synthetic_counts_and_seeds() {
        let ds = generate_synthetic(25, 1).unwrap();
        assert_eq!(ds.len(), 100);
        assert_eq!(ds.label_histogram(), [25; 4]);
        let other = generate_synthetic(25, 2).unwrap();
        assert_eq!(other.label_histogram(), ds.label_histogram());
        assert_ne!(other.images(), ds.images());
        assert_eq!(generate_synthetic(25, 1).unwrap(), ds);
        assert!(generate_synthetic(0, 1).is_err());
    }

    #[test]
    fn split_sizes() {
        let ds = generate_synthetic(3, 0).unwrap();
        let (train, test) = ds.split(9, 3, 5).unwrap();
        assert_eq!((train.len(), test.len()), (9, 3));
        assert_eq!(ds.split(9, 3, 5).unwrap(), (train, test));
        let (_, empty) = ds.split(12, 0, 5).unwrap();
        assert!(empty.is_empty());
        assert!(matches!(ds.split(10, 3, 5), Err(Error::Argument(_))));
    }

    #[test]
    fn split_of_ten_thousand() {
        let labels = (0..10_000).map(|i| i % 4).collect::<Vec<_>>();
        let img = ImageTensor::filled(PATCH_SIDE, PATCH_SIDE, PATCH_CHANNELS, 0).unwrap();
        let ds = Dataset::new(vec![img; 10_000], labels).unwrap();
        let (train, test) = ds.split_indices(9_000, 1_000, 42).unwrap();
        assert_eq!((train.len(), test.len()), (9_000, 1_000));
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 10_000);
    }

    proptest! {
        #[test]
        fn split_is_disjoint(n in 1usize..60, a in 0usize..60, b in 0usize..60, seed in any::<u64>()) {
            prop_assume!(a + b <= n * 4);
            let ds = generate_synthetic_with(&SyntheticConfig { pixel_noise: 0.01, ..Default::default() }, n, seed % 7).unwrap();
            let (train, test) = ds.split_indices(a, b, seed).unwrap();
            prop_assert_eq!(train.len(), a);
            prop_assert_eq!(test.len(), b);
            prop_assert!(train.iter().all(|i| !test.contains(i)));
        }

        #[test]
        fn csv_round_trip(pixels in prop::collection::vec(any::<u8>(), PATCH_LEN), label in 0usize..4) {
            let img = ImageTensor::new(PATCH_SIDE, PATCH_SIDE, PATCH_CHANNELS, pixels).unwrap();
            let ds = Dataset::new(vec![img.clone(), img], vec![label, 3 - label]).unwrap();
            let mut buf = Vec::new();
            ds.write_csv(&mut buf).unwrap();
            prop_assert_eq!(Dataset::read_csv(buf.as_slice()).unwrap(), ds);
        }
    }
}
