//! Dataset readers and generators.
//!
//! * MNIST IDX: big-endian `u32` magic (`0x00000803` images, `0x00000801`
//!   labels), big-endian `u32` dimension sizes, then raw `u8` values.
//! * CIFAR-10 binary: concatenated 3073-byte records, one label byte followed
//!   by 1024 red, 1024 green and 1024 blue bytes (row-major 32×32 planes).
//!
//! Pixels are scaled by exactly `value / 255`. No mean-centering is applied
//! unless [`Dataset::standardize`] is called.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;
pub const CIFAR_CLASSES: usize = 10;
pub const MNIST_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Inputs (`n × features` or `n × C × H × W`) with one class label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::dim(format!(
                "{} inputs but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Domain(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample input shape (everything after the batch axis).
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Copies the given rows into a batch tensor and label list.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let width = self.inputs.row_len();
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = indices.len();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("gather keeps row width"), labels)
    }

    fn select(&self, indices: &[usize], split: Split) -> Dataset {
        let (inputs, labels) = self.gather(indices);
        Dataset {
            inputs,
            labels,
            num_classes: self.num_classes,
            split,
        }
    }

    /// The first `n` samples after a seeded shuffle (all of them, reordered, if `n ≥ len`).
    pub fn subset(&self, n: usize, seed: u64) -> Dataset {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order.truncate(n.min(self.len()));
        self.select(&order, self.split)
    }

    /// Splits off the first `n` rows as one dataset and the rest as another.
    pub fn split_at(&self, n: usize, first: Split, second: Split) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::Domain(format!("cannot split {} rows at {n}", self.len())));
        }
        let a: Vec<usize> = (0..n).collect();
        let b: Vec<usize> = (n..self.len()).collect();
        Ok((self.select(&a, first), self.select(&b, second)))
    }

    /// Reshapes every sample, e.g. a flat 3072-vector into `3 × 32 × 32`.
    pub fn reshape_samples(self, sample_shape: &[usize]) -> Result<Dataset> {
        let mut shape = vec![self.len()];
        shape.extend_from_slice(sample_shape);
        Ok(Dataset {
            inputs: self.inputs.reshape(shape)?,
            ..self
        })
    }

    /// Per-feature mean and standard deviation over all rows.
    pub fn feature_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let width = self.inputs.row_len();
        let n = self.len() as f64;
        let mut mean = vec![0.0; width];
        for i in 0..self.len() {
            for (m, v) in mean.iter_mut().zip(self.inputs.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; width];
        for i in 0..self.len() {
            for ((s, v), m) in var.iter_mut().zip(self.inputs.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
        (mean, std)
    }

    /// Applies `(x − mean) / std` per feature; features with zero spread are only centered.
    pub fn standardize(&mut self, mean: &[f64], std: &[f64]) {
        let width = self.inputs.row_len();
        for row in self.inputs.data_mut().chunks_exact_mut(width) {
            for ((v, m), s) in row.iter_mut().zip(mean).zip(std) {
                *v = if *s > 0.0 { (*v - m) / s } else { *v - m };
            }
        }
    }
}

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(offset, "file ends inside the header"))
}

/// Parsed IDX image file: dimensions plus raw pixel bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(0, format!("bad image magic {magic:#010x}")));
    }
    let count = read_u32_be(bytes, 4)? as usize;
    let rows = read_u32_be(bytes, 8)? as usize;
    let cols = read_u32_be(bytes, 12)? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::format(8, "zero image dimension"));
    }
    let expected = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .and_then(|v| v.checked_add(16))
        .ok_or_else(|| Error::format(4, "image dimensions overflow"))?;
    if bytes.len() != expected {
        return Err(Error::format(
            bytes.len().min(expected),
            format!("header declares {expected} bytes, file has {}", bytes.len()),
        ));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(0, format!("bad label magic {magic:#010x}")));
    }
    let count = read_u32_be(bytes, 4)? as usize;
    if bytes.len() != count + 8 {
        return Err(Error::format(
            bytes.len().min(count + 8),
            format!("header declares {count} labels, file has {} bytes", bytes.len()),
        ));
    }
    Ok(bytes[8..].to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [
        IDX_IMAGES_MAGIC,
        images.count as u32,
        images.rows as u32,
        images.cols as u32,
    ] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Builds a flat `n × (rows·cols)` dataset from IDX image and label bytes.
pub fn mnist_from_bytes(images: &[u8], labels: &[u8], split: Split) -> Result<Dataset> {
    let images = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != images.count {
        return Err(Error::format(
            4,
            format!("{} images but {} labels", images.count, labels.len()),
        ));
    }
    if let Some(i) = labels.iter().position(|&l| l as usize >= MNIST_CLASSES) {
        return Err(Error::format(8 + i, format!("label {} out of range", labels[i])));
    }
    let width = images.rows * images.cols;
    let data = images.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let inputs = Tensor::new(vec![images.count.max(1), width], data).map_err(|_| Error::format(4, "no images"))?;
    Dataset::new(
        inputs,
        labels.iter().map(|&l| l as usize).collect(),
        MNIST_CLASSES,
        split,
    )
}

pub fn load_mnist_idx(images_file: impl AsRef<Path>, labels_file: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let images = fs::read(images_file)?;
    let labels = fs::read(labels_file)?;
    mnist_from_bytes(&images, &labels, split)
}

/// Parses concatenated CIFAR-10 records into `n × 3 × 32 × 32`.
pub fn cifar10_from_bytes(bytes: &[u8], split: Split) -> Result<Dataset> {
    cifar10_from_files(&[bytes], split)
}

fn cifar10_from_files(files: &[&[u8]], split: Split) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (f, bytes) in files.iter().enumerate() {
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD_LEN != 0 {
            let record = bytes.len() / CIFAR_RECORD_LEN;
            return Err(Error::format(
                record * CIFAR_RECORD_LEN,
                format!("file {f}: record {record} is truncated"),
            ));
        }
        for (r, record) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
            if record[0] as usize >= CIFAR_CLASSES {
                return Err(Error::format(
                    r * CIFAR_RECORD_LEN,
                    format!("file {f}: record {r} has label {}", record[0]),
                ));
            }
            labels.push(record[0] as usize);
            data.extend(record[1..].iter().map(|&p| p as f64 / 255.0));
        }
    }
    let inputs =
        Tensor::new(vec![labels.len().max(1), 3, 32, 32], data).map_err(|e| Error::format(0, e.to_string()))?;
    Dataset::new(inputs, labels, CIFAR_CLASSES, split)
}

/// Reads CIFAR-10 binary batch files; samples keep the order of `files`.
pub fn load_cifar10(files: &[impl AsRef<Path>], split: Split) -> Result<Dataset> {
    let contents = files.iter().map(fs::read).collect::<std::io::Result<Vec<_>>>()?;
    let slices: Vec<&[u8]> = contents.iter().map(Vec::as_slice).collect();
    cifar10_from_files(&slices, split)
}

pub fn encode_cifar_record(label: u8, pixels: &[u8; 3072]) -> Vec<u8> {
    let mut out = Vec::with_capacity(CIFAR_RECORD_LEN);
    out.push(label);
    out.extend_from_slice(pixels);
    out
}

/// Gaussian clusters: class `c` is centered on a point drawn uniformly from
/// `[0, 1]^dim`, and each sample adds `spread · N(0, 1)` noise per coordinate.
/// Samples are interleaved by class (`label = i % num_classes`).
pub fn synth_blobs(num_classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if num_classes == 0 || per_class == 0 || dim == 0 {
        return Err(Error::Domain("blob counts must be positive".into()));
    }
    if !(spread >= 0.0) {
        return Err(Error::Domain(format!("spread {spread} must be non-negative")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = blob_centers(num_classes, dim, seed);
    let n = num_classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % num_classes;
        labels.push(c);
        for &m in &centers[c] {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            data.push(m + spread * z);
        }
    }
    Dataset::new(Tensor::new(vec![n, dim], data)?, labels, num_classes, Split::Train)
}

/// The class centers [`synth_blobs`] uses for a given seed.
pub fn blob_centers(num_classes: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    (0..num_classes)
        .map(|_| (0..dim).map(|_| rng.random::<f64>()).collect())
        .collect()
}

/// Parameters of the image-shaped synthetic classification task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthImageSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub channels: usize,
    pub side: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Standard deviation of the per-sample color offset.
    #[serde(default = "default_color_jitter")]
    pub color_jitter: f64,
}

fn default_color_jitter() -> f64 {
    0.1
}

/// Image-shaped stand-in for CIFAR-10 when the real files are unavailable.
///
/// Each class owns a mean color and an oriented sinusoidal grating (random
/// orientation, spatial frequency and per-channel amplitude). A sample draws
/// a random grating phase, a color offset and per-pixel noise, and is clipped
/// to `[0, 1]`. Samples are interleaved by class.
pub fn synth_images(spec: &SynthImageSpec, seed: u64) -> Result<Dataset> {
    let SynthImageSpec {
        num_classes,
        per_class,
        channels,
        side,
        noise,
        color_jitter,
    } = *spec;
    if num_classes == 0 || per_class == 0 || channels == 0 || side == 0 {
        return Err(Error::Domain("image counts must be positive".into()));
    }
    if !(noise >= 0.0) || !(color_jitter >= 0.0) {
        return Err(Error::Domain("noise levels must be non-negative".into()));
    }
    let mut class_rng = ChaCha8Rng::seed_from_u64(seed);
    class_rng.set_stream(1);
    struct Pattern {
        color: Vec<f64>,
        amplitude: Vec<f64>,
        kx: f64,
        ky: f64,
    }
    let tau = std::f64::consts::TAU;
    let patterns: Vec<Pattern> = (0..num_classes)
        .map(|_| {
            let theta = class_rng.random_range(0.0..std::f64::consts::PI);
            let freq = class_rng.random_range(1.0..4.0) / side as f64;
            Pattern {
                color: (0..channels).map(|_| class_rng.random_range(0.3..0.7)).collect(),
                amplitude: (0..channels).map(|_| class_rng.random_range(0.05..0.25)).collect(),
                kx: tau * freq * theta.cos(),
                ky: tau * freq * theta.sin(),
            }
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixel_noise = Normal::new(0.0, noise).expect("finite noise");
    let jitter = Normal::new(0.0, color_jitter).expect("finite jitter");
    let n = num_classes * per_class;
    let plane = side * side;
    let mut data = Vec::with_capacity(n * channels * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % num_classes;
        labels.push(c);
        let p = &patterns[c];
        let phase = rng.random_range(0.0..tau);
        for ch in 0..channels {
            let offset = p.color[ch] + jitter.sample(&mut rng);
            for y in 0..side {
                for x in 0..side {
                    let wave = (p.kx * x as f64 + p.ky * y as f64 + phase).sin();
                    let v = offset + p.amplitude[ch] * wave + pixel_noise.sample(&mut rng);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
    }
    Dataset::new(
        Tensor::new(vec![n, channels, side, side], data)?,
        labels,
        num_classes,
        Split::Train,
    )
}

/// Mini-batches of row indices for one epoch. With `shuffle`, the order is a
/// permutation determined only by `(seed, epoch)`; the last batch may be short.
pub fn batch_iter(len: usize, batch_size: usize, seed: u64, epoch: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Domain("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_images() -> IdxImages {
        IdxImages {
            count: 2,
            rows: 2,
            cols: 3,
            pixels: vec![0, 255, 17, 128, 1, 2, 3, 4, 5, 6, 7, 254],
        }
    }

    #[test]
    fn idx_round_trip() {
        let img = fixture_images();
        let bytes = encode_idx_images(&img);
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        assert_eq!(parse_idx_images(&bytes).unwrap(), img);
        let labels = encode_idx_labels(&[7, 2]);
        assert_eq!(&labels[..4], &[0, 0, 8, 1]);
        let ds = mnist_from_bytes(&bytes, &labels, Split::Train).unwrap();
        assert_eq!(ds.inputs.shape(), &[2, 6]);
        assert_eq!(ds.labels, vec![7, 2]);
        assert_eq!(ds.inputs.data()[1], 1.0);
        assert_eq!(ds.inputs.data()[2], 17.0 / 255.0);
    }

    #[test]
    fn idx_rejects_wrong_magic_and_empty() {
        let mut bytes = encode_idx_images(&fixture_images());
        assert!(parse_idx_labels(&bytes).is_err());
        bytes[3] = 0x01;
        assert!(matches!(parse_idx_images(&bytes), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(parse_idx_images(&[]), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(parse_idx_labels(&[]), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn idx_count_mismatch_between_files() {
        let bytes = encode_idx_images(&fixture_images());
        let labels = encode_idx_labels(&[1, 2, 3]);
        assert!(matches!(
            mnist_from_bytes(&bytes, &labels, Split::Train),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn cifar_single_record() {
        let rec = encode_cifar_record(3, &[255; 3072]);
        assert_eq!(rec.len(), 3073);
        let ds = cifar10_from_bytes(&rec, Split::Test).unwrap();
        assert_eq!(ds.labels, vec![3]);
        assert_eq!(ds.inputs.shape(), &[1, 3, 32, 32]);
        assert!(ds.inputs.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn cifar_rejects_truncation_and_bad_label() {
        let mut two = encode_cifar_record(1, &[9; 3072]);
        two.extend(encode_cifar_record(2, &[9; 3072]));
        two.pop();
        match cifar10_from_bytes(&two, Split::Train) {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset, CIFAR_RECORD_LEN);
                assert!(msg.contains("record 1"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
        let bad = encode_cifar_record(10, &[0; 3072]);
        assert!(cifar10_from_bytes(&bad, Split::Train).is_err());
        assert!(cifar10_from_bytes(&[], Split::Train).is_err());
    }

    #[test]
    fn blobs_zero_spread_sits_on_centers() {
        let ds = synth_blobs(3, 4, 5, 0.0, 11).unwrap();
        let centers = blob_centers(3, 5, 11);
        for i in 0..ds.len() {
            assert_eq!(ds.inputs.row(i), centers[ds.labels[i]].as_slice());
        }
    }

    #[test]
    fn blobs_are_deterministic() {
        assert_eq!(
            synth_blobs(4, 10, 3, 0.5, 2).unwrap(),
            synth_blobs(4, 10, 3, 0.5, 2).unwrap()
        );
        assert_ne!(
            synth_blobs(4, 10, 3, 0.5, 2).unwrap(),
            synth_blobs(4, 10, 3, 0.5, 3).unwrap()
        );
    }

    #[test]
    fn synth_images_shape_and_range() {
        let spec = SynthImageSpec {
            num_classes: 4,
            per_class: 3,
            channels: 3,
            side: 8,
            noise: 0.1,
            color_jitter: 0.05,
        };
        let ds = synth_images(&spec, 5).unwrap();
        assert_eq!(ds.inputs.shape(), &[12, 3, 8, 8]);
        assert!(ds.inputs.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(ds, synth_images(&spec, 5).unwrap());
    }

    #[test]
    fn batches_partition_the_dataset() {
        let plain = batch_iter(10, 4, 1, 0, false).unwrap();
        assert_eq!(plain, vec![vec![0, 1, 2, 3], vec![4, 5, 6, 7], vec![8, 9]]);
        let a = batch_iter(10, 3, 9, 2, true).unwrap();
        assert_eq!(a, batch_iter(10, 3, 9, 2, true).unwrap());
        assert_ne!(a, batch_iter(10, 3, 9, 3, true).unwrap());
        let mut all: Vec<usize> = a.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(batch_iter(3, 0, 0, 0, false).is_err());
    }

    #[test]
    fn subset_and_split() {
        let ds = synth_blobs(2, 5, 2, 0.1, 0).unwrap();
        let sub = ds.subset(4, 3);
        assert_eq!(sub.len(), 4);
        assert_eq!(sub, ds.subset(4, 3));
        let (a, b) = ds.split_at(6, Split::Train, Split::Test).unwrap();
        assert_eq!((a.len(), b.len()), (6, 4));
        assert_eq!(b.split, Split::Test);
        assert_eq!(b.inputs.row(0), ds.inputs.row(6));
    }

    #[test]
    fn standardize_centers_features() {
        let mut ds = synth_blobs(2, 20, 3, 1.0, 4).unwrap();
        let (mean, std) = ds.feature_stats();
        ds.standardize(&mean, &std);
        let (m2, s2) = ds.feature_stats();
        assert!(m2.iter().all(|m| m.abs() < 1e-12));
        assert!(s2.iter().all(|s| (s - 1.0).abs() < 1e-12));
    }
}
