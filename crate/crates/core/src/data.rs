//! Datasets, batching, augmentation and the fixed probe subset.
//!
//! Images are held per sample (`[C, H, W]` contiguous) after per-channel
//! normalisation with training-set statistics, and gathered into
//! channel-major batches on demand.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const CIFAR_RECORD: usize = 1 + 3072;
const CIFAR_PER_FILE: usize = 10_000;
pub const CIFAR_TRAIN_FILES: [&str; 5] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Where a dataset comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DatasetSpec {
    /// The CIFAR-10 binary distribution.
    Cifar10 {
        root: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        val_limit: Option<usize>,
        /// Expected sha256 (hex) per file name.
        #[serde(default)]
        checksums: BTreeMap<String, String>,
    },
    /// Gaussian class blobs rendered as images.
    SyntheticBlobs {
        classes: usize,
        /// Training samples; validation gets a fifth of this.
        n: usize,
        #[serde(default = "default_blob_shape")]
        shape: [usize; 3],
        #[serde(default = "default_blob_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_blob_shape() -> [usize; 3] {
    [3, 32, 32]
}

fn default_blob_noise() -> f64 {
    1.0
}

impl DatasetSpec {
    pub fn synthetic(classes: usize, n: usize, shape: [usize; 3], seed: u64) -> Self {
        DatasetSpec::SyntheticBlobs { classes, n, shape, noise: default_blob_noise(), seed }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// A loaded, normalised dataset.
#[derive(Clone, Debug)]
pub struct DatasetHandle<T: Scalar> {
    pub spec: DatasetSpec,
    pub class_count: usize,
    pub image_shape: [usize; 3],
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
    train: Vec<T>,
    train_labels: Vec<usize>,
    val: Vec<T>,
    val_labels: Vec<usize>,
}

impl<T: Scalar> DatasetHandle<T> {
    pub fn train_size(&self) -> usize {
        self.train_labels.len()
    }

    pub fn val_size(&self) -> usize {
        self.val_labels.len()
    }

    pub fn len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_size(),
            Split::Val => self.val_size(),
        }
    }

    pub fn labels(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train_labels,
            Split::Val => &self.val_labels,
        }
    }

    fn pixels(&self, split: Split) -> &[T] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    pub fn sample_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    /// Normalised pixels of one sample, `[C, H, W]`.
    pub fn image(&self, split: Split, index: usize) -> &[T] {
        let s = self.sample_len();
        &self.pixels(split)[index * s..(index + 1) * s]
    }

    /// Gathers `indices` into a channel-major batch without augmentation.
    pub fn batch(&self, split: Split, indices: &[usize]) -> Batch<T> {
        let [c, h, w] = self.image_shape;
        let n = indices.len();
        let plane = h * w;
        let mut data = vec![T::zero(); c * n * plane];
        for (slot, &i) in indices.iter().enumerate() {
            let img = self.image(split, i);
            for ch in 0..c {
                data[(ch * n + slot) * plane..(ch * n + slot + 1) * plane]
                    .copy_from_slice(&img[ch * plane..(ch + 1) * plane]);
            }
        }
        let labels = indices.iter().map(|&i| self.labels(split)[i]).collect();
        Batch { images: Tensor::from_vec(&[c, n, h, w], data), labels }
    }

    /// Training batch with random `padding`-pixel crops and horizontal flips.
    pub fn augmented_batch(&self, indices: &[usize], padding: usize, rng: &mut impl Rng) -> Batch<T> {
        let [c, h, w] = self.image_shape;
        let n = indices.len();
        let plane = h * w;
        let mut data = vec![T::zero(); c * n * plane];
        for (slot, &i) in indices.iter().enumerate() {
            let img = self.image(Split::Train, i);
            let dy = rng.random_range(0..=2 * padding) as isize - padding as isize;
            let dx = rng.random_range(0..=2 * padding) as isize - padding as isize;
            let flip = rng.random_bool(0.5);
            for ch in 0..c {
                let src = &img[ch * plane..(ch + 1) * plane];
                let dst = &mut data[(ch * n + slot) * plane..(ch * n + slot + 1) * plane];
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let xx = if flip { w - 1 - x } else { x };
                        let sx = xx as isize + dx;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dst[y * w + x] = src[sy as usize * w + sx as usize];
                    }
                }
            }
        }
        let labels = indices.iter().map(|&i| self.train_labels[i]).collect();
        Batch { images: Tensor::from_vec(&[c, n, h, w], data), labels }
    }

    /// Contiguous index ranges of `split` in chunks of `size`.
    pub fn chunks(&self, split: Split, size: usize) -> Vec<Vec<usize>> {
        let n = self.len(split);
        (0..n).step_by(size.max(1)).map(|s| (s..(s + size).min(n)).collect()).collect()
    }
}

/// Seeded shuffled minibatches for one epoch. A trailing batch with a single
/// sample is dropped, since batch statistics need at least two.
pub fn epoch_batches(train_size: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..train_size).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).filter(|c| c.len() > 1).map(<[usize]>::to_vec).collect()
}

pub fn load_dataset<T: Scalar>(spec: &DatasetSpec) -> Result<DatasetHandle<T>> {
    let (shape, classes, train, train_labels, val, val_labels) = match spec {
        DatasetSpec::Cifar10 { root, train_limit, val_limit, checksums } => {
            let dir = cifar_dir(root);
            let mut train = Vec::new();
            let mut train_labels = Vec::new();
            for name in CIFAR_TRAIN_FILES {
                read_cifar_file(&dir.join(name), checksums.get(name), &mut train, &mut train_labels)?;
            }
            let mut val = Vec::new();
            let mut val_labels = Vec::new();
            read_cifar_file(&dir.join(CIFAR_TEST_FILE), checksums.get(CIFAR_TEST_FILE), &mut val, &mut val_labels)?;
            truncate(&mut train, &mut train_labels, 3072, *train_limit);
            truncate(&mut val, &mut val_labels, 3072, *val_limit);
            ([3, 32, 32], 10, train, train_labels, val, val_labels)
        }
        DatasetSpec::SyntheticBlobs { classes, n, shape, noise, seed } => {
            if *classes < 2 || *n == 0 || shape.iter().any(|&d| d == 0) {
                return Err(Error::Dataset("synthetic blobs need ≥ 2 classes, n ≥ 1 and a non-empty shape".into()));
            }
            let (train, train_labels, val, val_labels) = synthetic_blobs(*classes, *n, *shape, *noise, *seed);
            (*shape, *classes, train, train_labels, val, val_labels)
        }
    };
    if train_labels.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let (mean, std) = channel_stats(&train, shape);
    let normalise = |raw: Vec<f64>| -> Vec<T> {
        let plane = shape[1] * shape[2];
        raw.iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / plane) % shape[0];
                T::of((v - mean[ch]) / std[ch])
            })
            .collect()
    };
    Ok(DatasetHandle {
        spec: spec.clone(),
        class_count: classes,
        image_shape: shape,
        train: normalise(train),
        train_labels,
        val: normalise(val),
        val_labels,
        channel_mean: mean,
        channel_std: std,
    })
}

/// Accepts either the extracted `cifar-10-batches-bin` directory or its parent.
fn cifar_dir(root: &Path) -> PathBuf {
    let nested = root.join("cifar-10-batches-bin");
    if !root.join(CIFAR_TEST_FILE).exists() && nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

fn read_cifar_file(path: &Path, checksum: Option<&String>, pixels: &mut Vec<f64>, labels: &mut Vec<usize>) -> Result<()> {
    let bytes = fs::read(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let expected = CIFAR_RECORD * CIFAR_PER_FILE;
    if bytes.len() != expected {
        return Err(Error::Dataset(format!(
            "{}: expected {expected} bytes ({CIFAR_PER_FILE} records), found {}",
            path.display(),
            bytes.len()
        )));
    }
    if let Some(want) = checksum {
        let got = hex::encode(Sha256::digest(&bytes));
        if !got.eq_ignore_ascii_case(want) {
            return Err(Error::Dataset(format!("{}: sha256 {got} does not match {want}", path.display())));
        }
    }
    for record in bytes.chunks_exact(CIFAR_RECORD) {
        let label = record[0] as usize;
        if label >= 10 {
            return Err(Error::Dataset(format!("{}: label byte {label} out of range", path.display())));
        }
        labels.push(label);
        pixels.extend(record[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(())
}

fn truncate(pixels: &mut Vec<f64>, labels: &mut Vec<usize>, sample: usize, limit: Option<usize>) {
    if let Some(n) = limit {
        if n < labels.len() {
            labels.truncate(n);
            pixels.truncate(n * sample);
        }
    }
}

fn channel_stats(pixels: &[f64], shape: [usize; 3]) -> (Vec<f64>, Vec<f64>) {
    let plane = shape[1] * shape[2];
    let mut sum = vec![0.0; shape[0]];
    let mut sq = vec![0.0; shape[0]];
    for (i, &v) in pixels.iter().enumerate() {
        let ch = (i / plane) % shape[0];
        sum[ch] += v;
        sq[ch] += v * v;
    }
    let count = (pixels.len() / shape[0]) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| {
            let var = (q / count - m * m).max(0.0);
            if var > 1e-12 { var.sqrt() } else { 1.0 }
        })
        .collect();
    (mean, std)
}

type Blobs = (Vec<f64>, Vec<usize>, Vec<f64>, Vec<usize>);

/// Each class gets a smooth prototype image built from random sinusoids;
/// samples are the prototype at a random amplitude plus pixel noise.
fn synthetic_blobs(classes: usize, n: usize, shape: [usize; 3], noise: f64, seed: u64) -> Blobs {
    let [c, h, w] = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut protos = vec![0.0; classes * c * h * w];
    for k in 0..classes {
        for ch in 0..c {
            for _ in 0..3 {
                let fy = rng.random_range(0.5..2.5) * std::f64::consts::TAU / h as f64;
                let fx = rng.random_range(0.5..2.5) * std::f64::consts::TAU / w as f64;
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                let amp = rng.random_range(0.3..0.7);
                for y in 0..h {
                    for x in 0..w {
                        protos[((k * c + ch) * h + y) * w + x] += amp * (fy * y as f64 + fx * x as f64 + phase).sin();
                    }
                }
            }
        }
    }
    let draw = |count: usize, rng: &mut ChaCha8Rng| {
        let sample = c * h * w;
        let mut pixels = Vec::with_capacity(count * sample);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let k = i % classes;
            let scale = rng.random_range(0.6..1.4);
            let proto = &protos[k * sample..(k + 1) * sample];
            for &p in proto {
                let e: f64 = StandardNormal.sample(rng);
                pixels.push(scale * p + noise * e);
            }
            labels.push(k);
        }
        (pixels, labels)
    };
    let (train, train_labels) = draw(n, &mut rng);
    let (val, val_labels) = draw((n / 5).max(1), &mut rng);
    (train, train_labels, val, val_labels)
}

/// The fixed probe subset used to score pruning candidates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSet {
    /// Sorted training-set indices.
    pub indices: Vec<usize>,
    pub seed: u64,
    pub size: usize,
    pub balanced: bool,
}

/// Draws `size` distinct training indices. Uniform by default; `balanced`
/// cycles through the classes so each is represented as evenly as possible.
pub fn sample_probe<T: Scalar>(data: &DatasetHandle<T>, size: usize, seed: u64, balanced: bool) -> Result<ProbeSet> {
    let n = data.train_size();
    if size == 0 || size > n {
        return Err(Error::Dataset(format!("probe size {size} must lie in 1..={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = if balanced {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.class_count];
        for (i, &l) in data.train_labels.iter().enumerate() {
            by_class[l].push(i);
        }
        for list in &mut by_class {
            list.shuffle(&mut rng);
        }
        let mut picked = Vec::with_capacity(size);
        let mut round = 0;
        while picked.len() < size {
            for list in &by_class {
                if picked.len() < size && round < list.len() {
                    picked.push(list[round]);
                }
            }
            round += 1;
        }
        picked
    } else {
        rand::seq::index::sample(&mut rng, n, size).into_vec()
    };
    indices.sort_unstable();
    Ok(ProbeSet { indices, seed, size, balanced })
}

/// A probe set together with its materialised, un-augmented batch.
#[derive(Clone, Debug)]
pub struct ProbeData<T: Scalar> {
    pub set: ProbeSet,
    pub batch: Batch<T>,
}

impl<T: Scalar> ProbeData<T> {
    pub fn new(data: &DatasetHandle<T>, set: ProbeSet) -> Self {
        let batch = data.batch(Split::Train, &set.indices);
        ProbeData { set, batch }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn blobs() -> DatasetHandle<f32> {
        load_dataset(&DatasetSpec::synthetic(4, 200, [3, 8, 8], 7)).unwrap()
    }

    #[test]
    fn synthetic_is_seeded() {
        let a = blobs();
        let b = blobs();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val_labels, b.val_labels);
        assert_eq!((a.train_size(), a.val_size(), a.class_count), (200, 40, 4));
        let c: DatasetHandle<f32> = load_dataset(&DatasetSpec::synthetic(4, 200, [3, 8, 8], 8)).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn normalised_channels() {
        let d = blobs();
        let plane = 64;
        for ch in 0..3 {
            let vals: Vec<f64> =
                (0..d.train_size()).flat_map(|i| d.image(Split::Train, i)[ch * plane..(ch + 1) * plane].to_vec()).map(f64::from).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batch_layout_is_channel_major() {
        let d = blobs();
        let b = d.batch(Split::Train, &[3, 5]);
        assert_eq!(b.images.shape(), &[3, 2, 8, 8]);
        assert_eq!(&b.images.data()[64..128], &d.image(Split::Train, 5)[..64]);
        assert_eq!(b.labels, vec![3, 1]);
    }

    #[test]
    fn zero_padding_crop_without_flip_is_identity_or_mirror() {
        let d = blobs();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = d.augmented_batch(&[0], 0, &mut rng);
        let img = d.image(Split::Train, 0);
        let first_row: Vec<f32> = b.images.data()[..8].to_vec();
        let mirrored: Vec<f32> = img[..8].iter().rev().copied().collect();
        assert!(first_row == img[..8] || first_row == mirrored);
    }

    #[test]
    fn probe_sampling() {
        let d = blobs();
        let all = sample_probe(&d, 200, 1, false).unwrap();
        assert_eq!(all.indices, (0..200).collect::<Vec<_>>());
        let a = sample_probe(&d, 50, 3, false).unwrap();
        assert_eq!(a, sample_probe(&d, 50, 3, false).unwrap());
        assert_eq!(a.indices.iter().collect::<BTreeSet<_>>().len(), 50);
        assert!(sample_probe(&d, 201, 3, false).is_err());
        let bal = sample_probe(&d, 40, 3, true).unwrap();
        let mut counts = [0; 4];
        for &i in &bal.indices {
            counts[d.labels(Split::Train)[i]] += 1;
        }
        assert_eq!(counts, [10; 4]);
    }

    #[test]
    fn epoch_batches_cover_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = epoch_batches(10, 4, &mut rng);
        assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let seen: BTreeSet<usize> = batches.into_iter().flatten().collect();
        assert_eq!(seen.len(), 10);
        assert_eq!(epoch_batches(9, 4, &mut ChaCha8Rng::seed_from_u64(0)).len(), 2);
    }

    #[test]
    fn missing_and_truncated_cifar() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec::Cifar10 { root: dir.path().into(), train_limit: None, val_limit: None, checksums: BTreeMap::new() };
        let err = load_dataset::<f32>(&spec).unwrap_err().to_string();
        assert!(err.contains("data_batch_1.bin"), "{err}");
        fs::write(dir.path().join("data_batch_1.bin"), vec![0u8; 1000]).unwrap();
        let err = load_dataset::<f32>(&spec).unwrap_err().to_string();
        assert!(err.contains("data_batch_1.bin") && err.contains("expected"), "{err}");
    }
}
