//! In-memory image datasets: procedural desk-scale data and CIFAR binaries.

use std::f64::consts::PI;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    class_labels: Vec<String>,
    split: Split,
}

impl Dataset {
    /// `images` is `[n, c, h, w]`; every label must index `class_labels`.
    pub fn new(images: Tensor, labels: Vec<usize>, class_labels: Vec<String>, split: Split) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Dataset(format!("images must be rank 4, got {:?}", images.shape())));
        }
        if images.dim(0) != labels.len() {
            return Err(Error::Dataset(format!(
                "{} images but {} labels",
                images.dim(0),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_labels.len()) {
            return Err(Error::Dataset(format!(
                "label {l} outside class list of {}",
                class_labels.len()
            )));
        }
        Ok(Self {
            images,
            labels,
            class_labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_labels(&self) -> &[String] {
        &self.class_labels
    }

    pub fn num_classes(&self) -> usize {
        self.class_labels.len()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// `[c, h, w]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        [self.images.dim(1), self.images.dim(2), self.images.dim(3)]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Samples at `indices`, as an image batch and their labels.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.select_batch(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Consecutive batches in stored order.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = (Tensor, Vec<usize>)> + '_ {
        let bs = batch_size.max(1);
        (0..self.len()).step_by(bs).map(move |start| {
            let idx: Vec<usize> = (start..(start + bs).min(self.len())).collect();
            self.gather(&idx)
        })
    }

    /// Keeps only samples whose label is in `classes`; labels stay global.
    pub fn filter_classes(&self, classes: &[usize]) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        let (images, labels) = self.gather(&idx);
        Dataset {
            images,
            labels,
            class_labels: self.class_labels.clone(),
            split: self.split,
        }
    }

    /// Same samples in the order given by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Dataset {
        let (images, labels) = self.gather(perm);
        Dataset {
            images,
            labels,
            class_labels: self.class_labels.clone(),
            split: self.split,
        }
    }

    /// Concatenation with `other` (same shapes and class list).
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.sample_shape() != other.sample_shape() || self.class_labels != other.class_labels {
            return Err(Error::Dataset("cannot concatenate datasets of different shape or classes".into()));
        }
        let mut data = self.images.data().to_vec();
        data.extend_from_slice(other.images.data());
        let mut shape = self.images.shape().to_vec();
        shape[0] += other.len();
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Dataset::new(Tensor::new(shape, data)?, labels, self.class_labels.clone(), self.split)
    }

    pub fn standardize(&mut self, stats: &ChannelStats) {
        let (c, hw) = (self.images.dim(1), self.images.dim(2) * self.images.dim(3));
        for (plane, chunk) in self.images.data_mut().chunks_mut(hw).enumerate() {
            let ch = plane % c;
            let (m, s) = (stats.mean[ch], stats.std[ch]);
            for v in chunk {
                *v = (*v - m) / s;
            }
        }
    }
}

/// Per-channel mean and standard deviation of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn from_dataset(data: &Dataset) -> Self {
        let img = data.images();
        let (c, hw) = (img.dim(1), img.dim(2) * img.dim(3));
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for (plane, chunk) in img.data().chunks(hw).enumerate() {
            let ch = plane % c;
            for &v in chunk {
                sum[ch] += v;
                sq[ch] += v * v;
            }
        }
        let n = (data.len() * hw).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                if var > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }
}

/// Procedural dataset where each class is an (orientation pattern, colour
/// family) pair: class `c` draws grating pattern `c / 2` tinted with colour
/// family `c % 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

const TEST_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Training split of the procedural dataset.
pub fn synth_dataset(spec: SynthSpec) -> Result<Dataset> {
    synth_split(spec, Split::Train)
}

/// Either split; the test split draws from an independent seed stream.
pub fn synth_split(spec: SynthSpec, split: Split) -> Result<Dataset> {
    if spec.classes < 4 || spec.classes % 2 != 0 {
        return Err(Error::Dataset(format!(
            "synthetic class count must be even and at least 4, got {}",
            spec.classes
        )));
    }
    if spec.image_size < 4 {
        return Err(Error::Dataset("synthetic images must be at least 4x4".into()));
    }
    let seed = match split {
        Split::Train => spec.seed,
        Split::Test => spec.seed ^ TEST_SEED_SALT,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = spec.image_size;
    let patterns = spec.classes / 2;
    let unit = Uniform::new(0.0f64, 1.0);
    let mut data = Vec::with_capacity(spec.classes * spec.per_class * 3 * s * s);
    let mut labels = Vec::with_capacity(spec.classes * spec.per_class);
    for _ in 0..spec.per_class {
        for class in 0..spec.classes {
            let pattern = class / 2;
            let warm = class % 2 == 0;
            let theta = PI * pattern as f64 / patterns as f64 + (unit.sample(&mut rng) - 0.5) * 0.2;
            let freq = 2.0 * PI / (s as f64 / 2.5) * (0.9 + 0.2 * unit.sample(&mut rng));
            let phase = 2.0 * PI * unit.sample(&mut rng);
            let jitter = |rng: &mut ChaCha8Rng| (unit.sample(rng) - 0.5) * 0.3;
            let tint = if warm {
                [0.9 + jitter(&mut rng), 0.45 + jitter(&mut rng), 0.15 + jitter(&mut rng)]
            } else {
                [0.15 + jitter(&mut rng), 0.45 + jitter(&mut rng), 0.9 + jitter(&mut rng)]
            };
            let (ct, st) = (theta.cos(), theta.sin());
            for &t in &tint {
                for y in 0..s {
                    for x in 0..s {
                        let u = x as f64 * ct + y as f64 * st;
                        let v = 0.5 + 0.5 * (freq * u + phase).sin();
                        let noise = (unit.sample(&mut rng) - 0.5) * 0.3;
                        data.push(v * t + noise);
                    }
                }
            }
            labels.push(class);
        }
    }
    let n = labels.len();
    let class_labels = (0..spec.classes)
        .map(|c| format!("{}-{}", if c % 2 == 0 { "warm" } else { "cool" }, c / 2))
        .collect();
    Dataset::new(Tensor::new(vec![n, 3, s, s], data)?, labels, class_labels, split)
}

pub const CIFAR_RECORD: usize = 3073;

pub const CIFAR10_LABELS: [&str; 10] = [
    "airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck",
];

/// Parses CIFAR-10 style binary records: one label byte followed by 3072
/// pixel bytes (red plane, green plane, blue plane, each 32x32 row-major).
/// Pixels are scaled to `[0, 1]`.
pub fn parse_cifar_binary(bytes: &[u8], class_labels: Vec<String>, split: Split) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::CifarSize {
            size: bytes.len(),
            offset: bytes.len() / CIFAR_RECORD * CIFAR_RECORD,
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut data = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= class_labels.len() {
            return Err(Error::Dataset(format!(
                "record {i} (byte offset {}) has label {label}, class list has {}",
                i * CIFAR_RECORD,
                class_labels.len()
            )));
        }
        labels.push(label);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], data)?, labels, class_labels, split)
}

pub fn load_cifar_binary(path: &Path, class_labels: Option<Vec<String>>, split: Split) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let labels = class_labels.unwrap_or_else(|| CIFAR10_LABELS.iter().map(|s| s.to_string()).collect());
    parse_cifar_binary(&bytes, labels, split)
}
