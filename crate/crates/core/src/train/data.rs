//! In-memory image datasets: the CIFAR binary format and a synthetic
//! locality task.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::FeatureMap;

const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarKind {
    Cifar10,
    Cifar100,
}

impl CifarKind {
    pub fn record_len(self) -> usize {
        match self {
            CifarKind::Cifar10 => 1 + CIFAR_PIXELS,
            CifarKind::Cifar100 => 2 + CIFAR_PIXELS,
        }
    }

    pub fn class_count(self) -> usize {
        match self {
            CifarKind::Cifar10 => 10,
            CifarKind::Cifar100 => 100,
        }
    }

    /// Training and test file names inside the extracted archive directory.
    pub fn files(self) -> (Vec<&'static str>, &'static str) {
        match self {
            CifarKind::Cifar10 => (
                vec![
                    "data_batch_1.bin",
                    "data_batch_2.bin",
                    "data_batch_3.bin",
                    "data_batch_4.bin",
                    "data_batch_5.bin",
                ],
                "test_batch.bin",
            ),
            CifarKind::Cifar100 => (vec!["train.bin"], "test.bin"),
        }
    }
}

/// Where the images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        seed: u64,
    },
    /// `dir` holds the extracted binary archive; relative paths resolve
    /// against the data root.
    Cifar {
        variant: CifarKind,
        dir: PathBuf,
    },
}

/// What to load and at which size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub class_count: usize,
    /// Delivered image side. CIFAR images are upscaled by nearest neighbour
    /// when this exceeds 32.
    pub side: usize,
    /// For CIFAR, the leading records kept from each split.
    pub train_size: usize,
    pub val_size: usize,
}

/// Images stored as `(side * side, channels)` row-major blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pixels: Vec<f32>,
    labels: Vec<usize>,
    side: usize,
    channels: usize,
    class_count: usize,
}

impl Dataset {
    pub fn new(pixels: Vec<f32>, labels: Vec<usize>, side: usize, channels: usize, class_count: usize) -> Result<Self> {
        if pixels.len() != labels.len() * side * side * channels {
            return Err(Error::Dataset(format!(
                "{} pixels for {} images of {side}x{side}x{channels}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Dataset(format!("label {l} out of range for {class_count} classes")));
        }
        Ok(Self { pixels, labels, side, channels, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    fn image_len(&self) -> usize {
        self.side * self.side * self.channels
    }

    pub fn pixels(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn image(&self, i: usize) -> FeatureMap<f32> {
        let data = Array2::from_shape_vec((self.side * self.side, self.channels), self.pixels(i).to_vec())
            .expect("image block shape");
        FeatureMap { data, height: self.side, width: self.side }
    }

    /// The first `n` images.
    pub fn truncate(mut self, n: usize) -> Self {
        let n = n.min(self.len());
        self.pixels.truncate(n * self.image_len());
        self.labels.truncate(n);
        self
    }

    /// FNV-1a over labels and pixel bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for &l in &self.labels {
            eat(&(l as u64).to_le_bytes());
        }
        for &p in &self.pixels {
            eat(&p.to_bits().to_le_bytes());
        }
        h
    }

    /// Nearest-neighbour upscaling by an integer factor.
    pub fn upscale(&self, side: usize) -> Result<Self> {
        if side < self.side || !side.is_multiple_of(self.side) {
            return Err(Error::Dataset(format!(
                "cannot upscale {} to {side}: not an integer multiple",
                self.side
            )));
        }
        let f = side / self.side;
        let c = self.channels;
        let mut pixels = Vec::with_capacity(self.len() * side * side * c);
        for i in 0..self.len() {
            let src = self.pixels(i);
            for y in 0..side {
                for x in 0..side {
                    let at = ((y / f) * self.side + x / f) * c;
                    pixels.extend_from_slice(&src[at..at + c]);
                }
            }
        }
        Dataset::new(pixels, self.labels.clone(), side, c, self.class_count)
    }

    pub fn channel_stats(&self) -> ChannelStats {
        let c = self.channels;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for px in self.pixels.chunks_exact(c) {
            for (k, &v) in px.iter().enumerate() {
                sum[k] += f64::from(v);
                sq[k] += f64::from(v) * f64::from(v);
            }
        }
        let n = (self.pixels.len() / c.max(1)) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-12))
            .collect();
        ChannelStats { mean, std }
    }

    pub fn normalize(&mut self, stats: &ChannelStats) {
        let c = self.channels;
        for px in self.pixels.chunks_exact_mut(c) {
            for (k, v) in px.iter_mut().enumerate() {
                *v = ((f64::from(*v) - stats.mean[k]) / stats.std[k]) as f32;
            }
        }
    }
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Parses one CIFAR binary file into `[0, 1]` pixels. For CIFAR-100 the fine
/// label is used.
pub fn load_cifar_binary(path: impl AsRef<Path>, kind: CifarKind) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let rec = kind.record_len();
    if bytes.is_empty() || bytes.len() % rec != 0 {
        return Err(Error::Dataset(format!(
            "{}: {} bytes is not a whole number of {rec}-byte records",
            path.display(),
            bytes.len()
        )));
    }
    let count = bytes.len() / rec;
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut pixels = Vec::with_capacity(count * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(count);
    for r in bytes.chunks_exact(rec) {
        let (label, img) = match kind {
            CifarKind::Cifar10 => (r[0], &r[1..]),
            CifarKind::Cifar100 => (r[1], &r[2..]),
        };
        labels.push(usize::from(label));
        for p in 0..plane {
            for ch in 0..3 {
                pixels.push(f32::from(img[ch * plane + p]) / 255.0);
            }
        }
    }
    Dataset::new(pixels, labels, CIFAR_SIDE, 3, kind.class_count())
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let first = parts.first().ok_or_else(|| Error::Dataset("no files".into()))?;
    let (side, channels, classes) = (first.side, first.channels, first.class_count);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        pixels.extend(p.pixels);
        labels.extend(p.labels);
    }
    Dataset::new(pixels, labels, side, channels, classes)
}

/// Train and test splits of an extracted CIFAR archive, both normalized with
/// the training split's channel statistics and upscaled to `side`.
pub fn load_cifar(dir: impl AsRef<Path>, kind: CifarKind, side: usize, train_size: usize, val_size: usize) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let (train_files, test_file) = kind.files();
    let train = train_files
        .iter()
        .map(|f| load_cifar_binary(dir.join(f), kind))
        .collect::<Result<Vec<_>>>()?;
    let mut train = concat(train)?.truncate(train_size);
    let mut val = load_cifar_binary(dir.join(test_file), kind)?.truncate(val_size);
    let stats = train.channel_stats();
    train.normalize(&stats);
    val.normalize(&stats);
    if side != CIFAR_SIDE {
        train = train.upscale(side)?;
        val = val.upscale(side)?;
    }
    Ok((train, val))
}

pub const STAMP: usize = 3;
const STAMP_LOW: f32 = 0.5;
const STAMP_HIGH: f32 = 1.0;
const NOISE_MAX: f32 = 0.25;
/// Stamp corners lie on this pixel lattice (the stage-one patch stride).
pub const STAMP_ALIGN: usize = 4;
const PATTERNS: usize = 1 << (STAMP * STAMP);

/// The 3x3 stamp of `class`: cell `b` is bright when bit `b` of
/// `(37 * class + 11) mod 512` is set. Odd multipliers permute `0..512`, so
/// classes get distinct stamps.
pub fn stamp_code(class: usize) -> usize {
    (37 * class + 11) % PATTERNS
}

/// Inverse of [`stamp_code`] (`37 * 429 = 1 mod 512`).
pub fn class_of_code(code: usize) -> usize {
    ((code + PATTERNS - 11) * 429) % PATTERNS
}

/// `count` images of `side x side x 3` noise in `[0, 0.25]`, each carrying its
/// class stamp (cells `0.5` or `1.0`, same in every channel) at a random
/// position on the [`STAMP_ALIGN`] lattice. Labels are balanced and shuffled.
pub fn synthetic_locality_dataset(seed: u64, count: usize, side: usize, class_count: usize) -> Result<Dataset> {
    if side < STAMP {
        return Err(Error::Dataset(format!("side {side} is smaller than the {STAMP}x{STAMP} stamp")));
    }
    if !(2..=PATTERNS).contains(&class_count) {
        return Err(Error::Dataset(format!("class_count must be in 2..={PATTERNS}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..count).map(|i| i % class_count).collect();
    labels.shuffle(&mut rng);
    let c = 3;
    let mut pixels = Vec::with_capacity(count * side * side * c);
    for &label in &labels {
        let start = pixels.len();
        pixels.extend((0..side * side * c).map(|_| rng.random_range(0.0..=NOISE_MAX)));
        let img = &mut pixels[start..];
        let cells = (side - STAMP) / STAMP_ALIGN + 1;
        let y0 = STAMP_ALIGN * rng.random_range(0..cells);
        let x0 = STAMP_ALIGN * rng.random_range(0..cells);
        let code = stamp_code(label);
        for b in 0..STAMP * STAMP {
            let v = if code >> b & 1 == 1 { STAMP_HIGH } else { STAMP_LOW };
            let at = ((y0 + b / STAMP) * side + x0 + b % STAMP) * c;
            img[at..at + c].fill(v);
        }
    }
    Dataset::new(pixels, labels, side, c, class_count)
}

/// Materializes `spec` as `(train, val)`, both normalized with the training
/// split's channel statistics. Relative CIFAR paths resolve against
/// `data_root`.
pub fn load_dataset(spec: &DatasetSpec, data_root: Option<&Path>) -> Result<(Dataset, Dataset)> {
    if spec.side == 0 || !spec.side.is_multiple_of(32) {
        return Err(Error::Dataset(format!("image side {} must be a multiple of 32", spec.side)));
    }
    match &spec.source {
        DataSource::Synthetic { seed } => {
            let all = synthetic_locality_dataset(*seed, spec.train_size + spec.val_size, spec.side, spec.class_count)?;
            let c = all.image_len();
            let (tp, vp) = all.pixels.split_at(spec.train_size * c);
            let (tl, vl) = all.labels.split_at(spec.train_size);
            let mut train = Dataset::new(tp.to_vec(), tl.to_vec(), spec.side, 3, spec.class_count)?;
            let mut val = Dataset::new(vp.to_vec(), vl.to_vec(), spec.side, 3, spec.class_count)?;
            let stats = train.channel_stats();
            train.normalize(&stats);
            val.normalize(&stats);
            Ok((train, val))
        }
        DataSource::Cifar { variant, dir } => {
            if spec.class_count != variant.class_count() {
                return Err(Error::Dataset(format!(
                    "class_count {} does not match {variant:?}",
                    spec.class_count
                )));
            }
            let dir = match data_root {
                Some(root) if dir.is_relative() => root.join(dir),
                _ => dir.clone(),
            };
            load_cifar(dir, *variant, spec.side, spec.train_size, spec.val_size)
        }
    }
}
