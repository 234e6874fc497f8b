//! CIFAR-10/100 binary files, normalization and mini-batch ordering.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Error, Result};
use crate::image::{Image, IMAGE_BYTES, PLANE};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Cifar10,
    Cifar100,
}

impl DatasetKind {
    pub fn classes(self) -> usize {
        match self {
            DatasetKind::Cifar10 => 10,
            DatasetKind::Cifar100 => 100,
        }
    }

    pub fn record_len(self) -> usize {
        match self {
            DatasetKind::Cifar10 => IMAGE_BYTES + 1,
            DatasetKind::Cifar100 => IMAGE_BYTES + 2,
        }
    }

    pub fn files(self, split: Split) -> Vec<&'static str> {
        match (self, split) {
            (DatasetKind::Cifar10, Split::Train) => {
                vec!["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"]
            }
            (DatasetKind::Cifar10, Split::Test) => vec!["test_batch.bin"],
            (DatasetKind::Cifar100, Split::Train) => vec!["train.bin"],
            (DatasetKind::Cifar100, Split::Test) => vec!["test.bin"],
        }
    }

    pub fn normalization(self) -> Normalization {
        match self {
            DatasetKind::Cifar10 => Normalization { mean: [0.4914, 0.4822, 0.4465], std: [0.2470, 0.2435, 0.2616] },
            DatasetKind::Cifar100 => Normalization { mean: [0.5071, 0.4865, 0.4409], std: [0.2673, 0.2564, 0.2762] },
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10" => Ok(DatasetKind::Cifar10),
            "cifar100" => Ok(DatasetKind::Cifar100),
            _ => Err(Error::Config(format!("unknown dataset '{s}', expected cifar10 or cifar100"))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Cifar100 => "cifar100",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub label: u8,
    pub coarse_label: Option<u8>,
    pub image: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Source format; also selects the normalization statistics.
    pub kind: DatasetKind,
    pub split: Split,
    pub classes: usize,
    pub records: Vec<Record>,
}

/// Parses a whole CIFAR binary file.
pub fn parse_records(bytes: &[u8], kind: DatasetKind) -> Result<Vec<Record>> {
    let len = kind.record_len();
    if !bytes.len().is_multiple_of(len) {
        bail!(Format, "{} bytes is not a multiple of the {}-byte record length", bytes.len(), len);
    }
    bytes
        .chunks_exact(len)
        .enumerate()
        .map(|(i, chunk)| {
            let (label, coarse_label, pixels) = match kind {
                DatasetKind::Cifar10 => (chunk[0], None, &chunk[1..]),
                DatasetKind::Cifar100 => {
                    if chunk[0] >= 20 {
                        bail!(Format, "record {}: coarse label {} out of range", i, chunk[0]);
                    }
                    (chunk[1], Some(chunk[0]), &chunk[2..])
                }
            };
            if label as usize >= kind.classes() {
                bail!(Format, "record {}: label {} out of range for {}", i, label, kind);
            }
            Ok(Record { label, coarse_label, image: Image::from_bytes(pixels)? })
        })
        .collect()
}

/// Inverse of [`parse_records`].
pub fn serialize_records(records: &[Record], kind: DatasetKind) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * kind.record_len());
    for r in records {
        if kind == DatasetKind::Cifar100 {
            out.push(r.coarse_label.unwrap_or(0));
        }
        out.push(r.label);
        out.extend_from_slice(r.image.bytes());
    }
    out
}

pub fn load_cifar(dir: impl AsRef<Path>, kind: DatasetKind, split: Split) -> Result<Dataset> {
    let mut records = Vec::new();
    for name in kind.files(split) {
        let path: PathBuf = dir.as_ref().join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        records.extend(parse_records(&bytes, kind).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })?);
    }
    Ok(Dataset { kind, split, classes: kind.classes(), records })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// The first `per_class` records of each class, in file order.
    pub fn subset_per_class(&self, per_class: usize) -> Dataset {
        let mut seen = vec![0usize; self.classes];
        let records = self
            .records
            .iter()
            .filter(|r| {
                let n = &mut seen[r.label as usize];
                *n += 1;
                *n <= per_class
            })
            .cloned()
            .collect();
        Dataset { records, ..self.clone_empty() }
    }

    fn clone_empty(&self) -> Dataset {
        Dataset { kind: self.kind, split: self.split, classes: self.classes, records: Vec::new() }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label as usize).collect()
    }
}

/// A linearly separable two-class set: class 0 images are bright in the red
/// plane and dark elsewhere, class 1 the reverse, with ±20 of pixel noise.
pub fn synthetic_two_class(n: usize, seed: u64) -> Dataset {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let mut image = Image::zeros();
            for (j, b) in image.bytes_mut().iter_mut().enumerate() {
                let base: i32 = if (j / PLANE == 0) == (label == 0) { 200 } else { 50 };
                *b = (base + rng.gen_range(-20..=20)) as u8;
            }
            Record { label, coarse_label: None, image }
        })
        .collect();
    Dataset { kind: DatasetKind::Cifar10, split: Split::Train, classes: 2, records }
}

/// Per-channel `(x/255 − mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub fn new(mean: [f64; 3], std: [f64; 3]) -> Result<Self> {
        if std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            bail!(Config, "normalization std must be positive, got {:?}", std);
        }
        Ok(Self { mean, std })
    }

    /// Channel statistics of `images` on the `[0, 1]` scale.
    pub fn fit(images: &[Image]) -> Result<Self> {
        if images.is_empty() {
            bail!(Data, "cannot fit normalization to an empty image set");
        }
        let n = (images.len() * PLANE) as f64;
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for ch in 0..3 {
            let px = || images.iter().flat_map(move |img| img.bytes()[ch * PLANE..(ch + 1) * PLANE].iter().map(|&b| b as f64 / 255.0));
            mean[ch] = px().sum::<f64>() / n;
            std[ch] = (px().map(|v| (v - mean[ch]).powi(2)).sum::<f64>() / n).sqrt();
        }
        Ok(Self { mean, std })
    }

    pub fn apply<T: Element>(&self, image: &Image) -> Vec<T> {
        let mut out = Vec::with_capacity(IMAGE_BYTES);
        self.apply_into(image, &mut out);
        out
    }

    fn apply_into<T: Element>(&self, image: &Image, out: &mut Vec<T>) {
        for (i, &b) in image.bytes().iter().enumerate() {
            let ch = i / PLANE;
            out.push(T::from_f64((b as f64 / 255.0 - self.mean[ch]) / self.std[ch]));
        }
    }

    /// Inverse of [`Normalization::apply`], on the `[0, 1]` scale.
    pub fn invert<T: Element>(&self, values: &[T]) -> Vec<f64> {
        values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let ch = (i / PLANE) % 3;
                v.as_f64() * self.std[ch] + self.mean[ch]
            })
            .collect()
    }

    /// Stacks normalized images into `[N, 3, 32, 32]`.
    pub fn batch<'a, T: Element>(&self, images: impl IntoIterator<Item = &'a Image>) -> Result<Tensor<T>> {
        let mut data = Vec::new();
        let mut n = 0;
        for img in images {
            self.apply_into(img, &mut data);
            n += 1;
        }
        Tensor::from_vec(&[n, 3, 32, 32], data)
    }
}

/// Splits `0..len` into batches of `batch_size`, keeping a short final batch.
/// With `shuffle` the order is a seeded Fisher–Yates permutation.
pub fn make_batches(len: usize, batch_size: usize, shuffle: bool, seed: u64) -> Result<Vec<Vec<usize>>> {
    if len == 0 {
        bail!(Data, "cannot batch an empty dataset");
    }
    if batch_size == 0 {
        bail!(Config, "batch size must be at least 1");
    }
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
