//! Datasets: CIFAR-10 binary batches, IDX files, synthetic blobs, batching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::network::Sample;
use crate::tensor::Tensor;

pub const CIFAR_RECORD: usize = 3073;
const CIFAR_PIXELS: usize = 1024;

/// Labelled examples. Each input is a tensor of the feature shape; images
/// are `[C, H*W]` feature maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<Tensor>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("dataset must not be empty".into()));
        }
        if inputs.len() != labels.len() {
            return Err(Error::InvalidArgument(format!("{} inputs but {} labels", inputs.len(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} not below class count {classes}")));
        }
        let shape = inputs[0].extents();
        if inputs.iter().any(|x| x.extents() != shape) {
            return Err(Error::InvalidArgument("inputs of differing shapes".into()));
        }
        Ok(Dataset { inputs, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn feature_extents(&self) -> &[usize] {
        self.inputs[0].extents()
    }

    fn one_hot(&self, label: usize) -> Tensor {
        let mut y = vec![0.0; self.classes];
        y[label] = 1.0;
        Tensor::vector(y).expect("finite")
    }

    /// Sample `i` with a one-hot target.
    pub fn sample(&self, i: usize) -> Sample {
        Sample { x: self.inputs[i].clone(), y: self.one_hot(self.labels[i]) }
    }

    pub fn samples(&self, idx: &[usize]) -> Vec<Sample> {
        idx.iter().map(|&i| self.sample(i)).collect()
    }

    pub fn all_samples(&self) -> Vec<Sample> {
        (0..self.len()).map(|i| self.sample(i)).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        Dataset::new(
            idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.classes,
        )
    }
}

/// Reads a CIFAR-10 binary batch. With `class_filter`, only those labels
/// are kept and relabelled by their position in the sorted filter;
/// `max_records` then caps the number kept.
pub fn load_cifar10_binary(path: &Path, max_records: Option<usize>, class_filter: Option<&[u8]>) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    parse_cifar10(&bytes, max_records, class_filter)
}

pub fn parse_cifar10(bytes: &[u8], max_records: Option<usize>, class_filter: Option<&[u8]>) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format(format!(
            "CIFAR-10 data of {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let mut filter: Option<Vec<u8>> = class_filter.map(|f| f.to_vec());
    if let Some(f) = &mut filter {
        f.sort_unstable();
        f.dedup();
        if f.is_empty() || f.iter().any(|&c| c > 9) {
            return Err(Error::InvalidArgument(format!("class filter {f:?} must name classes 0..=9")));
        }
    }
    let limit = max_records.unwrap_or(usize::MAX);
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0];
        if label > 9 {
            return Err(Error::Format(format!("record {r}: label byte {label} > 9")));
        }
        let mapped = match &filter {
            Some(f) => match f.iter().position(|&c| c == label) {
                Some(p) => p,
                None => continue,
            },
            None => label as usize,
        };
        if inputs.len() == limit {
            break;
        }
        // planes R, G, B of 1024 row-major pixels -> [3, 1024] feature map
        let px = &rec[1..];
        let mut data = vec![0.0; 3 * CIFAR_PIXELS];
        for c in 0..3 {
            for p in 0..CIFAR_PIXELS {
                data[c + 3 * p] = px[c * CIFAR_PIXELS + p] as f64 / 255.0;
            }
        }
        inputs.push(Tensor::new(&[3, CIFAR_PIXELS], data)?);
        labels.push(mapped);
    }
    let classes = filter.map_or(10, |f| f.len());
    if inputs.is_empty() {
        return Err(Error::Format("no CIFAR-10 records kept".into()));
    }
    Dataset::new(inputs, labels, classes)
}

/// Writes `ds` as CIFAR-10 records; pixels are quantized to bytes.
pub fn write_cifar10_binary(path: &Path, ds: &Dataset) -> Result<()> {
    std::fs::write(path, encode_cifar10(ds)?)?;
    Ok(())
}

pub fn encode_cifar10(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.feature_extents() != [3, CIFAR_PIXELS] {
        return Err(Error::InvalidArgument(format!("CIFAR-10 records hold [3, 1024] inputs, not {:?}", ds.feature_extents())));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for (x, &l) in ds.inputs.iter().zip(&ds.labels) {
        if l > 9 {
            return Err(Error::InvalidArgument(format!("label {l} does not fit a CIFAR-10 record")));
        }
        out.push(l as u8);
        for c in 0..3 {
            for p in 0..CIFAR_PIXELS {
                out.push((x.data()[c + 3 * p] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(out)
}

/// Reads an unsigned-byte IDX file (`0x00000801` or `0x00000803`). Bytes
/// of rank-3 image files are scaled to `[0, 1]`; label files keep their
/// values. The result has the file's extents in column-major storage.
pub fn load_idx(path: &Path) -> Result<Tensor> {
    parse_idx(&std::fs::read(path)?)
}

pub fn parse_idx(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 4 {
        return Err(Error::Format("IDX file shorter than its magic number".into()));
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let rank = match magic {
        0x0000_0801 => 1,
        0x0000_0803 => 3,
        _ => return Err(Error::Format(format!("bad IDX magic 0x{magic:08x}"))),
    };
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Format("IDX header truncated".into()));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let n: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != n {
        return Err(Error::Format(format!("IDX payload of {} bytes, dimensions {dims:?} need {n}", payload.len())));
    }
    let scale = if rank == 3 { 1.0 / 255.0 } else { 1.0 };
    // row-major payload to column-major storage
    let mut data = vec![0.0; n];
    let mut idx = vec![0usize; rank];
    for &b in payload {
        let mut off = 0;
        let mut stride = 1;
        for (i, d) in idx.iter().zip(&dims) {
            off += i * stride;
            stride *= d;
        }
        data[off] = b as f64 * scale;
        for k in (0..rank).rev() {
            idx[k] += 1;
            if idx[k] < dims[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    Tensor::new(&dims, data)
}

/// Pairs an IDX image tensor `[N, H, W]` with an IDX label vector.
/// Images become `[1, H*W]` feature maps in raster order.
pub fn idx_dataset(images: &Tensor, labels: &Tensor) -> Result<Dataset> {
    let &[n, h, w] = images.extents() else {
        return Err(Error::Rank { context: "idx images", expected: 3, found: images.rank() });
    };
    if labels.rank() != 1 || labels.len() != n {
        return Err(Error::ShapeMismatch { context: "idx labels", expected: vec![n], found: labels.extents().to_vec() });
    }
    let inputs = (0..n)
        .map(|i| {
            let mut d = vec![0.0; h * w];
            for r in 0..h {
                for c in 0..w {
                    d[r * w + c] = images.data()[i + n * (r + h * c)];
                }
            }
            Tensor::new(&[1, h * w], d)
        })
        .collect::<Result<Vec<_>>>()?;
    let ls: Vec<usize> = labels.data().iter().map(|&v| v as usize).collect();
    let classes = ls.iter().max().map_or(1, |m| m + 1);
    Dataset::new(inputs, ls, classes)
}

/// `c` Gaussian blobs in `d` dimensions with unit spacing between
/// consecutive means and noise standard deviation 0.5; sample `i` has
/// label `i % c`.
pub fn synthetic_classification(seed: u64, n: usize, d: usize, c: usize) -> Result<Dataset> {
    synthetic_classification_with(seed, n, d, c, 1.0, 0.5)
}

/// As [`synthetic_classification`] with explicit mean spacing and noise.
/// Class `k` has mean `k * spacing / sqrt(d)` in every coordinate.
pub fn synthetic_classification_with(seed: u64, n: usize, d: usize, c: usize, spacing: f64, noise_std: f64) -> Result<Dataset> {
    if c < 2 {
        return Err(Error::InvalidArgument("synthetic data needs at least two classes".into()));
    }
    if n == 0 || d == 0 {
        return Err(Error::InvalidArgument("synthetic data needs n, d >= 1".into()));
    }
    let normal = Normal::new(0.0, noise_std).map_err(|e| Error::InvalidArgument(format!("noise: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = spacing / (d as f64).sqrt();
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % c;
        let x = (0..d).map(|_| k as f64 * step + normal.sample(&mut rng)).collect();
        inputs.push(Tensor::vector(x)?);
        labels.push(k);
    }
    Dataset::new(inputs, labels, c)
}

/// One epoch of batches: a partition of `0..n`, shuffled by `seed` when
/// `shuffle`, with a short final batch.
pub fn batch_iterator(n: usize, batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::InvalidArgument(format!("batch size {batch_size} outside 1..={n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Endless batches over successive epochs, each reshuffled from the
/// sampler seed and the epoch number.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n: usize,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
    epoch: u64,
    pending: std::collections::VecDeque<Vec<usize>>,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64, shuffle: bool) -> Result<Self> {
        batch_iterator(n, batch_size, seed, shuffle)?;
        Ok(BatchSampler { n, batch_size, seed, shuffle, epoch: 0, pending: Default::default() })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pending.is_empty() {
            let seed = self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(self.epoch);
            self.pending = batch_iterator(self.n, self.batch_size, seed, self.shuffle).expect("validated").into();
            self.epoch += 1;
        }
        self.pending.pop_front().expect("non-empty epoch")
    }
}

/// Per-channel mean and standard deviation; channel of entry `k` of an
/// input with `C` rows is `k % C` (rows of a feature map, entries of a vector).
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(ds: &Dataset) -> Standardizer {
        let c = ds.inputs[0].rows();
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut count = vec![0usize; c];
        for x in &ds.inputs {
            for (k, v) in x.data().iter().enumerate() {
                sum[k % c] += v;
                sq[k % c] += v * v;
                count[k % c] += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&count)
            .zip(&mean)
            .map(|((q, &n), m)| {
                let var = (q / n as f64 - m * m).max(0.0);
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        let c = self.mean.len();
        let inputs = ds
            .inputs
            .iter()
            .map(|x| {
                if x.rows() != c {
                    return Err(Error::ShapeMismatch {
                        context: "standardization",
                        expected: vec![c],
                        found: x.extents().to_vec(),
                    });
                }
                let d = x.data().iter().enumerate().map(|(k, v)| (v - self.mean[k % c]) / self.std[k % c]).collect();
                Tensor::new(x.extents(), d)
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(inputs, ds.labels.clone(), ds.classes)
    }
}

/// A seeded subset of `size` distinct indices of `0..n`, ascending.
pub fn eval_subset(n: usize, size: usize, seed: u64) -> Vec<usize> {
    let size = size.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, size).into_vec();
    idx.sort_unstable();
    idx
}
