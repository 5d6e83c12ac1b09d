//! Datasets and device partitioning.
//!
//! MNIST is read from big-endian IDX files. A synthetic class-template set
//! serves tests that should not depend on files. Partitioners are seeded and
//! return every sample to exactly one device.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, Normal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Images `[M, C, H, W]` in `[0, 1]` with one class id per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[0] == 0 {
            return Err(Error::Shape(format!("dataset images must be [M>0,C,H,W], got {s:?}")));
        }
        if labels.len() != s[0] {
            return Err(Error::Shape(format!("{} images but {} labels", s[0], labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Index { index: bad, len: num_classes });
        }
        Ok(Self { images, labels, num_classes })
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

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_dims(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Gathers the given samples into a batch tensor and label list.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per: usize = self.sample_dims().iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index { index: i, len: self.len() });
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.sample_dims();
        Ok((Tensor::new(vec![indices.len(), c, h, w], data)?, labels))
    }

    /// New dataset holding `indices` in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::arg("subset must be non-empty"));
        }
        let (images, labels) = self.batch(indices)?;
        Dataset::new(images, labels, self.num_classes)
    }

    /// Seeded shuffle, then the first `train` samples and the next `test`.
    pub fn split_train_test(&self, train: usize, test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        if train == 0 || test == 0 || train + test > self.len() {
            return Err(Error::arg(format!(
                "cannot carve {train} train + {test} test from {} samples",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng::stream(seed, rng::streams::SUBSET));
        Ok((self.subset(&order[..train])?, self.subset(&order[train..train + test])?))
    }

    pub fn class_counts(&self, indices: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &i in indices {
            counts[self.labels[i]] += 1;
        }
        counts
    }
}

pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    parse_mnist_idx(&images, &labels)
}

/// Parses IDX image (`0x803`, `[M, H, W]` u8) and label (`0x801`, `[M]` u8)
/// buffers. Pixels map to `byte / 255`.
pub fn parse_mnist_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let img = IdxReader::new(images, "image");
    let lab = IdxReader::new(labels, "label");
    img.expect_magic(IMAGE_MAGIC)?;
    lab.expect_magic(LABEL_MAGIC)?;
    let (m, h, w) = (img.u32_at(4)? as usize, img.u32_at(8)? as usize, img.u32_at(12)? as usize);
    let n = lab.u32_at(4)? as usize;
    if m != n {
        return Err(Error::format(4, format!("{m} images but {n} labels")));
    }
    if m == 0 || h == 0 || w == 0 {
        return Err(Error::format(4, "empty IDX dimensions"));
    }
    let pixels = img.body(16, m.checked_mul(h * w).ok_or_else(|| Error::format(4, "dims overflow"))?)?;
    let classes = lab.body(8, n)?;
    let data = pixels.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = classes.iter().map(|&b| b as usize).collect();
    if let Some(pos) = labels.iter().position(|&l| l >= 10) {
        return Err(Error::format(8 + pos, format!("label {} outside 0..10", labels[pos])));
    }
    Dataset::new(Tensor::new(vec![m, 1, h, w], data)?, labels, 10)
}

struct IdxReader<'a> {
    bytes: &'a [u8],
    what: &'static str,
}

impl<'a> IdxReader<'a> {
    fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, what }
    }

    fn u32_at(&self, offset: usize) -> Result<u32> {
        self.bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| Error::format(self.bytes.len(), format!("truncated {} header", self.what)))
    }

    fn expect_magic(&self, magic: u32) -> Result<()> {
        let got = self.u32_at(0)?;
        if got != magic {
            return Err(Error::format(0, format!("{} magic {got:#010x}, expected {magic:#010x}", self.what)));
        }
        Ok(())
    }

    fn body(&self, start: usize, len: usize) -> Result<&'a [u8]> {
        let end = start + len;
        if self.bytes.len() < end {
            return Err(Error::format(self.bytes.len(), format!("{} data truncated: need {end} bytes", self.what)));
        }
        if self.bytes.len() > end {
            return Err(Error::format(end, format!("{} file has trailing bytes", self.what)));
        }
        Ok(&self.bytes[start..end])
    }
}

/// Class-conditional Gaussian images around fixed binary templates, clamped
/// to `[0, 1]`. Templates depend only on the class count and image side;
/// noise depends on `seed`. Sample `i` has class `i mod num_classes`.
pub fn synth_blobs(num_classes: usize, per_class: usize, noise_sigma: f64, side: usize, seed: u64) -> Result<Dataset> {
    if num_classes == 0 || per_class == 0 || side == 0 {
        return Err(Error::arg("synthetic dataset sizes must be positive"));
    }
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::arg(format!("noise sigma {noise_sigma}: {e}")))?;
    let plane = side * side;
    let mut trng = rng::stream(num_classes as u64 ^ ((side as u64) << 32), rng::streams::SYNTH);
    let templates: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let mut t: Vec<f64> = (0..plane).map(|i| if i < plane * 3 / 10 { 1.0 } else { 0.0 }).collect();
            t.shuffle(&mut trng);
            t
        })
        .collect();
    let mut nrng = rng::stream(seed, rng::streams::SYNTH);
    let m = num_classes * per_class;
    let mut data = Vec::with_capacity(m * plane);
    let mut labels = Vec::with_capacity(m);
    for i in 0..m {
        let c = i % num_classes;
        data.extend(templates[c].iter().map(|&t| (t + noise.sample(&mut nrng)).clamp(0.0, 1.0)));
        labels.push(c);
    }
    Dataset::new(Tensor::new(vec![m, 1, side, side], data)?, labels, num_classes)
}

/// Per-device lists of dataset indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
}

impl Partition {
    pub fn sizes(&self) -> Vec<usize> {
        self.shards.iter().map(Vec::len).collect()
    }

    /// Checks that shards are non-empty, disjoint and within `[0, m)`.
    pub fn validate(&self, m: usize) -> Result<()> {
        let mut seen = vec![false; m];
        for (d, shard) in self.shards.iter().enumerate() {
            if shard.is_empty() {
                return Err(Error::State(format!("device {d} has an empty shard")));
            }
            for &i in shard {
                let slot = seen.get_mut(i).ok_or(Error::Index { index: i, len: m })?;
                if *slot {
                    return Err(Error::State(format!("index {i} assigned twice")));
                }
                *slot = true;
            }
        }
        Ok(())
    }
}

fn check_devices(m: usize, devices: usize) -> Result<()> {
    if devices == 0 || m < devices {
        return Err(Error::arg(format!("cannot split {m} samples over {devices} devices")));
    }
    Ok(())
}

/// Seeded shuffle into near-equal shards; the first `m mod devices` shards
/// get one extra sample.
pub fn partition_iid(m: usize, devices: usize, seed: u64) -> Result<Partition> {
    check_devices(m, devices)?;
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng::stream(seed, rng::streams::PARTITION));
    let (base, extra) = (m / devices, m % devices);
    let mut shards = Vec::with_capacity(devices);
    let mut start = 0;
    for d in 0..devices {
        let len = base + usize::from(d < extra);
        let mut shard = order[start..start + len].to_vec();
        shard.sort_unstable();
        shards.push(shard);
        start += len;
    }
    Ok(Partition { shards })
}

/// Label-skewed split: each class is divided among devices in proportions
/// drawn from Dirichlet(β·1), rounded by largest remainder.
pub fn partition_dirichlet(labels: &[usize], devices: usize, beta: f64, seed: u64) -> Result<Partition> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::arg(format!("Dirichlet beta must be positive and finite, got {beta}")));
    }
    check_devices(labels.len(), devices)?;
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::arg(format!("beta {beta}: {e}")))?;
    let mut r = rng::stream(seed, rng::streams::PARTITION);
    let classes = labels.iter().max().map_or(0, |&c| c + 1);
    let mut shards = vec![Vec::new(); devices];
    for c in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut r);
        let draws: Vec<f64> = (0..devices).map(|_| gamma.sample(&mut r)).collect();
        let total: f64 = draws.iter().sum();
        let props: Vec<f64> = if total > 0.0 && total.is_finite() {
            draws.iter().map(|g| g / total).collect()
        } else {
            // every draw underflowed: the mass sits on one device
            let mut p = vec![0.0; devices];
            p[r.random_range(0..devices)] = 1.0;
            p
        };
        let counts = largest_remainder(&props, members.len());
        let mut start = 0;
        for (d, &k) in counts.iter().enumerate() {
            shards[d].extend_from_slice(&members[start..start + k]);
            start += k;
        }
    }
    // a device that drew nothing takes one sample from the largest shard
    while let Some(empty) = shards.iter().position(Vec::is_empty) {
        let largest = (0..devices).max_by_key(|&d| (shards[d].len(), std::cmp::Reverse(d))).expect("devices > 0");
        let moved = shards[largest].pop().expect("largest shard has ≥ 2 samples");
        shards[empty].push(moved);
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(Partition { shards })
}

/// Integer counts summing to `n`, proportional to `props`; leftover units go
/// to the largest fractional parts, ties to the lower index.
fn largest_remainder(props: &[f64], n: usize) -> Vec<usize> {
    let exact: Vec<f64> = props.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &d in order.iter().take(n.saturating_sub(assigned)) {
        counts[d] += 1;
    }
    counts
}
