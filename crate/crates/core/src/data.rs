//! Dataset ingestion: CIFAR-10 binary records, deterministic synthetic class
//! blobs, batching and label-free wrapping.

use std::fs;
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;
pub const CIFAR_CLASSES: usize = 10;

/// Per-channel standardization constants applied to `[0, 1]` pixel values.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    /// Published CIFAR-10 training-set statistics.
    pub fn cifar10() -> Self {
        Self { mean: vec![0.4914, 0.4822, 0.4465], std: vec![0.2470, 0.2435, 0.2616] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    CifarBinary(Vec<PathBuf>),
    Synthetic { seed: u64, n: usize, classes: usize },
    Subset,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augmentation {
    pub hflip: bool,
    /// Zero-pad by this many pixels and crop back at a random offset.
    pub pad_crop: usize,
}

impl Augmentation {
    pub fn standard() -> Self {
        Self { hflip: true, pad_crop: 4 }
    }

    pub fn is_enabled(&self) -> bool {
        self.hflip || self.pad_crop > 0
    }
}

/// Immutable image collection with optional labels.
///
/// Label reads go through [`DatasetHandle::label`], which counts every
/// access so label-free code paths can be audited.
#[derive(Clone, Debug)]
pub struct DatasetHandle {
    images: Arc<Vec<f32>>,
    item_shape: (usize, usize, usize),
    labels: Option<Arc<Vec<u8>>>,
    classes: usize,
    source: DataSource,
    augmentation: Augmentation,
    label_reads: Arc<AtomicUsize>,
}

impl DatasetHandle {
    pub fn from_parts(
        images: Vec<f32>,
        item_shape: (usize, usize, usize),
        labels: Option<Vec<u8>>,
        classes: usize,
        source: DataSource,
    ) -> Result<Self> {
        let item_len = item_shape.0 * item_shape.1 * item_shape.2;
        if item_len == 0 || !images.len().is_multiple_of(item_len) {
            return Err(Error::Input(format!(
                "{} pixel values do not tile items of shape {item_shape:?}",
                images.len()
            )));
        }
        let n = images.len() / item_len;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Input(format!("{} labels for {n} items", l.len())));
            }
            if let Some((i, &bad)) = l.iter().enumerate().find(|(_, &v)| v as usize >= classes) {
                return Err(Error::Input(format!("label {bad} of item {i} out of range for {classes} classes")));
            }
        }
        Ok(Self {
            images: Arc::new(images),
            item_shape,
            labels: labels.map(Arc::new),
            classes,
            source,
            augmentation: Augmentation::default(),
            label_reads: Arc::new(AtomicUsize::new(0)),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len() / self.item_len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn item_shape(&self) -> (usize, usize, usize) {
        self.item_shape
    }

    pub fn item_len(&self) -> usize {
        self.item_shape.0 * self.item_shape.1 * self.item_shape.2
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn source(&self) -> &DataSource {
        &self.source
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    pub fn augmentation(&self) -> Augmentation {
        self.augmentation
    }

    pub fn with_augmentation(mut self, aug: Augmentation) -> Self {
        self.augmentation = aug;
        self
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let l = self.item_len();
        &self.images[i * l..(i + 1) * l]
    }

    /// Label of item `i`; every call is counted.
    pub fn label(&self, i: usize) -> Result<usize> {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        match &self.labels {
            Some(l) => l.get(i).map(|&v| v as usize).ok_or_else(|| Error::Input(format!("item {i} out of range"))),
            None => Err(Error::Input("dataset has no labels".into())),
        }
    }

    /// Number of label reads since construction (shared across clones).
    pub fn label_reads(&self) -> usize {
        self.label_reads.load(Ordering::Relaxed)
    }

    /// Same items in the same order with label access removed.
    pub fn without_labels(&self) -> Self {
        let mut h = self.clone();
        h.labels = None;
        h
    }

    /// The first `per_class` items of each class, in original order.
    pub fn first_n_per_class(&self, per_class: usize) -> Result<Self> {
        let labels = self.labels.as_ref().ok_or_else(|| Error::Input("subsetting needs labels".into()))?;
        let mut counts = vec![0usize; self.classes];
        let mut images = Vec::new();
        let mut kept = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            if counts[l as usize] < per_class {
                counts[l as usize] += 1;
                images.extend_from_slice(self.image(i));
                kept.push(l);
            }
        }
        let mut h = Self::from_parts(images, self.item_shape, Some(kept), self.classes, DataSource::Subset)?;
        h.augmentation = self.augmentation;
        Ok(h)
    }

    /// Per-channel mean over all items.
    pub fn channel_means(&self) -> Vec<f64> {
        let (c, h, w) = self.item_shape;
        let mut sums = vec![0.0f64; c];
        for i in 0..self.len() {
            for (ch, plane) in self.image(i).chunks(h * w).enumerate() {
                sums[ch] += plane.iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        let denom = (self.len() * h * w).max(1) as f64;
        sums.iter().map(|s| s / denom).collect()
    }

    /// Items `[0, at)` and `[at, len)` as two independent handles.
    pub fn split_at(&self, at: usize) -> Result<(Self, Self)> {
        if at > self.len() {
            return Err(Error::Input(format!("split point {at} beyond {} items", self.len())));
        }
        let cut = at * self.item_len();
        let part = |images: &[f32], labels: Option<&[u8]>| -> Result<Self> {
            let mut h = Self::from_parts(images.to_vec(), self.item_shape, labels.map(<[u8]>::to_vec), self.classes, DataSource::Subset)?;
            h.augmentation = self.augmentation;
            Ok(h)
        };
        let (la, lb) = match &self.labels {
            Some(l) => (Some(&l[..at]), Some(&l[at..])),
            None => (None, None),
        };
        Ok((part(&self.images[..cut], la)?, part(&self.images[cut..], lb)?))
    }
}

fn decode_cifar(bytes: &[u8], norm: &Normalization, images: &mut Vec<f32>, labels: &mut Vec<u8>, file: &Path) -> Result<()> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_LEN) {
        return Err(Error::Format(format!(
            "{}: length {} is not a multiple of the {CIFAR_RECORD_LEN}-byte record size",
            file.display(),
            bytes.len()
        )));
    }
    if norm.mean.len() != 3 || norm.std.len() != 3 {
        return Err(Error::Config("CIFAR normalization needs three channel constants".into()));
    }
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
        let label = rec[0];
        if label as usize >= CIFAR_CLASSES {
            return Err(Error::Format(format!("{}: record {r} has label byte {label}", file.display())));
        }
        labels.push(label);
        for (ch, plane) in rec[1..].chunks_exact(1024).enumerate() {
            let (m, s) = (norm.mean[ch], norm.std[ch]);
            images.extend(plane.iter().map(|&p| (p as f32 / 255.0 - m) / s));
        }
    }
    Ok(())
}

/// Reads CIFAR-10 binary batches (1 label byte + 3072 pixel bytes per record,
/// R, G, B planes of 32x32 row-major) in file and record order.
pub fn load_cifar_binary(paths: &[PathBuf], norm: &Normalization) -> Result<DatasetHandle> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let bytes = fs::read(p)?;
        decode_cifar(&bytes, norm, &mut images, &mut labels, p)?;
    }
    DatasetHandle::from_parts(images, (3, 32, 32), Some(labels), CIFAR_CLASSES, DataSource::CifarBinary(paths.to_vec()))
}

/// Parameters of the synthetic class-blob generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n: usize,
    pub classes: usize,
    pub shape: (usize, usize, usize),
    /// Template amplitude relative to unit pixel noise.
    pub margin: f64,
}

impl SyntheticSpec {
    pub fn new(seed: u64, n: usize, classes: usize, shape: (usize, usize, usize)) -> Self {
        Self { seed, n, classes, shape, margin: 1.0 }
    }
}

/// Gaussian class blobs around per-class templates that combine a channel
/// colour offset with a smooth spatial pattern. Labels are `i mod classes`.
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<DatasetHandle> {
    let SyntheticSpec { seed, n, classes, shape, margin } = *spec;
    if classes == 0 || n < classes {
        return Err(Error::Input(format!("need n >= classes >= 1 (n={n}, classes={classes})")));
    }
    let (c, h, w) = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let colour: Vec<f64> = (0..c).map(|_| normal(&mut rng)).collect();
            let fy: f64 = rng.random_range(0.5..2.0);
            let fx: f64 = rng.random_range(0.5..2.0);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let mut t = Vec::with_capacity(c * h * w);
            for ch in 0..c {
                let sign = if ch % 2 == 0 { 1.0 } else { -1.0 };
                for y in 0..h {
                    for x in 0..w {
                        let wave = (fy * y as f64 / h as f64 * std::f64::consts::TAU
                            + fx * x as f64 / w as f64 * std::f64::consts::TAU
                            + phase)
                            .sin();
                        t.push(colour[ch] + sign * wave);
                    }
                }
            }
            t
        })
        .collect();
    let mut images = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        labels.push(class as u8);
        images.extend(templates[class].iter().map(|&t| (margin * t + normal(&mut rng)) as f32));
    }
    DatasetHandle::from_parts(images, shape, Some(labels), classes, DataSource::Synthetic { seed, n, classes })
}

/// One mini-batch: `x` is `[B, C, H, W]`; labels are absent when dropped.
#[derive(Clone, Debug)]
pub struct Batch<T: Scalar> {
    pub indices: Vec<usize>,
    pub x: Tensor<T>,
    pub labels: Option<Vec<usize>>,
}

/// Deterministic mini-batch iterator; the last partial batch is included.
pub struct Batches<'a, T: Scalar> {
    data: &'a DatasetHandle,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    drop_labels: bool,
    aug_rng: Option<ChaCha8Rng>,
    _t: PhantomData<T>,
}

/// Iterates `handle` in batches. `shuffle_seed = Some(s)` permutes the items
/// deterministically per `(s, epoch)`; augmentation (when enabled on the
/// handle) is seeded the same way.
pub fn batches<T: Scalar>(
    handle: &DatasetHandle,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    epoch: u64,
    drop_labels: bool,
) -> Result<Batches<'_, T>> {
    if batch_size == 0 {
        return Err(Error::Input("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..handle.len()).collect();
    let mut aug_rng = None;
    if let Some(seed) = shuffle_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::ffa::derive_seed(seed, epoch, u64::MAX, 0));
        order.shuffle(&mut rng);
        if handle.augmentation.is_enabled() {
            aug_rng = Some(ChaCha8Rng::seed_from_u64(crate::ffa::derive_seed(seed, epoch, u64::MAX, 1)));
        }
    }
    Ok(Batches { data: handle, order, batch_size, pos: 0, drop_labels, aug_rng, _t: PhantomData })
}

impl<T: Scalar> Batches<'_, T> {
    fn augment(rng: &mut ChaCha8Rng, aug: Augmentation, shape: (usize, usize, usize), src: &[f32], dst: &mut Vec<T>) {
        let (c, h, w) = shape;
        let flip = aug.hflip && rng.random_bool(0.5);
        let p = aug.pad_crop as i64;
        let (dy, dx) = if p > 0 { (rng.random_range(-p..=p) as isize, rng.random_range(-p..=p) as isize) } else { (0, 0) };
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize + dy;
                    let sx0 = x as isize + dx;
                    let sx = if flip { w as isize - 1 - sx0 } else { sx0 };
                    let v = if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                        0.0
                    } else {
                        src[ch * h * w + sy as usize * w + sx as usize]
                    };
                    dst.push(T::lit(v as f64));
                }
            }
        }
    }
}

impl<T: Scalar> Iterator for Batches<'_, T> {
    type Item = Result<Batch<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let (c, h, w) = self.data.item_shape;
        let mut x = Vec::with_capacity(indices.len() * c * h * w);
        for &i in &indices {
            match &mut self.aug_rng {
                Some(rng) => Self::augment(rng, self.data.augmentation, self.data.item_shape, self.data.image(i), &mut x),
                None => x.extend(self.data.image(i).iter().map(|&v| T::lit(v as f64))),
            }
        }
        let labels = if self.drop_labels {
            None
        } else {
            match indices.iter().map(|&i| self.data.label(i)).collect::<Result<Vec<_>>>() {
                Ok(l) => Some(l),
                Err(e) => return Some(Err(e)),
            }
        };
        let x = Tensor::from_parts(vec![indices.len(), c, h, w], x);
        Some(Ok(Batch { indices, x, labels }))
    }
}
