//! Dataset handles, batching and subsetting.

mod cifar;
mod mnist;

pub use cifar::{load_cifar10, parse_cifar_batch, write_cifar_batch, CIFAR_RECORD_BYTES};
pub use mnist::{load_mnist, parse_idx_images, parse_idx_labels, write_idx_images, write_idx_labels};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    /// Valid input range in dataset units: `[0, 1]` for MNIST, `[0, 255]` for CIFAR-10.
    pub fn clip_range(self) -> (f32, f32) {
        match self {
            DatasetKind::Mnist => (0.0, 1.0),
            DatasetKind::Cifar10 => (0.0, 255.0),
        }
    }

    pub fn dims(self) -> [usize; 3] {
        match self {
            DatasetKind::Mnist => [1, 28, 28],
            DatasetKind::Cifar10 => [3, 32, 32],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }

    pub fn load(self, dir: &Path, split: Split) -> Result<DatasetHandle> {
        match self {
            DatasetKind::Mnist => load_mnist(dir, split),
            DatasetKind::Cifar10 => load_cifar10(dir, split),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// An immutable in-memory labeled image set, in dataset units.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHandle {
    pub kind: DatasetKind,
    pub split: Split,
    images: Vec<f32>,
    labels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    /// `[N, C, H, W]`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl DatasetHandle {
    pub fn new(kind: DatasetKind, split: Split, images: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        let per = kind.dims().iter().product::<usize>();
        if images.len() != labels.len() * per {
            return Err(Error::Shape(format!(
                "{} labels need {} pixel values, got {}",
                labels.len(),
                labels.len() * per,
                images.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= CLASSES) {
            return Err(Error::InvalidArgument(format!("label {bad} outside [0, {CLASSES})")));
        }
        let (lo, hi) = kind.clip_range();
        if let Some(bad) = images.iter().find(|&&v| !(lo..=hi).contains(&v)) {
            return Err(Error::InvalidArgument(format!("pixel {bad} outside [{lo}, {hi}]")));
        }
        Ok(DatasetHandle { kind, split, images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.kind.dims()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.example_len();
        &self.images[i * per..(i + 1) * per]
    }

    fn example_len(&self) -> usize {
        self.dims().iter().product()
    }

    /// Gathers the given examples into one batch.
    pub fn gather(&self, indices: &[usize]) -> LabeledBatch {
        let per = self.example_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.dims();
        LabeledBatch {
            inputs: Tensor::new([indices.len(), c, h, w], data).expect("gather shape"),
            labels: indices.iter().map(|&i| self.labels[i] as usize).collect(),
        }
    }

    /// Consecutive batches over a (possibly shuffled) order; the last batch may be short.
    pub fn batches(&self, batch_size: usize, shuffle: bool, rng: &mut RngStream) -> Result<Batches<'_>> {
        if batch_size < 1 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        let order = if shuffle { rng.permutation(self.len()) } else { (0..self.len()).collect() };
        Ok(Batches { data: self, order, batch_size, pos: 0 })
    }

    /// Class-balanced sample of `n` examples without replacement.
    ///
    /// Each class is shuffled, then classes are drawn round-robin until `n`
    /// examples are taken, and the result is shuffled again.
    pub fn subset(&self, n: usize, rng: &mut RngStream) -> Result<DatasetHandle> {
        if n > self.len() {
            return Err(Error::InvalidArgument(format!(
                "subset of {n} requested from {} examples",
                self.len()
            )));
        }
        if n == self.len() {
            return Ok(self.clone());
        }
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); CLASSES];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l as usize].push(i);
        }
        for class in &mut by_class {
            rng.shuffle(class);
        }
        let mut picked = Vec::with_capacity(n);
        let mut round = 0;
        while picked.len() < n {
            for class in &by_class {
                if picked.len() == n {
                    break;
                }
                if let Some(&i) = class.get(round) {
                    picked.push(i);
                }
            }
            round += 1;
        }
        rng.shuffle(&mut picked);
        let batch = self.gather(&picked);
        DatasetHandle::new(
            self.kind,
            self.split,
            batch.inputs.into_data(),
            batch.labels.iter().map(|&l| l as u8).collect(),
        )
    }

    /// The first `n` examples in stored order.
    pub fn head(&self, n: usize) -> DatasetHandle {
        let n = n.min(self.len());
        DatasetHandle {
            kind: self.kind,
            split: self.split,
            images: self.images[..n * self.example_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    pub fn class_histogram(&self) -> [usize; CLASSES] {
        let mut h = [0; CLASSES];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

pub struct Batches<'a> {
    data: &'a DatasetHandle,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = LabeledBatch;

    fn next(&mut self) -> Option<LabeledBatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.data.gather(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}
