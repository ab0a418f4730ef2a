//! Datasets, augmentation and checkpoint persistence.

mod checkpoint;
mod cifar;
mod source;
mod synthetic;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, TensorEntry, TrainState, CHECKPOINT_VERSION};
pub use cifar::{encode_cifar_records, load_cifar_binary, parse_cifar_bytes, CifarVariant, CIFAR10_MEAN, CIFAR10_STD};
pub use source::{DatasetSpec, Splits};
pub use synthetic::{make_synthetic, nearest_template_accuracy, SyntheticSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Per-channel affine normalization applied at load time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::Config(format!("normalization needs {channels} means and stds")));
        }
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("normalization std must be positive and finite".into()));
        }
        Ok(())
    }
}

/// An immutable labelled image set `[M, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: Split, normalization: Normalization) -> Result<Self> {
        if images.ndim() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Data(format!("{} labels for images of shape {:?}", labels.len(), images.shape())));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {l} out of range for {num_classes} classes")));
        }
        Ok(Self { images, labels, num_classes, split, normalization })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// Gathers the listed samples into one batch, preserving order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let [c, h, w] = self.image_shape();
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(&[indices.len(), c, h, w], data).expect("dataset values are finite"), labels)
    }

    /// The first `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        self.range(0..n.min(self.len()))
    }

    /// Samples `r`; a dataset cannot be empty, so neither can `r`.
    pub fn range(&self, r: std::ops::Range<usize>) -> Result<Dataset> {
        if r.is_empty() || r.end > self.len() {
            return Err(Error::Data(format!("sample range {r:?} is empty or exceeds {} samples", self.len())));
        }
        let idx: Vec<usize> = r.collect();
        let (images, labels) = self.batch(&idx);
        Ok(Dataset { images, labels, num_classes: self.num_classes, split: self.split, normalization: self.normalization.clone() })
    }

    /// Stacks datasets with matching image shape, classes and normalization.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| Error::Data("no datasets to concatenate".into()))?;
        if parts.len() == 1 {
            return Ok(first.clone());
        }
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.image_shape() != first.image_shape() || p.num_classes != first.num_classes || p.normalization != first.normalization {
                return Err(Error::Data("cannot concatenate datasets of different layouts".into()));
            }
            data.extend_from_slice(p.images.data());
            labels.extend_from_slice(&p.labels);
        }
        let [c, h, w] = first.image_shape();
        let images = Tensor::new(&[labels.len(), c, h, w], data)?;
        Dataset::new(images, labels, first.num_classes, first.split, first.normalization.clone())
    }
}

/// Random crop after zero-padding by `pad`, plus horizontal flip with
/// probability 1/2, applied independently per sample.
pub fn augment_batch<R: Rng + ?Sized>(batch: &Tensor, pad: usize, flip: bool, rng: &mut R) -> Tensor {
    let s = batch.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let src = batch.data();
    let mut out = vec![0.0; src.len()];
    for i in 0..b {
        let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let mirror = flip && rng.random_bool(0.5);
        for ch in 0..c {
            let plane = (i * c + ch) * h * w;
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let xx = if mirror { w - 1 - x } else { x };
                    let sx = xx as isize + dx;
                    if sx >= 0 && sx < w as isize {
                        out[plane + y * w + x] = src[plane + sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    Tensor::new(s, out).expect("augmentation preserves finiteness")
}
