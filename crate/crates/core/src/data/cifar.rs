//! CIFAR binary record format.
//!
//! CIFAR-10 records are 3073 bytes: one label byte followed by 1024 red,
//! 1024 green and 1024 blue bytes, each plane row-major 32×32. The CIFAR-100
//! variant carries a coarse and a fine label byte (3074 bytes per record).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Normalization, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
const PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

pub const CIFAR10_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarVariant {
    Cifar10,
    /// Uses the fine label; the coarse byte is skipped.
    Cifar100Fine,
}

impl CifarVariant {
    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100Fine => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + PIXELS
    }
}

/// Decodes records, scaling pixels to `[0,1]` and then normalizing per channel.
pub fn parse_cifar_bytes(bytes: &[u8], variant: CifarVariant, num_classes: usize, norm: &Normalization, split: Split) -> Result<Dataset> {
    norm.validate(3)?;
    let rec = variant.record_len();
    if bytes.is_empty() || !bytes.len().is_multiple_of(rec) {
        return Err(Error::Format(format!("file length {} is not a positive multiple of the {rec}-byte record size", bytes.len())));
    }
    let m = bytes.len() / rec;
    let mut labels = Vec::with_capacity(m);
    let mut data = Vec::with_capacity(m * PIXELS);
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    for (i, record) in bytes.chunks_exact(rec).enumerate() {
        let label = record[variant.label_bytes() - 1] as usize;
        if label >= num_classes {
            return Err(Error::Data(format!("record {i}: label {label} >= {num_classes} classes")));
        }
        labels.push(label);
        for (j, &px) in record[variant.label_bytes()..].iter().enumerate() {
            let c = j / plane;
            data.push((px as f64 / 255.0 - norm.mean[c]) / norm.std[c]);
        }
    }
    let images = Tensor::new(&[m, 3, CIFAR_SIDE, CIFAR_SIDE], data)?;
    Dataset::new(images, labels, num_classes, split, norm.clone())
}

pub fn load_cifar_binary(
    path: impl AsRef<Path>,
    variant: CifarVariant,
    num_classes: usize,
    norm: &Normalization,
    split: Split,
) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    parse_cifar_bytes(&bytes, variant, num_classes, norm, split)
}

/// Encodes `(label, pixels)` pairs as CIFAR-10 records.
pub fn encode_cifar_records(records: &[(u8, Vec<u8>)]) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * (PIXELS + 1));
    for (label, pixels) in records {
        assert_eq!(pixels.len(), PIXELS);
        out.push(*label);
        out.extend_from_slice(pixels);
    }
    out
}
