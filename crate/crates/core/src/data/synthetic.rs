//! Seeded template-plus-noise classification task.
//!
//! Each class owns a smooth random pattern: a coarse Gaussian grid per
//! channel, bilinearly upsampled to `H×H` and scaled by `amplitude`. A sample
//! is its class pattern plus i.i.d. Gaussian pixel noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Normalization, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub size: usize,
    /// Pixel noise standard deviation.
    pub noise: f64,
    pub amplitude: f64,
    /// Side of the coarse grid the patterns are upsampled from.
    pub grid: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { num_classes: 10, size: 8, noise: 0.5, amplitude: 0.22, grid: 3, seed: 0 }
    }
}

impl SyntheticSpec {
    pub fn new(num_classes: usize, size: usize, seed: u64) -> Self {
        Self { num_classes, size, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("synthetic task needs at least 2 classes, got {}", self.num_classes)));
        }
        if self.size == 0 || self.grid == 0 {
            return Err(Error::Config("synthetic size and grid must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite() && self.amplitude.is_finite()) {
            return Err(Error::Config("synthetic noise must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Class patterns, each `3·H·H` long in `[C, H, W]` order.
    pub fn templates(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.num_classes)
            .map(|_| {
                let mut pattern = Vec::with_capacity(CHANNELS * self.size * self.size);
                for _ in 0..CHANNELS {
                    let coarse: Vec<f64> = (0..self.grid * self.grid).map(|_| rng.sample(StandardNormal)).collect();
                    pattern.extend(upsample(&coarse, self.grid, self.size).into_iter().map(|v| v * self.amplitude));
                }
                pattern
            })
            .collect()
    }

    /// `m` samples with balanced labels `i mod K`. Each split draws its noise
    /// from its own stream, so splits are independent but share templates.
    pub fn generate(&self, m: usize, split: Split) -> Result<Dataset> {
        self.validate()?;
        let templates = self.templates();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1 + split as u64);
        let len = CHANNELS * self.size * self.size;
        let mut data = Vec::with_capacity(m * len);
        let mut labels = Vec::with_capacity(m);
        for i in 0..m {
            let k = i % self.num_classes;
            labels.push(k);
            for &t in &templates[k] {
                let e: f64 = rng.sample(StandardNormal);
                data.push(t + self.noise * e);
            }
        }
        let images = Tensor::new(&[m, CHANNELS, self.size, self.size], data)?;
        Dataset::new(images, labels, self.num_classes, split, Normalization::identity(CHANNELS))
    }
}

/// Training split of the default task.
pub fn make_synthetic(m: usize, num_classes: usize, size: usize, seed: u64) -> Result<Dataset> {
    SyntheticSpec::new(num_classes, size, seed).generate(m, Split::Train)
}

/// Fraction of samples whose nearest template (Euclidean) is their own class.
pub fn nearest_template_accuracy(ds: &Dataset, templates: &[Vec<f64>]) -> f64 {
    if ds.is_empty() {
        return 0.0;
    }
    let correct = (0..ds.len())
        .filter(|&i| {
            let x = ds.image(i);
            let dist = |t: &Vec<f64>| x.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best =
                (0..templates.len()).min_by(|&a, &b| dist(&templates[a]).total_cmp(&dist(&templates[b]))).expect("at least one template");
            best == ds.labels[i]
        })
        .count();
    correct as f64 / ds.len() as f64
}

fn upsample(coarse: &[f64], grid: usize, size: usize) -> Vec<f64> {
    let coord = |i: usize| {
        if grid == 1 || size == 1 {
            (0, 0, 0.0)
        } else {
            let t = i as f64 * (grid - 1) as f64 / (size - 1) as f64;
            let lo = (t.floor() as usize).min(grid - 2);
            (lo, lo + 1, t - lo as f64)
        }
    };
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let (y0, y1, fy) = coord(y);
        for x in 0..size {
            let (x0, x1, fx) = coord(x);
            let at = |r: usize, c: usize| coarse[r * grid + c];
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_bytes() {
        let a = make_synthetic(50, 4, 8, 7).unwrap();
        let b = make_synthetic(50, 4, 8, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, make_synthetic(50, 4, 8, 8).unwrap());
    }

    #[test]
    fn splits_differ_but_share_templates() {
        let spec = SyntheticSpec::new(3, 8, 1);
        let tr = spec.generate(30, Split::Train).unwrap();
        let te = spec.generate(30, Split::Test).unwrap();
        assert_ne!(tr.images, te.images);
        assert_eq!(tr.labels, te.labels);
    }

    #[test]
    fn noiseless_oracle_is_perfect() {
        let spec = SyntheticSpec { noise: 0.0, ..SyntheticSpec::new(10, 8, 3) };
        let ds = spec.generate(100, Split::Test).unwrap();
        assert_eq!(nearest_template_accuracy(&ds, &spec.templates()), 1.0);
    }

    #[test]
    fn rejects_single_class() {
        assert!(make_synthetic(10, 1, 8, 0).is_err());
    }

    #[test]
    fn upsample_hits_corners_and_interpolates() {
        let coarse = [0.0, 1.0, 2.0, 3.0];
        let up = upsample(&coarse, 2, 3);
        assert_eq!(up, vec![0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0]);
    }
}
