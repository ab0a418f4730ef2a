//! Two-phase training: gates alone on a frozen backbone, then everything
//! jointly. Also the fixed-scale compression mode and the random-drop
//! baseline.

mod optim;
mod report;
mod run;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ScaleParam;

pub use optim::{optimizer_step, OptimizerKind, OptimizerState};
pub use report::{EpochRecord, TrainReport, REPORT_HEADER};
pub use run::{pretrain_backbone, train_baseline, train_phase_cgm_only, train_phase_joint, train_urnet, Phase, TrainData};

/// Where the per-iteration target scale comes from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ScaleSchedule {
    /// Uniform on `[min, max]`.
    Range { min: f64, max: f64 },
    /// Cosine-annealed from 1 to `s_fixed`, plus clamped Gaussian noise.
    Fixed { s_fixed: f64, sigma: f64, anneal_epochs: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    #[default]
    None,
    RandomDrop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub beta: f64,
    /// Gate-training probability.
    pub p: f64,
    pub scale: ScaleSchedule,
    pub epochs_total: usize,
    pub epochs_cgm_only: usize,
    pub optimizer: OptimizerKind,
    /// `(epoch, lr)` steps; the last entry not after the current epoch applies.
    pub lr_schedule: Vec<(usize, f64)>,
    /// Gate parameters step at `lr · gate_lr_scale`.
    pub gate_lr_scale: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub baseline_mode: BaselineMode,
    /// Zero-pad-and-crop shift; 0 disables.
    pub augment_pad: usize,
    pub augment_flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk(60, 10)
    }
}

impl TrainConfig {
    /// Adam at 1e-3, dropping tenfold at 60% and again at 80% of `epochs`.
    pub fn desk(epochs: usize, epochs_cgm_only: usize) -> Self {
        Self {
            beta: 2.0,
            p: 0.1,
            scale: ScaleSchedule::Range { min: 0.2, max: 1.0 },
            epochs_total: epochs,
            epochs_cgm_only,
            optimizer: OptimizerKind::adam(),
            lr_schedule: step_schedule(epochs, 1e-3),
            gate_lr_scale: 1.0,
            batch_size: 64,
            seed: 0,
            baseline_mode: BaselineMode::None,
            augment_pad: 0,
            augment_flip: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad(format!("beta must be finite and non-negative, got {}", self.beta));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return bad(format!("p must lie in [0, 1], got {}", self.p));
        }
        match self.scale {
            ScaleSchedule::Range { min, max } => {
                if !(0.0 <= min && min <= max && max <= 1.0) {
                    return bad(format!("scale range must satisfy 0 <= min <= max <= 1, got ({min}, {max})"));
                }
            }
            ScaleSchedule::Fixed { s_fixed, sigma, .. } => {
                if !(0.0..=1.0).contains(&s_fixed) {
                    return bad(format!("s_fixed must lie in [0, 1], got {s_fixed}"));
                }
                if !(sigma.is_finite() && sigma >= 0.0) {
                    return bad(format!("sigma must be finite and non-negative, got {sigma}"));
                }
            }
        }
        if self.epochs_cgm_only > self.epochs_total {
            return bad(format!("epochs_cgm_only {} exceeds epochs_total {}", self.epochs_cgm_only, self.epochs_total));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.lr_schedule.is_empty() || self.lr_schedule[0].0 != 0 {
            return bad("lr_schedule must start at epoch 0".into());
        }
        if self.lr_schedule.windows(2).any(|w| w[1].0 <= w[0].0) {
            return bad("lr_schedule epochs must be strictly increasing".into());
        }
        if self.lr_schedule.iter().any(|&(_, lr)| !(lr.is_finite() && lr > 0.0)) {
            return bad("learning rates must be positive and finite".into());
        }
        if !(self.gate_lr_scale.is_finite() && self.gate_lr_scale > 0.0) {
            return bad(format!("gate_lr_scale must be positive and finite, got {}", self.gate_lr_scale));
        }
        self.optimizer.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule.iter().take_while(|(e, _)| *e <= epoch).last().map_or(self.lr_schedule[0].1, |&(_, lr)| lr)
    }
}

/// `lr` until 60% of `epochs`, then `lr/10`, then `lr/100` from 80%.
pub fn step_schedule(epochs: usize, lr: f64) -> Vec<(usize, f64)> {
    let mut out = vec![(0, lr)];
    for (frac, factor) in [(0.6, 0.1), (0.8, 0.01)] {
        let e = (epochs as f64 * frac).round() as usize;
        if e > out.last().expect("nonempty").0 {
            out.push((e, lr * factor));
        }
    }
    out
}

/// A fresh uniform draw from `[min, max]`.
pub fn sample_scale<R: Rng + ?Sized>(min: f64, max: f64, rng: &mut R) -> Result<ScaleParam> {
    if !(0.0 <= min && min <= max && max <= 1.0) {
        return Err(Error::InvalidScale(if (0.0..=1.0).contains(&min) { max } else { min }));
    }
    if min == max {
        return ScaleParam::new(min);
    }
    Ok(ScaleParam::clamped(rng.random_range(min..=max)))
}

/// Cosine anneal from 1 at epoch 0 to `s_fixed` at `anneal_epochs`.
pub fn annealed_base(epoch: usize, s_fixed: f64, anneal_epochs: usize) -> f64 {
    if anneal_epochs == 0 {
        return s_fixed;
    }
    let t = epoch.min(anneal_epochs) as f64 / anneal_epochs as f64;
    s_fixed + (1.0 - s_fixed) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

/// Annealed base plus `Normal(0, σ²)` noise, clamped into `[0, 1]`.
pub fn annealed_scale<R: Rng + ?Sized>(epoch: usize, s_fixed: f64, sigma: f64, anneal_epochs: usize, rng: &mut R) -> Result<ScaleParam> {
    if !(0.0..=1.0).contains(&s_fixed) {
        return Err(Error::InvalidScale(s_fixed));
    }
    let base = annealed_base(epoch, s_fixed, anneal_epochs);
    let noise = if sigma > 0.0 { Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("sigma: {e}")))?.sample(rng) } else { 0.0 };
    Ok(ScaleParam::clamped(base + noise))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn degenerate_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_scale(0.5, 0.5, &mut rng).unwrap().value(), 0.5);
        assert!(sample_scale(0.6, 0.5, &mut rng).is_err());
    }

    #[test]
    fn uniform_mean_and_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws: Vec<f64> = (0..100_000).map(|_| sample_scale(0.2, 1.0, &mut rng).unwrap().value()).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.6).abs() < 0.01, "{mean}");
        assert!(draws.iter().all(|s| (0.2..=1.0).contains(s)));
    }

    #[test]
    fn anneal_endpoints_and_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(annealed_scale(0, 0.6, 0.0, 10, &mut rng).unwrap().value(), 1.0);
        assert_eq!(annealed_scale(10, 0.6, 0.0, 10, &mut rng).unwrap().value(), 0.6);
        assert_eq!(annealed_scale(25, 0.6, 0.0, 10, &mut rng).unwrap().value(), 0.6);
        assert!((annealed_scale(5, 0.6, 0.0, 10, &mut rng).unwrap().value() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn anneal_noise_is_clamped() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for e in 0..20 {
            let s = annealed_scale(e, 0.6, 0.5, 5, &mut rng).unwrap().value();
            assert!((0.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn lr_steps() {
        let cfg = TrainConfig::desk(60, 10);
        assert_eq!(cfg.lr_schedule, vec![(0, 1e-3), (36, 1e-4), (48, 1e-5)]);
        assert_eq!(cfg.lr_at(0), 1e-3);
        assert_eq!(cfg.lr_at(35), 1e-3);
        assert_eq!(cfg.lr_at(36), 1e-4);
        assert_eq!(cfg.lr_at(59), 1e-5);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { epochs_cgm_only: 70, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { scale: ScaleSchedule::Range { min: 0.8, max: 0.2 }, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { scale: ScaleSchedule::Fixed { s_fixed: 0.6, sigma: -0.1, anneal_epochs: 5 }, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_json_round_trip_and_unknown_keys() {
        let cfg = TrainConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&text).unwrap(), cfg);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"betta": 2.0}"#).is_err());
    }
}
