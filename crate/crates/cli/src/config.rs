//! The run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use urnet_core::data::DatasetSpec;
use urnet_core::model::ModelSpec;
use urnet_core::trainer::TrainConfig;
use urnet_core::{Error, Result};

fn default_eval_batch() -> usize {
    256
}

fn default_pretrain_scale_min() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    pub output_dir: PathBuf,
    /// Model initialization and training streams.
    pub seed: u64,
    /// Backbone epochs run before gate training when no initial
    /// checkpoint is given.
    #[serde(default)]
    pub pretrain_epochs: usize,
    /// Pretraining keeps a random `round(S·N)` blocks with `S` uniform on
    /// `[pretrain_scale_min, 1]`; 1 means every block, always.
    #[serde(default = "default_pretrain_scale_min")]
    pub pretrain_scale_min: f64,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.dataset.validate()?;
        if self.model.num_classes != self.dataset.num_classes() {
            return Err(Error::Config(format!(
                "model has {} classes but the dataset has {}",
                self.model.num_classes,
                self.dataset.num_classes()
            )));
        }
        if self.model.gate_training_probability != self.train.p {
            return Err(Error::Config(format!(
                "model gate_training_probability {} differs from train.p {}",
                self.model.gate_training_probability, self.train.p
            )));
        }
        if !(0.0..=1.0).contains(&self.pretrain_scale_min) {
            return Err(Error::Config(format!("pretrain_scale_min must lie in [0, 1], got {}", self.pretrain_scale_min)));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::Config("eval_batch_size must be positive".into()));
        }
        Ok(())
    }

    /// `name` inside the output directory; names may not leave it.
    pub fn output(&self, name: &str) -> Result<PathBuf> {
        let p = Path::new(name);
        if p.is_absolute() || p.components().count() != 1 || name == ".." {
            return Err(Error::Config(format!("output name {name:?} must be a plain file name")));
        }
        Ok(self.output_dir.join(p))
    }
}

/// `a,b,c` or `start:stop:step` (inclusive of `stop`).
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let text = text.trim();
    if text.is_empty() {
        return Err(Error::Config("scale grid is empty".into()));
    }
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad grid value {s:?}")));
    let values = if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        let [a, b, step] = parts[..] else {
            return Err(Error::Config(format!("grid range {text:?} must be start:stop:step")));
        };
        let (a, b, step) = (num(a)?, num(b)?, num(step)?);
        if step.is_nan() || step <= 0.0 || b < a {
            return Err(Error::Config(format!("grid range {text:?} needs start <= stop and a positive step")));
        }
        let n = ((b - a) / step + 1e-9).floor() as usize;
        // Rounded so that 0.1-steps print as written.
        (0..=n).map(|i| ((a + i as f64 * step) * 1e9).round() / 1e9).collect()
    } else {
        text.split(',').map(num).collect::<Result<Vec<_>>>()?
    };
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidScale(*v));
    }
    Ok(values)
}
