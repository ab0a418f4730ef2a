//! Where a run's train/val/test splits come from.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{load_cifar_binary, CifarVariant, Dataset, Normalization, Split, SyntheticSpec, CIFAR10_MEAN, CIFAR10_STD};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        #[serde(default)]
        task: SyntheticSpec,
        train_size: usize,
        val_size: usize,
        test_size: usize,
    },
    /// Binary record files; the last `val_size` training records are held out.
    Cifar {
        variant: CifarVariant,
        num_classes: usize,
        train_files: Vec<PathBuf>,
        test_files: Vec<PathBuf>,
        #[serde(default)]
        val_size: usize,
        /// Defaults to the CIFAR-10 channel statistics.
        #[serde(default)]
        normalization: Option<Normalization>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Dataset,
}

impl DatasetSpec {
    pub fn num_classes(&self) -> usize {
        match self {
            DatasetSpec::Synthetic { task, .. } => task.num_classes,
            DatasetSpec::Cifar { num_classes, .. } => *num_classes,
        }
    }

    /// Side length of the (square) images.
    pub fn image_size(&self) -> usize {
        match self {
            DatasetSpec::Synthetic { task, .. } => task.size,
            DatasetSpec::Cifar { .. } => crate::data::cifar::CIFAR_SIDE,
        }
    }

    pub fn normalization(&self) -> Normalization {
        match self {
            DatasetSpec::Synthetic { .. } => Normalization::identity(3),
            DatasetSpec::Cifar { normalization, .. } => {
                normalization.clone().unwrap_or_else(|| Normalization { mean: CIFAR10_MEAN.to_vec(), std: CIFAR10_STD.to_vec() })
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetSpec::Synthetic { task, train_size, test_size, .. } => {
                task.validate()?;
                if *train_size < 2 || *test_size == 0 {
                    return Err(Error::Config("synthetic dataset needs train_size >= 2 and test_size >= 1".into()));
                }
            }
            DatasetSpec::Cifar { train_files, test_files, num_classes, .. } => {
                if train_files.is_empty() || test_files.is_empty() {
                    return Err(Error::Config("cifar dataset needs at least one train and one test file".into()));
                }
                if *num_classes < 2 {
                    return Err(Error::Config(format!("cifar dataset needs at least 2 classes, got {num_classes}")));
                }
                self.normalization().validate(3)?;
            }
        }
        Ok(())
    }

    /// Only the evaluation split; cheaper than `load` when training data is
    /// not needed.
    pub fn load_test(&self) -> Result<Dataset> {
        self.validate()?;
        match self {
            DatasetSpec::Synthetic { task, test_size, .. } => task.generate(*test_size, Split::Test),
            DatasetSpec::Cifar { variant, num_classes, test_files, .. } => {
                load_files(test_files, *variant, *num_classes, &self.normalization(), Split::Test)
            }
        }
    }

    pub fn load(&self) -> Result<Splits> {
        self.validate()?;
        let test = self.load_test()?;
        match self {
            DatasetSpec::Synthetic { task, train_size, val_size, .. } => {
                let train = task.generate(*train_size, Split::Train)?;
                let val = if *val_size > 0 { Some(task.generate(*val_size, Split::Val)?) } else { None };
                Ok(Splits { train, val, test })
            }
            DatasetSpec::Cifar { variant, num_classes, train_files, val_size, .. } => {
                let all = load_files(train_files, *variant, *num_classes, &self.normalization(), Split::Train)?;
                if *val_size >= all.len() {
                    return Err(Error::Data(format!("val_size {val_size} leaves no training records out of {}", all.len())));
                }
                let cut = all.len() - val_size;
                let train = all.range(0..cut)?;
                let val = if *val_size > 0 { Some(Dataset { split: Split::Val, ..all.range(cut..all.len())? }) } else { None };
                Ok(Splits { train, val, test })
            }
        }
    }
}

fn load_files(files: &[PathBuf], variant: CifarVariant, k: usize, norm: &Normalization, split: Split) -> Result<Dataset> {
    let mut parts = Vec::with_capacity(files.len());
    for f in files {
        parts.push(load_cifar_binary(f, variant, k, norm, split).map_err(|e| match e {
            Error::Io(io) => Error::Data(format!("{}: {io}", f.display())),
            other => other,
        })?);
    }
    Dataset::concat(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::encode_cifar_records;

    #[test]
    fn synthetic_splits_have_requested_sizes() {
        let spec = DatasetSpec::Synthetic { task: SyntheticSpec::new(3, 8, 0), train_size: 30, val_size: 6, test_size: 9 };
        let s = spec.load().unwrap();
        assert_eq!((s.train.len(), s.val.as_ref().unwrap().len(), s.test.len()), (30, 6, 9));
        assert_eq!(s.val.unwrap().split, Split::Val);
    }

    #[test]
    fn cifar_holds_out_tail_of_training_files() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<(u8, Vec<u8>)> = (0..5).map(|i| (i as u8, vec![i as u8; 3072])).collect();
        let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
        std::fs::write(&a, encode_cifar_records(&recs[..3])).unwrap();
        std::fs::write(&b, encode_cifar_records(&recs[3..])).unwrap();
        let spec = DatasetSpec::Cifar {
            variant: CifarVariant::Cifar10,
            num_classes: 10,
            train_files: vec![a.clone(), b],
            test_files: vec![a],
            val_size: 2,
            normalization: None,
        };
        let s = spec.load().unwrap();
        assert_eq!(s.train.labels, vec![0, 1, 2]);
        assert_eq!(s.val.unwrap().labels, vec![3, 4]);
        assert_eq!(s.test.len(), 3);
    }

    #[test]
    fn missing_file_is_a_data_error() {
        let spec = DatasetSpec::Cifar {
            variant: CifarVariant::Cifar10,
            num_classes: 10,
            train_files: vec!["/nonexistent/x.bin".into()],
            test_files: vec!["/nonexistent/y.bin".into()],
            val_size: 0,
            normalization: None,
        };
        assert!(matches!(spec.load_test(), Err(Error::Data(_))));
    }

    #[test]
    fn json_rejects_unknown_keys() {
        let ok = r#"{"kind": "synthetic", "train_size": 10, "val_size": 0, "test_size": 5}"#;
        assert!(serde_json::from_str::<DatasetSpec>(ok).is_ok());
        let bad = r#"{"kind": "synthetic", "train_size": 10, "val_size": 0, "test_size": 5, "extra": 1}"#;
        assert!(serde_json::from_str::<DatasetSpec>(bad).is_err());
    }
}
