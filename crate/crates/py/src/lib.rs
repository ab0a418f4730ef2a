//! Python bindings: models, datasets, training, evaluation and budget
//! resolution. Configuration travels as JSON strings in the same schema
//! the command-line tool reads.

use pyo3::create_exception;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use urnet_core::data::{load_checkpoint, save_checkpoint, Dataset as CoreDataset, Split, SyntheticSpec, TrainState};
use urnet_core::metrics::{budget_to_scale as core_budget_to_scale, evaluate as core_evaluate, FlopsModel};
use urnet_core::model::{GateMode, ModePolicy, ModelSpec, ScaleParam, UrnetModel};
use urnet_core::trainer::{pretrain_backbone, train_baseline, train_urnet, BaselineMode, TrainConfig, TrainData, TrainReport};
use urnet_core::{Error, Tensor};

create_exception!(urnet, DivergenceError, PyRuntimeError);

/// One list per sample, as handed to Python.
type Rows = Vec<Vec<f64>>;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Divergence { .. } => DivergenceError::new_err(e.to_string()),
        Error::Io(_) | Error::Checkpoint(_) | Error::Format(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn policy(name: &str) -> PyResult<ModePolicy> {
    Ok(match name {
        "eval" | "binary" => ModePolicy::Eval,
        "sigmoid" => ModePolicy::Override(GateMode::Sigmoid),
        "random_drop" => ModePolicy::RandomDrop,
        "all_open" => ModePolicy::AllOpen,
        other => return Err(PyValueError::new_err(format!("unknown policy {other:?}; use eval, sigmoid, random_drop or all_open"))),
    })
}

fn scale(s: f64) -> PyResult<ScaleParam> {
    ScaleParam::new(s).map_err(py_err)
}

#[pyclass(name = "Dataset", module = "urnet", skip_from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    inner: CoreDataset,
}

#[pymethods]
impl PyDataset {
    /// Seeded template-plus-noise task; `split` is train, val or test.
    #[staticmethod]
    #[pyo3(signature = (size, num_classes=10, image_size=8, seed=0, split="train"))]
    fn synthetic(size: usize, num_classes: usize, image_size: usize, seed: u64, split: &str) -> PyResult<Self> {
        let split = match split {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            other => return Err(PyValueError::new_err(format!("unknown split {other:?}"))),
        };
        let inner = SyntheticSpec::new(num_classes, image_size, seed).generate(size, split).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels.clone()
    }

    /// `[C, H, W]`.
    #[getter]
    fn image_shape(&self) -> [usize; 3] {
        self.inner.image_shape()
    }
}

#[pyclass(name = "Model", module = "urnet", skip_from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    inner: UrnetModel,
}

#[pymethods]
impl PyModel {
    /// Builds a model from a JSON architecture spec.
    #[new]
    #[pyo3(signature = (spec_json, seed=0))]
    fn new(spec_json: &str, seed: u64) -> PyResult<Self> {
        let spec: ModelSpec = serde_json::from_str(spec_json).map_err(json_err)?;
        let inner = UrnetModel::new(spec, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Three stages of four blocks, widths 16/32/64.
    #[staticmethod]
    #[pyo3(signature = (num_classes=10, seed=0))]
    fn toy(num_classes: usize, seed: u64) -> PyResult<Self> {
        let inner = UrnetModel::new(ModelSpec::toy(num_classes), &mut ChaCha8Rng::seed_from_u64(seed)).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: load_checkpoint(path, None).map_err(py_err)?.model })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let c = self.inner.spec.in_channels;
        save_checkpoint(&self.inner, &TrainState::default(), &urnet_core::data::Normalization::identity(c), path).map_err(py_err)
    }

    #[getter]
    fn num_blocks(&self) -> usize {
        self.inner.num_blocks()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn spec_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.spec).map_err(json_err)
    }

    /// Class logits `[B][K]` and gates `[B][N]` for a flat `[B, C, H, W]` batch.
    #[pyo3(signature = (images, shape, scale_value, mode="eval", seed=0))]
    fn infer(&self, images: Vec<f64>, shape: Vec<usize>, scale_value: f64, mode: &str, seed: u64) -> PyResult<(Rows, Rows)> {
        let x = Tensor::new(&shape, images).map_err(|e| py_err(e.into()))?;
        let (logits, record) =
            self.inner.infer(&x, scale(scale_value)?, policy(mode)?, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(py_err)?;
        let k = logits.shape()[1];
        let rows = logits.data().chunks(k).map(<[f64]>::to_vec).collect();
        let gates = (0..record.batch()).map(|b| record.sample(b).to_vec()).collect();
        Ok((rows, gates))
    }

    /// Per-part multiply-accumulate counts at an `h × w` input.
    fn macs<'py>(&self, py: Python<'py>, h: usize, w: usize) -> PyResult<Bound<'py, PyDict>> {
        let f = FlopsModel::new(&self.inner, h, w);
        let d = PyDict::new(py);
        d.set_item("backbone_full", f.backbone_full())?;
        d.set_item("total_full", f.total_full())?;
        d.set_item("cgm_total", f.cgms.iter().sum::<u64>())?;
        d.set_item("cgm_overhead", f.cgm_overhead())?;
        d.set_item("blocks", f.blocks.clone())?;
        Ok(d)
    }
}

fn report_json(r: &TrainReport) -> PyResult<String> {
    serde_json::to_string(&r.epochs).map_err(json_err)
}

/// Trains in place from a `TrainConfig` JSON; returns the per-epoch records
/// as a JSON array. `pretrain_epochs` of backbone training come first, with
/// random block drop at `S` uniform on `[pretrain_scale_min, 1]`.
#[pyfunction]
#[pyo3(signature = (model, train, config_json, pretrain_epochs=0, pretrain_scale_min=1.0))]
fn train(
    py: Python<'_>,
    model: &mut PyModel,
    train: &PyDataset,
    config_json: &str,
    pretrain_epochs: usize,
    pretrain_scale_min: f64,
) -> PyResult<String> {
    let cfg: TrainConfig = serde_json::from_str(config_json).map_err(json_err)?;
    let ds = train.inner.clone();
    let mut m = model.inner.clone();
    let report = py
        .detach(|| -> urnet_core::Result<TrainReport> {
            let data = TrainData::new(&ds);
            let mut report = TrainReport::default();
            if pretrain_epochs > 0 {
                report.extend(pretrain_backbone(&mut m, &data, &cfg, pretrain_epochs, pretrain_scale_min)?);
            }
            report.extend(match cfg.baseline_mode {
                BaselineMode::RandomDrop => train_baseline(&mut m, &data, &cfg)?,
                BaselineMode::None => train_urnet(&mut m, &data, &cfg)?,
            });
            Ok(report)
        })
        .map_err(py_err)?;
    model.inner = m;
    report_json(&report)
}

/// Default training configuration for `epochs` with `epochs_cgm_only` gate-only epochs, as JSON.
#[pyfunction]
#[pyo3(signature = (epochs=60, epochs_cgm_only=10))]
fn default_train_config(epochs: usize, epochs_cgm_only: usize) -> PyResult<String> {
    serde_json::to_string(&TrainConfig::desk(epochs, epochs_cgm_only)).map_err(json_err)
}

/// Accuracy and usage statistics at one scale.
#[pyfunction]
#[pyo3(signature = (model, dataset, scale_value, mode="eval", batch_size=256, seed=0))]
fn evaluate<'py>(
    py: Python<'py>,
    model: &PyModel,
    dataset: &PyDataset,
    scale_value: f64,
    mode: &str,
    batch_size: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let ev = core_evaluate(&model.inner, &dataset.inner, scale(scale_value)?, policy(mode)?, batch_size, seed).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("scale", ev.stats.scale)?;
    d.set_item("accuracy", ev.accuracy)?;
    d.set_item("usage_mean", ev.stats.usage_mean)?;
    d.set_item("usage_std", ev.stats.usage_std)?;
    d.set_item("flops_mean", ev.stats.flops_mean)?;
    d.set_item("flops_std", ev.stats.flops_std)?;
    d.set_item("block_mean", ev.stats.block_mean)?;
    d.set_item("block_var", ev.stats.block_var)?;
    Ok(d)
}

/// Largest scale whose interpolated cost fits `budget`, from `(scale, cost)` pairs.
#[pyfunction]
fn budget_to_scale(calibration: Vec<(f64, f64)>, budget: f64) -> PyResult<f64> {
    Ok(core_budget_to_scale(&calibration, budget).map_err(py_err)?.value())
}

/// Mean over the batch of `(mean gate − S)²` for a `[B][N]` gate matrix.
#[pyfunction]
fn scale_loss(gates: Vec<Vec<f64>>, scale_value: f64) -> PyResult<f64> {
    let b = gates.len();
    let n = gates.first().map_or(0, Vec::len);
    if b == 0 || n == 0 || gates.iter().any(|g| g.len() != n) {
        return Err(PyValueError::new_err("gates must be a non-empty rectangular [B][N] list"));
    }
    let mut g = urnet_core::Graph::new();
    let t = Tensor::new(&[b, n], gates.concat()).map_err(|e| py_err(e.into()))?;
    let v = g.constant(t);
    let l = urnet_core::objective::scale_loss(&mut g, v, scale(scale_value)?).map_err(py_err)?;
    Ok(g.data(l)[0])
}

/// Cosine-annealed target scale without noise.
#[pyfunction]
fn annealed_scale(epoch: usize, s_fixed: f64, anneal_epochs: usize) -> PyResult<f64> {
    scale(s_fixed)?;
    Ok(urnet_core::trainer::annealed_base(epoch, s_fixed, anneal_epochs))
}

#[pymodule]
fn urnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(default_train_config, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(budget_to_scale, m)?)?;
    m.add_function(wrap_pyfunction!(scale_loss, m)?)?;
    m.add_function(wrap_pyfunction!(annealed_scale, m)?)?;
    m.add("DivergenceError", m.py().get_type::<DivergenceError>())?;
    Ok(())
}
