use std::ops::Range;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment_batch, Dataset};
use crate::error::{Error, Result};
use crate::graph::{BnMode, Graph};
use crate::metrics::evaluate;
use crate::model::{ModePolicy, ParamBinder, ParamGroup, ScaleParam, Trainable, UrnetModel};
use crate::objective::total_loss;
use crate::trainer::optim::{optimizer_step, OptimizerState};
use crate::trainer::report::{EpochRecord, TrainReport};
use crate::trainer::{annealed_scale, sample_scale, BaselineMode, ScaleSchedule, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    CgmOnly,
    Joint,
    Baseline,
    /// Baseline mechanics before gate training.
    Pretrain,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::CgmOnly => "cgm_only",
            Phase::Joint => "joint",
            Phase::Baseline => "baseline",
            Phase::Pretrain => "pretrain",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Phase::CgmOnly => 0,
            Phase::Joint => 1,
            Phase::Baseline => 2,
            Phase::Pretrain => 3,
        }
    }
}

pub struct TrainData<'a> {
    pub train: &'a Dataset,
    pub val: Option<&'a Dataset>,
    /// Per-epoch rows are appended here as they complete.
    pub report_csv: Option<PathBuf>,
}

impl<'a> TrainData<'a> {
    pub fn new(train: &'a Dataset) -> Self {
        Self { train, val: None, report_csv: None }
    }
}

/// Independent generators per concern, derived from the run seed and phase.
struct Streams {
    shuffle: ChaCha8Rng,
    augment: ChaCha8Rng,
    scale: ChaCha8Rng,
    gates: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64, phase: Phase) -> Self {
        let make = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(4 * phase.stream() + k);
            r
        };
        Self { shuffle: make(0), augment: make(1), scale: make(2), gates: make(3) }
    }
}

fn next_scale(cfg: &TrainConfig, epoch: usize, rng: &mut ChaCha8Rng) -> Result<ScaleParam> {
    match cfg.scale {
        ScaleSchedule::Range { min, max } => sample_scale(min, max, rng),
        ScaleSchedule::Fixed { s_fixed, sigma, anneal_epochs } => annealed_scale(epoch, s_fixed, sigma, anneal_epochs, rng),
    }
}

/// A non-finite intermediate during a step means the run has diverged.
fn step_error(e: Error, epoch: usize, iteration: usize) -> Error {
    match e {
        Error::Tensor(crate::error::TensorError::NonFinite { op, index }) => {
            Error::Divergence { epoch, iteration, detail: format!("{op} produced a non-finite value at index {index}") }
        }
        other => other,
    }
}

fn run_epochs(model: &mut UrnetModel, data: &TrainData, cfg: &TrainConfig, phase: Phase, epochs: Range<usize>) -> Result<TrainReport> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let (trainable, bn, policy) = match phase {
        Phase::CgmOnly => (Trainable::GatesOnly, BnMode::Eval, ModePolicy::Train { p: cfg.p }),
        Phase::Joint => (Trainable::Everything, BnMode::Train, ModePolicy::Train { p: cfg.p }),
        Phase::Baseline | Phase::Pretrain => (Trainable::Everything, BnMode::Train, ModePolicy::RandomDrop),
    };
    let mut rngs = Streams::new(cfg.seed, phase);
    let groups: Vec<ParamGroup> = model.params().iter().map(|p| p.group).collect();
    let n_gate = groups.iter().filter(|&&g| g == ParamGroup::Gate).count();
    let mut backbone_state = OptimizerState::new(groups.len() - n_gate);
    let mut gate_state = OptimizerState::new(n_gate);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    // A trainable parameter the loss did not reach (a binary-mode gate) gets
    // an explicit zero gradient, so its optimizer momentum still applies.
    let zeros: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();

    for epoch in epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rngs.shuffle);
        let (mut lt, mut lc, mut ls, mut usage, mut gnorm) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let (mut s_sum, mut s_min, mut s_max) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
        let (mut correct, mut seen, mut iters) = (0usize, 0usize, 0usize);
        // Batch-norm statistics need at least two samples.
        for (iteration, chunk) in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2).enumerate() {
            let (mut x, labels) = data.train.batch(chunk);
            if cfg.augment_pad > 0 || cfg.augment_flip {
                x = augment_batch(&x, cfg.augment_pad, cfg.augment_flip, &mut rngs.augment);
            }
            let scale = next_scale(cfg, epoch, &mut rngs.scale)?;

            let mut g = Graph::new();
            let mut binder = ParamBinder::new(trainable);
            let xv = g.constant(x);
            let out =
                model.forward(&mut g, &mut binder, xv, scale, policy, bn, &mut rngs.gates).map_err(|e| step_error(e, epoch, iteration))?;
            let losses = (|| -> Result<_> {
                Ok(match phase {
                    Phase::Baseline | Phase::Pretrain => {
                        let l = g.softmax_cross_entropy(out.logits, &labels)?;
                        let v = g.data(l)[0];
                        (l, (v, v, 0.0))
                    }
                    _ => {
                        let (l, b) = total_loss(&mut g, out.logits, &labels, out.gates, scale, cfg.beta)?;
                        (l, (b.total, b.classification, b.scale))
                    }
                })
            })();
            let (loss, parts) = losses.map_err(|e| step_error(e, epoch, iteration))?;
            if !parts.0.is_finite() {
                return Err(Error::Divergence { epoch, iteration, detail: format!("loss is {}", parts.0) });
            }
            g.backward(loss).map_err(|e| step_error(e.into(), epoch, iteration))?;

            let names: Vec<(String, bool)> = model.params().iter().map(|p| (p.name.clone(), trainable.includes(p.group))).collect();
            let grads: Vec<Option<&[f64]>> = names
                .iter()
                .zip(&zeros)
                .map(|((name, train), zero)| train.then(|| binder.var(name).and_then(|v| g.grad(v)).unwrap_or(zero)))
                .collect();
            let norm = grads.iter().flatten().flat_map(|d| d.iter()).map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::Divergence { epoch, iteration, detail: format!("gradient norm is {norm}") });
            }
            log::debug!("{} epoch {epoch} iter {iteration}: loss {:.4} |grad| {norm:.4} S {:.3}", phase.name(), parts.0, scale.value());
            let (mut bb, mut bb_grads, mut gt, mut gt_grads) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for (p, grad) in model.params_mut().into_iter().zip(grads) {
                if p.group == ParamGroup::Gate {
                    gt.push(&mut p.value);
                    gt_grads.push(grad);
                } else {
                    bb.push(&mut p.value);
                    bb_grads.push(grad);
                }
            }
            optimizer_step(&mut bb, &bb_grads, &mut backbone_state, cfg.optimizer, lr)?;
            optimizer_step(&mut gt, &gt_grads, &mut gate_state, cfg.optimizer, lr * cfg.gate_lr_scale)?;
            model.apply_bn_updates(&out.bn_updates);

            let logits = g.value(out.logits);
            let k = logits.shape()[1];
            for (i, &label) in labels.iter().enumerate() {
                let row = &logits.data()[i * k..(i + 1) * k];
                let pred = (0..k).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).expect("classes");
                correct += usize::from(pred == label);
            }
            let gates = out.record.gates.data();
            usage += gates.iter().sum::<f64>() / gates.len() as f64;
            (lt, lc, ls, gnorm) = (lt + parts.0, lc + parts.1, ls + parts.2, gnorm + norm);
            s_sum += scale.value();
            s_min = s_min.min(scale.value());
            s_max = s_max.max(scale.value());
            seen += labels.len();
            iters += 1;
        }
        if iters == 0 {
            return Err(Error::Data("training set yields no batch of at least two samples".into()));
        }
        let n = iters as f64;
        let val_accuracy = match data.val {
            Some(v) => Some(evaluate(model, v, ScaleParam::FULL, ModePolicy::Eval, 256, 0)?.accuracy),
            None => None,
        };
        let record = EpochRecord {
            phase: phase.name().into(),
            epoch,
            lr,
            loss_total: lt / n,
            loss_classification: lc / n,
            loss_scale: ls / n,
            train_accuracy: correct as f64 / seen as f64,
            val_accuracy,
            mean_usage: usage / n,
            scale_mean: s_sum / n,
            scale_min: s_min,
            scale_max: s_max,
            grad_norm: gnorm / n,
        };
        log::info!(
            "{} epoch {epoch}: loss {:.4} (ce {:.4}, scale {:.4}) acc {:.3} usage {:.3}",
            record.phase,
            record.loss_total,
            record.loss_classification,
            record.loss_scale,
            record.train_accuracy,
            record.mean_usage
        );
        if let Some(path) = &data.report_csv {
            TrainReport::append_csv(path, &record)?;
        }
        report.epochs.push(record);
    }
    Ok(report)
}

/// Gates only, on a frozen backbone with evaluation-mode batch norm.
/// Covers epochs `0..epochs_cgm_only`.
pub fn train_phase_cgm_only(model: &mut UrnetModel, data: &TrainData, cfg: &TrainConfig) -> Result<TrainReport> {
    if model.cgms.is_empty() {
        return Err(Error::Contract("model has no gating modules to train".into()));
    }
    run_epochs(model, data, cfg, Phase::CgmOnly, 0..cfg.epochs_cgm_only)
}

/// All parameters, epochs `epochs_cgm_only..epochs_total`.
pub fn train_phase_joint(model: &mut UrnetModel, data: &TrainData, cfg: &TrainConfig) -> Result<TrainReport> {
    run_epochs(model, data, cfg, Phase::Joint, cfg.epochs_cgm_only..cfg.epochs_total)
}

/// Both phases in order.
pub fn train_urnet(model: &mut UrnetModel, data: &TrainData, cfg: &TrainConfig) -> Result<TrainReport> {
    let mut report = train_phase_cgm_only(model, data, cfg)?;
    report.extend(train_phase_joint(model, data, cfg)?);
    Ok(report)
}

/// Plain training with a random `round(S·N)` subset of blocks kept each
/// iteration; with the scale fixed at 1 this is ordinary backbone training.
pub fn train_baseline(model: &mut UrnetModel, data: &TrainData, cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.baseline_mode != BaselineMode::RandomDrop {
        return Err(Error::Config("train_baseline requires baseline_mode = random_drop".into()));
    }
    run_epochs(model, data, cfg, Phase::Baseline, 0..cfg.epochs_total)
}

/// Backbone training for `epochs` with a random `round(S·N)` blocks kept,
/// `S` uniform on `[scale_min, 1]`; `scale_min = 1` is ordinary training.
/// Uses the optimizer, batch size, augmentation and seed of `cfg` and a
/// fresh step schedule from its initial learning rate.
pub fn pretrain_backbone(
    model: &mut UrnetModel,
    data: &TrainData,
    cfg: &TrainConfig,
    epochs: usize,
    scale_min: f64,
) -> Result<TrainReport> {
    let pre = TrainConfig {
        scale: ScaleSchedule::Range { min: scale_min, max: 1.0 },
        baseline_mode: BaselineMode::RandomDrop,
        epochs_total: epochs,
        epochs_cgm_only: 0,
        lr_schedule: crate::trainer::step_schedule(epochs, cfg.lr_at(0)),
        ..cfg.clone()
    };
    run_epochs(model, data, &pre, Phase::Pretrain, 0..epochs)
}
