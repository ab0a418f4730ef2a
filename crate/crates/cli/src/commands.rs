use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use urnet_core::data::{load_checkpoint, save_checkpoint, Dataset, TrainState};
use urnet_core::metrics::{
    budget_to_scale, evaluate_grid, monotone_envelope, usage_map as block_usage_map, write_summary_csv, write_usage_map_csv, FlopsModel,
    ScaleSummary,
};
use urnet_core::model::{GateMode, ModePolicy, ScaleParam, UrnetModel};
use urnet_core::trainer::{
    pretrain_backbone, train_baseline, train_phase_cgm_only, train_phase_joint, BaselineMode, EpochRecord, ScaleSchedule, TrainData,
    TrainReport,
};
use urnet_core::{Error, Result};

use crate::config::{parse_grid, RunConfig};
use crate::{EvalArgs, GateOverride, TrainMode};

pub struct TrainOverrides {
    pub mode: TrainMode,
    pub p: Option<f64>,
    pub beta: Option<f64>,
    pub range: Option<Vec<f64>>,
    pub s_fixed: Option<f64>,
    pub sigma: Option<f64>,
    pub anneal: Option<usize>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

/// Default σ and annealing length of the compression mode.
const FIXED_SIGMA: f64 = 0.1;
const FIXED_ANNEAL: usize = 5;

fn apply_overrides(cfg: &mut RunConfig, o: &TrainOverrides) -> Result<()> {
    if let Some(p) = o.p {
        cfg.train.p = p;
        cfg.model.gate_training_probability = p;
    }
    if let Some(b) = o.beta {
        cfg.train.beta = b;
    }
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    cfg.train.seed = cfg.seed;
    if let Some(dir) = &o.output_dir {
        cfg.output_dir = dir.clone();
    }
    let fixed_flags = o.s_fixed.is_some() || o.sigma.is_some() || o.anneal.is_some();
    match o.mode {
        TrainMode::Urnet | TrainMode::BaselineRandom => {
            if fixed_flags {
                return Err(Error::Config("--s-fixed, --sigma and --anneal apply to --mode fixed only".into()));
            }
            if let Some(r) = &o.range {
                cfg.train.scale = ScaleSchedule::Range { min: r[0], max: r[1] };
            }
            if !matches!(cfg.train.scale, ScaleSchedule::Range { .. }) {
                return Err(Error::Config("this mode needs a scale range (train.scale.range or --range)".into()));
            }
            cfg.train.baseline_mode = if o.mode == TrainMode::BaselineRandom { BaselineMode::RandomDrop } else { BaselineMode::None };
        }
        TrainMode::Fixed => {
            if o.range.is_some() {
                return Err(Error::Config("--range does not apply to --mode fixed".into()));
            }
            let (s0, sigma0, anneal0) = match cfg.train.scale {
                ScaleSchedule::Fixed { s_fixed, sigma, anneal_epochs } => (Some(s_fixed), sigma, anneal_epochs),
                ScaleSchedule::Range { .. } => (None, FIXED_SIGMA, FIXED_ANNEAL),
            };
            let s_fixed = o.s_fixed.or(s0).ok_or_else(|| Error::Config("--mode fixed needs --s-fixed".into()))?;
            cfg.train.scale =
                ScaleSchedule::Fixed { s_fixed, sigma: o.sigma.unwrap_or(sigma0), anneal_epochs: o.anneal.unwrap_or(anneal0) };
            cfg.train.baseline_mode = BaselineMode::None;
        }
    }
    Ok(())
}

fn mode_name(mode: TrainMode) -> &'static str {
    match mode {
        TrainMode::Urnet => "urnet",
        TrainMode::Fixed => "fixed",
        TrainMode::BaselineRandom => "baseline-random",
    }
}

/// Written to `summary.json` at the end of `train`.
#[derive(Serialize, Deserialize)]
pub struct TrainSummary {
    pub mode: String,
    pub config: RunConfig,
    pub checkpoints: Vec<String>,
    pub epochs: usize,
    pub final_epoch: Option<EpochRecord>,
    /// Test-set results at the paper's scale columns.
    pub test: Vec<ScaleSummary>,
    pub backbone_macs: u64,
    pub cgm_macs: u64,
    pub cgm_overhead: f64,
}

fn save(
    cfg: &RunConfig,
    model: &UrnetModel,
    name: &str,
    phase: &str,
    epochs: usize,
    data: &Dataset,
    saved: &mut Vec<String>,
) -> Result<()> {
    let state = TrainState { phase: phase.into(), epochs_completed: epochs, seed: cfg.seed, tensors: Vec::new() };
    save_checkpoint(model, &state, &data.normalization, cfg.output(name)?)?;
    log::info!("wrote {}", cfg.output(name)?.display());
    saved.push(name.into());
    Ok(())
}

pub fn train(config: &Path, o: &TrainOverrides, init: Option<&Path>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    apply_overrides(&mut cfg, o)?;
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let report_csv = cfg.output("report.csv")?;
    if report_csv.exists() {
        std::fs::remove_file(&report_csv)?;
    }
    let splits = cfg.dataset.load()?;
    let data = TrainData { train: &splits.train, val: splits.val.as_ref(), report_csv: Some(report_csv) };

    let mut saved = Vec::new();
    let mut report = TrainReport::default();
    let mut model = match init {
        Some(path) => load_checkpoint(path, Some(&cfg.model))?.model,
        None => {
            let mut m = UrnetModel::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
            if cfg.pretrain_epochs > 0 {
                report.extend(pretrain_backbone(&mut m, &data, &cfg.train, cfg.pretrain_epochs, cfg.pretrain_scale_min)?);
                save(&cfg, &m, "pretrain.ckpt", "pretrain", cfg.pretrain_epochs, &splits.train, &mut saved)?;
            }
            m
        }
    };

    let policy = match o.mode {
        TrainMode::BaselineRandom => {
            report.extend(train_baseline(&mut model, &data, &cfg.train)?);
            ModePolicy::RandomDrop
        }
        TrainMode::Urnet | TrainMode::Fixed => {
            if cfg.train.epochs_cgm_only > 0 {
                report.extend(train_phase_cgm_only(&mut model, &data, &cfg.train)?);
                save(&cfg, &model, "phase1.ckpt", "cgm_only", cfg.train.epochs_cgm_only, &splits.train, &mut saved)?;
            }
            report.extend(train_phase_joint(&mut model, &data, &cfg.train)?);
            ModePolicy::Eval
        }
    };
    save(&cfg, &model, "final.ckpt", "final", cfg.train.epochs_total, &splits.train, &mut saved)?;

    let grid: Vec<ScaleParam> = [0.2, 0.4, 0.6, 0.8, 1.0].iter().map(|&s| ScaleParam::new(s)).collect::<Result<_>>()?;
    let test = evaluate_grid(&model, &splits.test, &grid, policy, cfg.eval_batch_size, cfg.seed)?;
    let [_, h, w] = splits.test.image_shape();
    let flops = FlopsModel::new(&model, h, w);
    let summary = TrainSummary {
        mode: mode_name(o.mode).into(),
        checkpoints: saved,
        epochs: report.epochs.len(),
        final_epoch: report.last().cloned(),
        test,
        backbone_macs: flops.backbone_full(),
        cgm_macs: flops.cgms.iter().sum(),
        cgm_overhead: flops.cgm_overhead(),
        config: cfg.clone(),
    };
    std::fs::write(cfg.output("summary.json")?, serde_json::to_string_pretty(&summary)? + "\n")?;
    for row in &summary.test {
        println!("S={:.2} accuracy {:.4} usage {:.2} ± {:.2}", row.scale, row.accuracy, row.usage_mean, row.usage_std);
    }
    Ok(())
}

struct Loaded {
    cfg: RunConfig,
    model: UrnetModel,
    test: Dataset,
    grid: Vec<ScaleParam>,
}

fn load_for_eval(args: &EvalArgs) -> Result<Loaded> {
    let cfg = RunConfig::load(&args.config)?;
    cfg.validate()?;
    let grid = parse_grid(&args.grid)?.into_iter().map(ScaleParam::new).collect::<Result<Vec<_>>>()?;
    let ckpt = load_checkpoint(&args.checkpoint, Some(&cfg.model))?;
    let test = cfg.dataset.load_test()?;
    if ckpt.normalization != test.normalization {
        log::warn!("checkpoint normalization differs from the configured dataset's");
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    Ok(Loaded { cfg, model: ckpt.model, test, grid })
}

pub fn eval(args: &EvalArgs, gate_override: Option<GateOverride>, name: &str) -> Result<()> {
    let l = load_for_eval(args)?;
    let policy = match gate_override {
        None | Some(GateOverride::Binary) => ModePolicy::Eval,
        Some(GateOverride::Sigmoid) => ModePolicy::Override(GateMode::Sigmoid),
        Some(GateOverride::RandomDrop) => ModePolicy::RandomDrop,
    };
    let rows = evaluate_grid(&l.model, &l.test, &l.grid, policy, l.cfg.eval_batch_size, l.cfg.seed)?;
    let path = l.cfg.output(name)?;
    write_summary_csv(&rows, &path)?;
    for r in &rows {
        println!(
            "S={:.2} accuracy {:.4} usage {:.2} ± {:.2} MACs {:.4e} ± {:.2e}",
            r.scale, r.accuracy, r.usage_mean, r.usage_std, r.flops_mean, r.flops_std
        );
    }
    log::info!("wrote {}", path.display());
    Ok(())
}

pub fn usage_map(args: &EvalArgs, name: &str) -> Result<()> {
    let l = load_for_eval(args)?;
    let map = block_usage_map(&l.model, &l.test, &l.grid, l.cfg.eval_batch_size)?;
    let path = l.cfg.output(name)?;
    write_usage_map_csv(&map, &l.grid, &path)?;
    log::info!("wrote {} ({} blocks × {} scales)", path.display(), map.len(), l.grid.len());
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationPoint {
    pub scale: f64,
    pub flops_mean: f64,
}

/// `measured` as evaluated; `table` is its running maximum over scale,
/// which is what budgets resolve against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    pub measured: Vec<CalibrationPoint>,
    pub table: Vec<CalibrationPoint>,
    pub monotone: bool,
}

pub fn calibrate(args: &EvalArgs, name: &str) -> Result<()> {
    let l = load_for_eval(args)?;
    if l.grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("calibration grid must be strictly increasing".into()));
    }
    let rows = evaluate_grid(&l.model, &l.test, &l.grid, ModePolicy::Eval, l.cfg.eval_batch_size, l.cfg.seed)?;
    let measured: Vec<(f64, f64)> = rows.iter().map(|r| (r.scale, r.flops_mean)).collect();
    let (table, changed) = monotone_envelope(&measured);
    if changed {
        log::warn!("mean cost is not monotone in the scale; resolving against its running maximum");
    }
    let points = |v: &[(f64, f64)]| v.iter().map(|&(scale, flops_mean)| CalibrationPoint { scale, flops_mean }).collect();
    let cal = Calibration { measured: points(&measured), table: points(&table), monotone: !changed };
    let path = l.cfg.output(name)?;
    std::fs::write(&path, serde_json::to_string_pretty(&cal)? + "\n")?;
    log::info!("wrote {}", path.display());
    Ok(())
}

pub fn resolve(calibration: &Path, budget: f64) -> Result<()> {
    let text = std::fs::read_to_string(calibration).map_err(|e| Error::Data(format!("{}: {e}", calibration.display())))?;
    let cal: Calibration = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", calibration.display())))?;
    if !budget.is_finite() {
        return Err(Error::Config(format!("budget must be finite, got {budget}")));
    }
    let table: Vec<(f64, f64)> = cal.table.iter().map(|p| (p.scale, p.flops_mean)).collect();
    println!("{}", budget_to_scale(&table, budget)?.value());
    Ok(())
}
