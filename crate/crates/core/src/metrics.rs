//! MAC accounting, accuracy and block-usage statistics, usage maps and
//! budget-to-scale calibration.
//!
//! All costs are multiply-accumulate counts of convolutional and linear
//! layers. Batch norm, activations and pooling count as zero.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ModePolicy, ScaleParam, UrnetModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        out_h: usize,
        out_w: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    /// Batch norm, activations, pooling.
    Free,
}

pub fn count_macs(layer: LayerSpec) -> u64 {
    match layer {
        LayerSpec::Conv { in_channels, out_channels, kernel, out_h, out_w } => {
            (in_channels * out_channels * kernel * kernel * out_h * out_w) as u64
        }
        LayerSpec::Linear { in_features, out_features } => (in_features * out_features) as u64,
        LayerSpec::Free => 0,
    }
}

/// Per-part MAC counts of one model at one input resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsModel {
    pub stem: u64,
    pub head: u64,
    /// Skippable residual-branch cost per block.
    pub blocks: Vec<u64>,
    /// Projection shortcut per block (0 for identity shortcuts); never skipped.
    pub shortcuts: Vec<u64>,
    pub cgms: Vec<u64>,
}

impl FlopsModel {
    pub fn new(model: &UrnetModel, height: usize, width: usize) -> Self {
        let conv = |c: &crate::model::Conv, h: usize, w: usize| {
            let (oh, ow) = c.output_size(h, w);
            let macs = count_macs(LayerSpec::Conv {
                in_channels: c.in_channels(),
                out_channels: c.out_channels(),
                kernel: c.kernel(),
                out_h: oh,
                out_w: ow,
            });
            (macs, oh, ow)
        };
        let linear =
            |l: &crate::model::Linear| count_macs(LayerSpec::Linear { in_features: l.in_features(), out_features: l.out_features() });
        let (stem, mut h, mut w) = conv(&model.stem_conv, height, width);
        let mut blocks = Vec::new();
        let mut shortcuts = Vec::new();
        let mut cgms = Vec::new();
        for (b, c) in model.blocks.iter().zip(&model.cgms) {
            cgms.push(linear(&c.reduce) + linear(&c.expand));
            let (c1, oh, ow) = conv(&b.conv1, h, w);
            let (c2, _, _) = conv(&b.conv2, oh, ow);
            blocks.push(c1 + c2);
            shortcuts.push(b.shortcut.as_ref().map_or(0, |p| conv(&p.conv, h, w).0));
            (h, w) = (oh, ow);
        }
        Self { stem, head: linear(&model.head), blocks, shortcuts, cgms }
    }

    /// Cost paid regardless of gates: stem, head, CGMs and projection shortcuts.
    pub fn fixed(&self) -> u64 {
        self.stem + self.head + self.cgms.iter().sum::<u64>() + self.shortcuts.iter().sum::<u64>()
    }

    /// Backbone cost with every block executed, CGMs excluded.
    pub fn backbone_full(&self) -> u64 {
        self.stem + self.head + self.blocks.iter().sum::<u64>() + self.shortcuts.iter().sum::<u64>()
    }

    pub fn total_full(&self) -> u64 {
        self.fixed() + self.blocks.iter().sum::<u64>()
    }

    /// `fixed + Σ gate_n · block_n` for one sample's gates.
    pub fn sample_macs(&self, gates: &[f64]) -> f64 {
        self.fixed() as f64 + gates.iter().zip(&self.blocks).map(|(g, &m)| g * m as f64).sum::<f64>()
    }

    pub fn cgm_overhead(&self) -> f64 {
        self.cgms.iter().sum::<u64>() as f64 / self.backbone_full() as f64
    }
}

/// Usage and cost statistics over a dataset at one scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UsageStats {
    pub scale: f64,
    /// Fraction of samples for which each block is open.
    pub block_mean: Vec<f64>,
    /// Population variance of each block's gate over samples.
    pub block_var: Vec<f64>,
    /// Mean and population std of the number of open blocks per sample.
    pub usage_mean: f64,
    pub usage_std: f64,
    pub flops_mean: f64,
    pub flops_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Top-1 accuracy as a fraction.
    pub accuracy: f64,
    pub stats: UsageStats,
    /// Gates per sample, in dataset order.
    pub sample_gates: Vec<Vec<f64>>,
    pub sample_macs: Vec<f64>,
}

/// One row of the evaluation CSV and summary JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleSummary {
    pub scale: f64,
    pub accuracy: f64,
    pub usage_mean: f64,
    pub usage_std: f64,
    pub flops_mean: f64,
    pub flops_std: f64,
}

impl From<&Evaluation> for ScaleSummary {
    fn from(e: &Evaluation) -> Self {
        let s = &e.stats;
        Self {
            scale: s.scale,
            accuracy: e.accuracy,
            usage_mean: s.usage_mean,
            usage_std: s.usage_std,
            flops_mean: s.flops_mean,
            flops_std: s.flops_std,
        }
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Evaluation-mode accuracy and usage at `scale`. `seed` drives the
/// random-drop policy only; the model is not modified.
pub fn evaluate(
    model: &UrnetModel,
    ds: &Dataset,
    scale: ScaleParam,
    policy: ModePolicy,
    batch_size: usize,
    seed: u64,
) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let [_, h, w] = ds.image_shape();
    let flops = FlopsModel::new(model, h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0usize;
    let mut sample_gates = Vec::with_capacity(ds.len());
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (x, labels) = ds.batch(chunk);
        let (logits, record) = model.infer(&x, scale, policy, &mut rng)?;
        let k = logits.shape()[1];
        for (i, &label) in labels.iter().enumerate() {
            let row = &logits.data()[i * k..(i + 1) * k];
            let pred = (0..k).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).expect("classes");
            correct += usize::from(pred == label);
            sample_gates.push(record.sample(i).to_vec());
        }
    }
    let n_blocks = model.num_blocks();
    let m = sample_gates.len() as f64;
    let block_mean: Vec<f64> = (0..n_blocks).map(|j| sample_gates.iter().map(|g| g[j]).sum::<f64>() / m).collect();
    let block_var: Vec<f64> = (0..n_blocks).map(|j| sample_gates.iter().map(|g| (g[j] - block_mean[j]).powi(2)).sum::<f64>() / m).collect();
    let usage: Vec<f64> = sample_gates.iter().map(|g| g.iter().sum()).collect();
    let sample_macs: Vec<f64> = sample_gates.iter().map(|g| flops.sample_macs(g)).collect();
    let (usage_mean, usage_std) = mean_std(&usage);
    let (flops_mean, flops_std) = mean_std(&sample_macs);
    Ok(Evaluation {
        accuracy: correct as f64 / m,
        stats: UsageStats { scale: scale.value(), block_mean, block_var, usage_mean, usage_std, flops_mean, flops_std },
        sample_gates,
        sample_macs,
    })
}

/// Evaluation at every grid point, as summary rows.
pub fn evaluate_grid(
    model: &UrnetModel,
    ds: &Dataset,
    grid: &[ScaleParam],
    policy: ModePolicy,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<ScaleSummary>> {
    if grid.is_empty() {
        return Err(Error::Config("scale grid is empty".into()));
    }
    grid.iter().map(|&s| Ok(ScaleSummary::from(&evaluate(model, ds, s, policy, batch_size, seed)?))).collect()
}

/// `N × |grid|` matrix of per-block open frequency.
pub fn usage_map(model: &UrnetModel, ds: &Dataset, grid: &[ScaleParam], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    if grid.is_empty() {
        return Err(Error::Config("scale grid is empty".into()));
    }
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("scale grid must be sorted ascending".into()));
    }
    let columns: Vec<Vec<f64>> =
        grid.iter().map(|&s| Ok(evaluate(model, ds, s, ModePolicy::Eval, batch_size, 0)?.stats.block_mean)).collect::<Result<_>>()?;
    Ok((0..model.num_blocks()).map(|n| columns.iter().map(|c| c[n]).collect()).collect())
}

/// Largest `S` whose linearly interpolated mean cost is within `budget`,
/// clamped to the calibrated range. Points must be sorted by `S` with
/// non-decreasing cost.
pub fn budget_to_scale(calibration: &[(f64, f64)], budget: f64) -> Result<ScaleParam> {
    let (first, last) = match (calibration.first(), calibration.last()) {
        (Some(f), Some(l)) => (*f, *l),
        _ => return Err(Error::Config("calibration table is empty".into())),
    };
    if calibration.windows(2).any(|w| w[1].0 < w[0].0 || w[1].1 < w[0].1) {
        return Err(Error::Config("calibration must be sorted by scale with non-decreasing cost".into()));
    }
    if budget >= last.1 {
        return ScaleParam::new(last.0);
    }
    if budget < first.1 {
        return ScaleParam::new(first.0);
    }
    // Last segment whose start is affordable; the answer lies inside it.
    let i = calibration.iter().rposition(|p| p.1 <= budget).expect("budget >= first cost");
    let (s0, f0) = calibration[i];
    let (s1, f1) = calibration[i + 1];
    let s = if f1 > f0 { s0 + (s1 - s0) * (budget - f0) / (f1 - f0) } else { s0 };
    ScaleParam::new(s.clamp(s0, s1))
}

/// Running maximum of cost over scale. Returns whether anything changed.
pub fn monotone_envelope(calibration: &[(f64, f64)]) -> (Vec<(f64, f64)>, bool) {
    let mut out = Vec::with_capacity(calibration.len());
    let mut peak = f64::NEG_INFINITY;
    let mut changed = false;
    for &(s, f) in calibration {
        if f < peak {
            changed = true;
        }
        peak = peak.max(f);
        out.push((s, peak));
    }
    (out, changed)
}

pub const SUMMARY_HEADER: &str = "scale,accuracy,usage_mean,usage_std,flops_mean,flops_std";

pub fn write_summary_csv(rows: &[ScaleSummary], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{},{},{}\n", r.scale, r.accuracy, r.usage_mean, r.usage_std, r.flops_mean, r.flops_std));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_usage_map_csv(map: &[Vec<f64>], grid: &[ScaleParam], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = grid.iter().map(|s| s.value().to_string()).collect();
    writeln!(f, "block,{}", header.join(","))?;
    for (n, row) in map.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{n},{}", cells.join(","))?;
    }
    f.flush()?;
    Ok(())
}
