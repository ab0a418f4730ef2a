//! The user-resizable residual network.
//!
//! A stem convolution feeds N basic residual blocks, each preceded by a
//! Conditional Gating Module (CGM) that looks at the block input and the
//! requested scale `S` and decides how much of the residual branch to add.
//! A global-average-pool + linear head produces class logits.

mod block;
mod cgm;
mod layers;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchStats, BnMode, Graph, RunningStats, Var};
use crate::tensor::Tensor;

pub use block::{gated_block_forward, Projection, ResidualBlockParams};
pub use cgm::{cgm_forward, gate_activation, hidden_width, sample_gate_modes, CgmParams, GATE_BIAS_INIT};
pub use layers::{BatchNorm, Conv, Linear, Param, ParamBinder, ParamGroup, Trainable};

/// Desired fraction of residual blocks to execute, in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct ScaleParam(f64);

impl ScaleParam {
    pub const FULL: ScaleParam = ScaleParam(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(Error::InvalidScale(value))
        }
    }

    /// Clamps into `[0, 1]`; NaN maps to 0.
    pub fn clamped(value: f64) -> Self {
        Self(if value.is_nan() { 0.0 } else { value.clamp(0.0, 1.0) })
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for ScaleParam {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ScaleParam> for f64 {
    fn from(s: ScaleParam) -> f64 {
        s.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    Sigmoid,
    Binary,
}

/// How gate modes are chosen for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ModePolicy {
    /// Each CGM independently sigmoid with probability `p`, else binary.
    Train { p: f64 },
    /// All binary, closed blocks skipped where the batch agrees.
    Eval,
    /// Every CGM forced into one mode (sigmoid reproduces block attention).
    Override(GateMode),
    /// CGMs ignored, every block executed (plain residual network).
    AllOpen,
    /// CGMs ignored; a uniformly random `round(S·N)` blocks kept.
    RandomDrop,
}

/// Architecture of a [`UrnetModel`]; stored in checkpoints and validated on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub num_classes: usize,
    /// CGM reduction rate `r`.
    pub reduction: usize,
    pub use_feature_input: bool,
    /// Gate-training probability `p`.
    pub gate_training_probability: f64,
}

impl ModelSpec {
    /// 12 blocks over three stages of width 16/32/64.
    pub fn toy(num_classes: usize) -> Self {
        Self::three_stage(4, num_classes)
    }

    /// Three stages of `per_stage` blocks with widths 16/32/64 and `r = 2`.
    pub fn three_stage(per_stage: usize, num_classes: usize) -> Self {
        Self {
            in_channels: 3,
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: vec![per_stage; 3],
            num_classes,
            reduction: 2,
            use_feature_input: true,
            gate_training_probability: 0.1,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks_per_stage.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model: {m}")));
        if self.stage_channels.is_empty() || self.stage_channels.len() != self.blocks_per_stage.len() {
            return bad("stage_channels and blocks_per_stage must be non-empty and of equal length");
        }
        if self.stage_channels.contains(&0) || self.in_channels == 0 {
            return bad("channel counts must be positive");
        }
        if self.num_blocks() == 0 {
            return bad("at least one residual block is required");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.reduction == 0 {
            return bad("reduction must be positive");
        }
        if !(0.0..=1.0).contains(&self.gate_training_probability) {
            return bad("gate_training_probability must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Per-sample, per-block gate values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct GateRecord {
    /// `[B, N]` gate values.
    pub gates: Tensor,
    /// Mode used by each block's gate.
    pub modes: Vec<GateMode>,
}

impl GateRecord {
    pub fn batch(&self) -> usize {
        self.gates.shape()[0]
    }

    pub fn blocks(&self) -> usize {
        self.gates.shape()[1]
    }

    pub fn sample(&self, b: usize) -> &[f64] {
        let n = self.blocks();
        &self.gates.data()[b * n..(b + 1) * n]
    }

    /// Number of open blocks per sample (binary gates count 0 or 1).
    pub fn usage(&self) -> Vec<f64> {
        (0..self.batch()).map(|b| self.sample(b).iter().sum()).collect()
    }
}

pub struct ForwardOutput {
    pub logits: Var,
    /// `[B, N]` gate values on the graph (sigmoid columns are differentiable).
    pub gates: Var,
    pub record: GateRecord,
    /// Batch statistics gathered by train-mode batch norm, keyed by layer name.
    pub bn_updates: Vec<(String, BatchStats)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UrnetModel {
    pub spec: ModelSpec,
    pub stem_conv: Conv,
    pub stem_bn: BatchNorm,
    pub blocks: Vec<ResidualBlockParams>,
    pub cgms: Vec<CgmParams>,
    pub head: Linear,
}

impl UrnetModel {
    pub fn new<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let c0 = spec.stage_channels[0];
        let stem_conv = Conv::new("stem.conv", spec.in_channels, c0, 3, 1, rng);
        let stem_bn = BatchNorm::new("stem.bn", c0);
        let mut blocks = Vec::new();
        let mut cgms = Vec::new();
        let mut in_c = c0;
        for (stage, (&width, &count)) in spec.stage_channels.iter().zip(&spec.blocks_per_stage).enumerate() {
            for i in 0..count {
                let n = blocks.len();
                let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                cgms.push(CgmParams::new(&format!("cgm{n}"), in_c, spec.reduction, rng));
                blocks.push(ResidualBlockParams::new(&format!("block{n}"), in_c, width, stride, rng));
                in_c = width;
            }
        }
        let bound = 1.0 / (in_c as f64).sqrt();
        let head = Linear::new(
            "head",
            ParamGroup::Backbone,
            layers::uniform_tensor(&[in_c, spec.num_classes], bound, rng),
            layers::uniform_tensor(&[spec.num_classes], bound, rng),
        );
        Ok(Self { spec, stem_conv, stem_bn, blocks, cgms, head })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Replaces every CGM with an all-zero module.
    pub fn zero_cgms(&mut self) {
        for (n, cgm) in self.cgms.iter_mut().enumerate() {
            *cgm = CgmParams::zeroed(&format!("cgm{n}"), cgm.channels(), self.spec.reduction);
        }
    }

    /// All trainable parameters in a fixed order.
    pub fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.stem_conv.weight, &self.stem_bn.gamma, &self.stem_bn.beta];
        for (b, c) in self.blocks.iter().zip(&self.cgms) {
            out.extend([&c.reduce.weight, &c.reduce.bias, &c.expand.weight, &c.expand.bias]);
            out.extend([&b.conv1.weight, &b.bn1.gamma, &b.bn1.beta, &b.conv2.weight, &b.bn2.gamma, &b.bn2.beta]);
            if let Some(p) = &b.shortcut {
                out.extend([&p.conv.weight, &p.bn.gamma, &p.bn.beta]);
            }
        }
        out.extend([&self.head.weight, &self.head.bias]);
        out
    }

    /// Same order as [`UrnetModel::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.stem_conv.weight, &mut self.stem_bn.gamma, &mut self.stem_bn.beta];
        for (b, c) in self.blocks.iter_mut().zip(&mut self.cgms) {
            out.extend([&mut c.reduce.weight, &mut c.reduce.bias, &mut c.expand.weight, &mut c.expand.bias]);
            out.extend([&mut b.conv1.weight, &mut b.bn1.gamma, &mut b.bn1.beta, &mut b.conv2.weight, &mut b.bn2.gamma, &mut b.bn2.beta]);
            if let Some(p) = &mut b.shortcut {
                out.extend([&mut p.conv.weight, &mut p.bn.gamma, &mut p.bn.beta]);
            }
        }
        out.extend([&mut self.head.weight, &mut self.head.bias]);
        out
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm> {
        let mut out = vec![&self.stem_bn];
        for b in &self.blocks {
            out.extend([&b.bn1, &b.bn2]);
            if let Some(p) = &b.shortcut {
                out.push(&p.bn);
            }
        }
        out
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        let mut out = vec![&mut self.stem_bn];
        for b in &mut self.blocks {
            out.extend([&mut b.bn1, &mut b.bn2]);
            if let Some(p) = &mut b.shortcut {
                out.push(&mut p.bn);
            }
        }
        out
    }

    /// Folds train-mode batch statistics into the running statistics.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats)]) {
        let mut bns = self.batch_norms_mut();
        for (name, stats) in updates {
            if let Some(bn) = bns.iter_mut().find(|b| &b.name == name) {
                bn.running.update(stats);
            }
        }
    }

    pub fn running_stats(&self) -> Vec<(String, RunningStats)> {
        self.batch_norms().into_iter().map(|b| (b.name.clone(), b.running.clone())).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }

    /// Runs the network on `x: [B, C, H, W]` at scale `scale`.
    ///
    /// `rng` is consumed only by [`ModePolicy::Train`] (gate modes) and
    /// [`ModePolicy::RandomDrop`] (kept set).
    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        binder: &mut ParamBinder,
        x: Var,
        scale: ScaleParam,
        policy: ModePolicy,
        bn: BnMode,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(Error::Contract(format!("input must be [B, {}, H, W], got {shape:?}", self.spec.in_channels)));
        }
        let (batch, n) = (shape[0], self.num_blocks());
        let modes: Vec<GateMode> = match policy {
            ModePolicy::Train { p } => sample_gate_modes(p, n, rng),
            ModePolicy::Override(m) => vec![m; n],
            ModePolicy::Eval | ModePolicy::AllOpen | ModePolicy::RandomDrop => {
                vec![GateMode::Binary; n]
            }
        };
        let fixed: Option<Vec<f64>> = match policy {
            ModePolicy::AllOpen => Some(vec![1.0; n]),
            ModePolicy::RandomDrop => Some(random_keep_mask(scale, n, rng)),
            _ => None,
        };
        let skip = !matches!(policy, ModePolicy::Train { .. } | ModePolicy::Override(GateMode::Sigmoid));

        let mut updates = Vec::new();
        let h = self.stem_conv.forward(g, binder, x)?;
        let h = self.stem_bn.forward(g, binder, h, bn, &mut updates)?;
        let mut h = g.relu(h)?;
        let mut gate_vars = Vec::with_capacity(n);
        for (i, (block, cgm)) in self.blocks.iter().zip(&self.cgms).enumerate() {
            let gate = match &fixed {
                Some(mask) => g.constant(Tensor::full(&[batch], mask[i])),
                None => cgm_forward(g, binder, h, scale, cgm, modes[i], self.spec.use_feature_input)?,
            };
            h = gated_block_forward(g, binder, h, block, gate, modes[i], skip, bn, &mut updates)?;
            gate_vars.push(gate);
        }
        let pooled = g.global_avg_pool(h)?;
        let logits = self.head.forward(g, binder, pooled)?;
        let gates = g.stack_cols(&gate_vars)?;
        let record = GateRecord { gates: g.value(gates).clone(), modes };
        Ok(ForwardOutput { logits, gates, record, bn_updates: updates })
    }

    /// Convenience inference: evaluation-mode batch norm, no gradients.
    pub fn infer<R: Rng + ?Sized>(&self, x: &Tensor, scale: ScaleParam, policy: ModePolicy, rng: &mut R) -> Result<(Tensor, GateRecord)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &mut ParamBinder::frozen(), xv, scale, policy, BnMode::Eval, rng)?;
        Ok((g.value(out.logits).clone(), out.record))
    }
}

/// Per-block 0/1 mask keeping a uniformly random `round(S·N)`-subset.
pub fn random_keep_mask<R: Rng + ?Sized>(scale: ScaleParam, n: usize, rng: &mut R) -> Vec<f64> {
    let keep = ((scale.value() * n as f64).round() as usize).min(n);
    let mut mask = vec![0.0; n];
    for i in index::sample(rng, n, keep) {
        mask[i] = 1.0;
    }
    mask
}

/// Baseline resizing: a plain network with a random subset of blocks removed.
pub fn random_drop_forward<R: Rng + ?Sized>(x: &Tensor, scale: ScaleParam, model: &UrnetModel, rng: &mut R) -> Result<Tensor> {
    Ok(model.infer(x, scale, ModePolicy::RandomDrop, rng)?.0)
}
