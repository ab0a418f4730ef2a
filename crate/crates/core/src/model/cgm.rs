//! Conditional Gating Module and the Gate-Activation function.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::layers::{uniform_tensor, Linear, ParamBinder, ParamGroup};
use crate::model::{GateMode, ScaleParam};
use crate::tensor::Tensor;

/// Initial bias of the gate logit; positive so training starts with open gates.
pub const GATE_BIAS_INIT: f64 = 1.0;

/// Two fully connected layers around a `ceil((C+1)/r)` bottleneck, mapping
/// pooled block features concatenated with the scale to one gate logit.
#[derive(Clone, Debug, PartialEq)]
pub struct CgmParams {
    pub reduce: Linear,
    pub expand: Linear,
}

pub fn hidden_width(channels: usize, reduction: usize) -> usize {
    (channels + 1).div_ceil(reduction.max(1)).max(1)
}

impl CgmParams {
    pub fn new<R: Rng + ?Sized>(name: &str, channels: usize, reduction: usize, rng: &mut R) -> Self {
        let d_in = channels + 1;
        let hidden = hidden_width(channels, reduction);
        // Fan-in uniform bounds, as for an ordinary fully connected layer.
        let b_in = 1.0 / (d_in as f64).sqrt();
        let mut w1 = uniform_tensor(&[d_in, hidden], b_in, rng);
        // The scale row starts at zero: every gate opens at every S until
        // training says otherwise.
        w1.data_mut()[channels * hidden..].fill(0.0);
        let b1 = uniform_tensor(&[hidden], b_in, rng);
        let w2 = uniform_tensor(&[hidden, 1], 1.0 / (hidden as f64).sqrt(), rng);
        Self {
            reduce: Linear::new(&format!("{name}.fc1"), ParamGroup::Gate, w1, b1),
            expand: Linear::new(&format!("{name}.fc2"), ParamGroup::Gate, w2, Tensor::full(&[1], GATE_BIAS_INIT)),
        }
    }

    /// A module whose weights and biases are all zero, so its logit is 0.
    pub fn zeroed(name: &str, channels: usize, reduction: usize) -> Self {
        let d_in = channels + 1;
        let hidden = hidden_width(channels, reduction);
        Self {
            reduce: Linear::new(&format!("{name}.fc1"), ParamGroup::Gate, Tensor::zeros(&[d_in, hidden]), Tensor::zeros(&[hidden])),
            expand: Linear::new(&format!("{name}.fc2"), ParamGroup::Gate, Tensor::zeros(&[hidden, 1]), Tensor::zeros(&[1])),
        }
    }

    pub fn channels(&self) -> usize {
        self.reduce.in_features() - 1
    }

    pub fn hidden(&self) -> usize {
        self.reduce.out_features()
    }

    /// Multiply-accumulates of one evaluation (both affine maps).
    pub fn macs(&self) -> u64 {
        ((self.channels() + 1) * self.hidden() + self.hidden()) as u64
    }

    /// Gate logits `z` of shape `[B]`.
    pub fn logits(&self, g: &mut Graph, binder: &mut ParamBinder, x: Var, scale: ScaleParam, use_feature_input: bool) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.channels() {
            return Err(Error::Tensor(crate::error::TensorError::Shape {
                op: "cgm_forward",
                detail: format!("input {shape:?} does not have {} channels on axis 1", self.channels()),
            }));
        }
        let b = shape[0];
        let pooled = if use_feature_input { g.global_avg_pool(x)? } else { g.constant(Tensor::zeros(&[b, self.channels()])) };
        let s = g.constant(Tensor::full(&[b, 1], scale_feature(scale, self.channels())));
        let joined = g.concat_cols(pooled, s)?;
        let h = self.reduce.forward(g, binder, joined)?;
        let h = g.relu(h)?;
        let z = self.expand.forward(g, binder, h)?;
        Ok(g.reshape(z, &[b])?)
    }
}

/// The scale input: `C·(2S − 1)`, the sum of `C` tied copies of `S`
/// mapped to `[−1, 1]`. The channel count keeps its weight training as fast
/// as a channel-sized block of copies would. Centering keeps the gradient on
/// that weight from absorbing the mean-usage error, which otherwise drives
/// gates to close harder at large `S` while usage sits above target.
pub fn scale_feature(scale: ScaleParam, channels: usize) -> f64 {
    (2.0 * scale.value() - 1.0) * channels as f64
}

/// Sigmoid mode is differentiable; binary mode emits a constant step
/// (`1` iff `z > 0`) that passes no gradient back to `z`.
pub fn gate_activation(g: &mut Graph, z: Var, mode: GateMode) -> Result<Var> {
    match mode {
        GateMode::Sigmoid => Ok(g.sigmoid(z)?),
        GateMode::Binary => {
            let step: Vec<f64> = g.data(z).iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
            let shape = g.shape(z).to_vec();
            Ok(g.constant(Tensor::new(&shape, step)?))
        }
    }
}

/// Draws one mode per gate: sigmoid with probability `p`, binary otherwise.
pub fn sample_gate_modes<R: Rng + ?Sized>(p: f64, n: usize, rng: &mut R) -> Vec<GateMode> {
    (0..n).map(|_| if rng.random::<f64>() < p { GateMode::Sigmoid } else { GateMode::Binary }).collect()
}

/// Full CGM evaluation: logits followed by the gate activation.
pub fn cgm_forward(
    g: &mut Graph,
    binder: &mut ParamBinder,
    x: Var,
    scale: ScaleParam,
    params: &CgmParams,
    mode: GateMode,
    use_feature_input: bool,
) -> Result<Var> {
    let z = params.logits(g, binder, x, scale, use_feature_input)?;
    gate_activation(g, z, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::model::layers::Trainable;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gate_of(z: f64, mode: GateMode) -> f64 {
        let mut g = Graph::new();
        let zv = g.constant(Tensor::scalar(z));
        let out = gate_activation(&mut g, zv, mode).unwrap();
        g.data(out)[0]
    }

    #[test]
    fn gate_activation_examples() {
        assert_eq!(gate_of(0.0, GateMode::Sigmoid), 0.5);
        assert_eq!(gate_of(0.0, GateMode::Binary), 0.0);
        assert!(1.0 - gate_of(20.0, GateMode::Sigmoid) < 1e-8);
        assert_eq!(gate_of(20.0, GateMode::Binary), 1.0);
        assert_eq!(gate_of(-1e-300, GateMode::Binary), 0.0);
        assert_eq!(gate_of(1e-300, GateMode::Binary), 1.0);
    }

    #[test]
    fn binary_gate_has_no_gradient() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::new(&[2], vec![0.3, -0.3]).unwrap().with_grad());
        let gate = gate_activation(&mut g, z, GateMode::Binary).unwrap();
        assert!(!g.requires_grad(gate));
        let sig = g.sigmoid(z).unwrap();
        let prod = g.scale_features(sig, gate).unwrap();
        let l = g.mean(prod).unwrap();
        g.backward(l).unwrap();
        let s = crate::graph::stable_sigmoid(0.3);
        let grad = g.grad(z).unwrap();
        assert!((grad[0] - 0.5 * s * (1.0 - s)).abs() < 1e-15);
        assert_eq!(grad[1], 0.0);
    }

    #[test]
    fn sample_modes_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_gate_modes(1.0, 54, &mut rng).iter().all(|m| *m == GateMode::Sigmoid));
        assert!(sample_gate_modes(0.0, 54, &mut rng).iter().all(|m| *m == GateMode::Binary));
    }

    #[test]
    fn sample_modes_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trials = 100_000;
        let mut sigmoid = 0usize;
        let mut total = 0usize;
        for _ in 0..trials / 54 + 1 {
            let modes = sample_gate_modes(0.1, 54, &mut rng);
            sigmoid += modes.iter().filter(|m| **m == GateMode::Sigmoid).count();
            total += modes.len();
        }
        let frac = sigmoid as f64 / total as f64;
        assert!((frac - 0.1).abs() < 0.01, "{frac}");
    }

    #[test]
    fn sample_modes_deterministic() {
        let a = sample_gate_modes(0.3, 40, &mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_gate_modes(0.3, 40, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    fn input(b: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[b, c, 3, 3], |_| rng.random_range(0.0..2.0)).unwrap()
    }

    #[test]
    fn zero_module_gives_half_or_closed() {
        let cgm = CgmParams::zeroed("cgm", 4, 2);
        let s = ScaleParam::new(0.7).unwrap();
        for (mode, want) in [(GateMode::Sigmoid, 0.5), (GateMode::Binary, 0.0)] {
            let mut g = Graph::new();
            let x = g.constant(input(3, 4, 1));
            let gate = cgm_forward(&mut g, &mut ParamBinder::frozen(), x, s, &cgm, mode, true).unwrap();
            assert_eq!(g.data(gate), [want; 3]);
        }
    }

    #[test]
    fn feature_free_gate_is_batch_constant() {
        let cgm = CgmParams::new("cgm", 4, 2, &mut ChaCha8Rng::seed_from_u64(2));
        let mut g = Graph::new();
        let x = g.constant(input(5, 4, 3));
        let gate =
            cgm_forward(&mut g, &mut ParamBinder::frozen(), x, ScaleParam::new(0.4).unwrap(), &cgm, GateMode::Sigmoid, false).unwrap();
        let d = g.data(gate);
        assert!(d.iter().all(|v| v.to_bits() == d[0].to_bits()));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let cgm = CgmParams::new("cgm", 4, 2, &mut ChaCha8Rng::seed_from_u64(2));
        let mut g = Graph::new();
        let x = g.constant(input(2, 3, 3));
        assert!(cgm_forward(&mut g, &mut ParamBinder::frozen(), x, ScaleParam::FULL, &cgm, GateMode::Sigmoid, true).is_err());
    }

    #[test]
    fn hidden_width_rounds_up() {
        assert_eq!(hidden_width(16, 2), 9);
        assert_eq!(hidden_width(64, 16), 5);
        assert_eq!(hidden_width(1, 16), 1);
    }

    #[test]
    fn sigmoid_gate_path_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cgm = CgmParams::new("cgm", 4, 2, &mut rng);
        let mut w2 = cgm.expand.weight.value.clone();
        w2.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let x = input(3, 4, 4);
        let err = grad_check(
            |g, v| {
                let mut binder = ParamBinder::new(Trainable::Everything);
                binder.preset(&cgm.expand.weight.name, v[1]);
                binder.preset(&cgm.reduce.weight.name, v[2]);
                let s = ScaleParam::new(0.35).unwrap();
                let gate = cgm_forward(g, &mut binder, v[0], s, &cgm, GateMode::Sigmoid, true)?;
                let sq = g.square(gate)?;
                Ok(g.mean(sq)?)
            },
            &[x, w2, cgm.reduce.weight.value.clone()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
