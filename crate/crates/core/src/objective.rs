//! Scale loss and the joint training objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{GateRecord, ScaleParam};

/// Components of one evaluation of `L = L_c + β·L_s`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub classification: f64,
    pub scale: f64,
    pub beta: f64,
}

/// Batch mean of `(mean_n gate_n − S)²` over a `[B, N]` gate matrix.
/// Only graph-differentiable (sigmoid) gates receive gradient.
pub fn scale_loss(g: &mut Graph, gates: Var, scale: ScaleParam) -> Result<Var> {
    let shape = g.shape(gates);
    if shape.len() != 2 || shape[1] == 0 {
        return Err(Error::Contract(format!("scale loss needs a [B, N] gate matrix, got {shape:?}")));
    }
    let usage = g.row_mean(gates)?;
    let diff = g.add_scalar(usage, -scale.value())?;
    let sq = g.square(diff)?;
    Ok(g.mean(sq)?)
}

/// The same quantity computed from recorded values alone.
pub fn scale_loss_value(record: &GateRecord, scale: ScaleParam) -> Result<f64> {
    if record.gates.numel() == 0 || record.modes.is_empty() {
        return Err(Error::Contract("empty gate record".into()));
    }
    let b = record.batch();
    let n = record.blocks() as f64;
    let total: f64 = (0..b)
        .map(|i| {
            let mean = record.sample(i).iter().sum::<f64>() / n;
            (mean - scale.value()).powi(2)
        })
        .sum();
    Ok(total / b as f64)
}

/// `L_c + β·L_s` with its breakdown.
pub fn total_loss(g: &mut Graph, logits: Var, labels: &[usize], gates: Var, scale: ScaleParam, beta: f64) -> Result<(Var, LossBreakdown)> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!("beta must be a finite non-negative number, got {beta}")));
    }
    let lc = g.softmax_cross_entropy(logits, labels)?;
    let ls = scale_loss(g, gates, scale)?;
    let weighted = g.scale(ls, beta)?;
    let total = g.add(lc, weighted)?;
    let breakdown = LossBreakdown { total: g.data(total)[0], classification: g.data(lc)[0], scale: g.data(ls)[0], beta };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::GateMode;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn loss_of(gates: &[f64], s: f64) -> f64 {
        let mut g = Graph::new();
        let v = g.constant(Tensor::new(&[1, gates.len()], gates.to_vec()).unwrap());
        let l = scale_loss(&mut g, v, ScaleParam::new(s).unwrap()).unwrap();
        g.data(l)[0]
    }

    #[test]
    fn scale_loss_examples() {
        assert_eq!(loss_of(&[0.3; 6], 0.3), 0.0);
        assert_eq!(loss_of(&[1.0, 1.0, 0.0, 0.0], 1.0), 0.25);
        assert!((loss_of(&[0.2, 0.4, 0.6, 0.8], 0.3) - 0.04).abs() < 1e-15);
    }

    #[test]
    fn empty_record_rejected() {
        let rec = GateRecord { gates: Tensor::zeros(&[1, 1]), modes: vec![] };
        assert!(scale_loss_value(&rec, ScaleParam::FULL).is_err());
    }

    #[test]
    fn total_loss_composition() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[1, 2]));
        let gates = g.constant(Tensor::new(&[1, 4], vec![1.0, 1.0, 0.0, 0.0]).unwrap());
        let (t, b) = total_loss(&mut g, logits, &[0], gates, ScaleParam::FULL, 0.0).unwrap();
        assert_eq!(g.data(t)[0], b.classification);
        let (_, b) = total_loss(&mut g, logits, &[0], gates, ScaleParam::FULL, 2.0).unwrap();
        assert_eq!(b.scale, 0.25);
        assert_eq!(b.total, b.classification + 2.0 * 0.25);
        assert!(total_loss(&mut g, logits, &[0], gates, ScaleParam::FULL, -1.0).is_err());
    }

    #[test]
    fn one_step_moves_mean_toward_target() {
        // Pure scale-loss descent on sigmoid gates.
        let z0 = vec![0.8, -0.1, 1.2, 0.4];
        for s in [0.1, 0.9] {
            let mut g = Graph::new();
            let z = g.leaf(Tensor::new(&[1, 4], z0.clone()).unwrap().with_grad());
            let gates = g.sigmoid(z).unwrap();
            let l = scale_loss(&mut g, gates, ScaleParam::new(s).unwrap()).unwrap();
            let l = g.scale(l, 8.0).unwrap();
            g.backward(l).unwrap();
            let before: f64 = g.data(gates).iter().sum::<f64>() / 4.0;
            let stepped: Vec<f64> = z0.iter().zip(g.grad(z).unwrap()).map(|(a, d)| a - 0.5 * d).collect();
            let after: f64 = stepped.iter().map(|&v| crate::graph::stable_sigmoid(v)).sum::<f64>() / 4.0;
            assert!((after - s).abs() < (before - s).abs(), "s={s}: {before} -> {after}");
        }
    }

    proptest! {
        #[test]
        fn permutation_invariant(mut gates in prop::collection::vec(0.0f64..1.0, 1..20), s in 0.0f64..1.0, seed in any::<u64>()) {
            let a = loss_of(&gates, s);
            let n = gates.len();
            gates.rotate_left((seed as usize) % n);
            gates.reverse();
            let b = loss_of(&gates, s);
            prop_assert!((a - b).abs() <= 1e-15);
        }

        #[test]
        fn minimized_at_mean(gates in prop::collection::vec(0.0f64..1.0, 1..20)) {
            let mean = gates.iter().sum::<f64>() / gates.len() as f64;
            let at_mean = loss_of(&gates, mean);
            for k in 0..=20 {
                let s = k as f64 / 20.0;
                prop_assert!(loss_of(&gates, s) >= at_mean - 1e-15);
                prop_assert!((loss_of(&gates, s) - (mean - s).powi(2)).abs() < 1e-14);
            }
        }

        #[test]
        fn graph_and_value_agree(vals in prop::collection::vec(0.0f64..1.0, 6), s in 0.0f64..1.0) {
            let rec = GateRecord { gates: Tensor::new(&[2, 3], vals.clone()).unwrap(), modes: vec![GateMode::Sigmoid; 3] };
            let mut g = Graph::new();
            let v = g.constant(rec.gates.clone());
            let l = scale_loss(&mut g, v, ScaleParam::new(s).unwrap()).unwrap();
            prop_assert!((g.data(l)[0] - scale_loss_value(&rec, ScaleParam::new(s).unwrap()).unwrap()).abs() < 1e-15);
        }
    }
}
