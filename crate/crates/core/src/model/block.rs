//! Basic residual blocks and their gated evaluation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{BatchStats, BnMode, Graph, Var};
use crate::model::layers::{BatchNorm, Conv, ParamBinder};
use crate::model::GateMode;

/// Projection shortcut used when a block changes resolution or width.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub conv: Conv,
    pub bn: BatchNorm,
}

/// `F(X) = bn2(conv2(relu(bn1(conv1(X)))))` plus an optional projection
/// shortcut.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlockParams {
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bn2: BatchNorm,
    pub shortcut: Option<Projection>,
}

impl ResidualBlockParams {
    pub fn new<R: Rng + ?Sized>(name: &str, in_c: usize, out_c: usize, stride: usize, rng: &mut R) -> Self {
        let shortcut = (stride != 1 || in_c != out_c).then(|| Projection {
            conv: Conv::new(&format!("{name}.shortcut.conv"), in_c, out_c, 1, stride, rng),
            bn: BatchNorm::new(&format!("{name}.shortcut.bn"), out_c),
        });
        Self {
            conv1: Conv::new(&format!("{name}.conv1"), in_c, out_c, 3, stride, rng),
            bn1: BatchNorm::new(&format!("{name}.bn1"), out_c),
            conv2: Conv::new(&format!("{name}.conv2"), out_c, out_c, 3, 1, rng),
            bn2: BatchNorm::new(&format!("{name}.bn2"), out_c),
            shortcut,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv1.out_channels()
    }

    pub fn stride(&self) -> usize {
        self.conv1.stride
    }

    /// The residual branch `F(X)`.
    pub fn residual(
        &self,
        g: &mut Graph,
        binder: &mut ParamBinder,
        x: Var,
        bn: BnMode,
        updates: &mut Vec<(String, BatchStats)>,
    ) -> Result<Var> {
        let h = self.conv1.forward(g, binder, x)?;
        let h = self.bn1.forward(g, binder, h, bn, updates)?;
        let h = g.relu(h)?;
        let h = self.conv2.forward(g, binder, h)?;
        self.bn2.forward(g, binder, h, bn, updates)
    }

    /// The identity or projection path, which always runs.
    pub fn shortcut(
        &self,
        g: &mut Graph,
        binder: &mut ParamBinder,
        x: Var,
        bn: BnMode,
        updates: &mut Vec<(String, BatchStats)>,
    ) -> Result<Var> {
        match &self.shortcut {
            None => Ok(x),
            Some(p) => {
                let h = p.conv.forward(g, binder, x)?;
                p.bn.forward(g, binder, h, bn, updates)
            }
        }
    }
}

/// Evaluates `Y = relu(shortcut(X) + gate·F(X))`.
///
/// With `skip_compute` (binary mode only) and a gate shared by the whole
/// batch, a closed block never evaluates `F`: an identity block returns `X`
/// itself and a projection block returns `relu(shortcut(X))`. Since block
/// inputs are post-activation (non-negative), this equals the masked result
/// bit for bit. Mixed gates fall back to compute-then-mask.
#[allow(clippy::too_many_arguments)]
pub fn gated_block_forward(
    g: &mut Graph,
    binder: &mut ParamBinder,
    x: Var,
    block: &ResidualBlockParams,
    gate: Var,
    mode: GateMode,
    skip_compute: bool,
    bn: BnMode,
    updates: &mut Vec<(String, BatchStats)>,
) -> Result<Var> {
    if skip_compute && mode == GateMode::Sigmoid {
        return Err(Error::Contract("skip_compute requires binary gates".into()));
    }
    if skip_compute {
        let gv = g.data(gate);
        let uniform = gv.iter().all(|v| v.to_bits() == gv[0].to_bits());
        if uniform && gv[0] == 0.0 {
            return match block.shortcut {
                None => Ok(x),
                Some(_) => {
                    let s = block.shortcut(g, binder, x, bn, updates)?;
                    Ok(g.relu(s)?)
                }
            };
        }
        if uniform && gv[0] == 1.0 {
            let s = block.shortcut(g, binder, x, bn, updates)?;
            let f = block.residual(g, binder, x, bn, updates)?;
            let y = g.add(s, f)?;
            return Ok(g.relu(y)?);
        }
    }
    let s = block.shortcut(g, binder, x, bn, updates)?;
    let f = block.residual(g, binder, x, bn, updates)?;
    let f = g.scale_features(f, gate)?;
    let y = g.add(s, f)?;
    Ok(g.relu(y)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bits(d: &[f64]) -> Vec<u64> {
        d.iter().map(|v| v.to_bits()).collect()
    }

    fn setup(seed: u64, in_c: usize, out_c: usize, stride: usize) -> (ResidualBlockParams, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = ResidualBlockParams::new("b", in_c, out_c, stride, &mut rng);
        let x = Tensor::from_fn(&[3, in_c, 6, 6], |_| rng.random_range(-1.0f64..1.0).max(0.0)).unwrap();
        (block, x)
    }

    fn run(block: &ResidualBlockParams, x: &Tensor, gate: &[f64], mode: GateMode, skip: bool) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let gv = g.constant(Tensor::new(&[gate.len()], gate.to_vec()).unwrap());
        let y = gated_block_forward(&mut g, &mut ParamBinder::frozen(), xv, block, gv, mode, skip, BnMode::Eval, &mut Vec::new())?;
        Ok(g.data(y).to_vec())
    }

    #[test]
    fn closed_gate_is_identity() {
        let (block, x) = setup(1, 4, 4, 1);
        let skipped = run(&block, &x, &[0.0; 3], GateMode::Binary, true).unwrap();
        let masked = run(&block, &x, &[0.0; 3], GateMode::Binary, false).unwrap();
        assert_eq!(bits(&skipped), bits(x.data()));
        assert_eq!(bits(&masked), bits(x.data()));
    }

    #[test]
    fn closed_projection_block_matches_masked() {
        let (block, x) = setup(2, 4, 8, 2);
        let skipped = run(&block, &x, &[0.0; 3], GateMode::Binary, true).unwrap();
        let masked = run(&block, &x, &[0.0; 3], GateMode::Binary, false).unwrap();
        assert_eq!(bits(&skipped), bits(&masked));
    }

    #[test]
    fn open_gate_paths_agree_exactly() {
        for (in_c, out_c, stride) in [(4, 4, 1), (4, 8, 2)] {
            let (block, x) = setup(3, in_c, out_c, stride);
            let skipped = run(&block, &x, &[1.0; 3], GateMode::Binary, true).unwrap();
            let masked = run(&block, &x, &[1.0; 3], GateMode::Binary, false).unwrap();
            assert_eq!(bits(&skipped), bits(&masked));
        }
    }

    #[test]
    fn mixed_gates_fall_back_to_masking() {
        let (block, x) = setup(4, 4, 4, 1);
        let skipped = run(&block, &x, &[1.0, 0.0, 1.0], GateMode::Binary, true).unwrap();
        let masked = run(&block, &x, &[1.0, 0.0, 1.0], GateMode::Binary, false).unwrap();
        assert_eq!(bits(&skipped), bits(&masked));
        let per = x.numel() / 3;
        assert_eq!(bits(&skipped[per..2 * per]), bits(&x.data()[per..2 * per]));
    }

    #[test]
    fn sigmoid_half_gate_matches_direct_evaluation() {
        let (block, x) = setup(5, 4, 4, 1);
        let y = run(&block, &x, &[0.5; 3], GateMode::Sigmoid, false).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let f = block.residual(&mut g, &mut ParamBinder::frozen(), xv, BnMode::Eval, &mut Vec::new()).unwrap();
        let expected: Vec<f64> = x.data().iter().zip(g.data(f)).map(|(a, b)| (a + 0.5 * b).max(0.0)).collect();
        for (a, b) in y.iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn skip_with_sigmoid_is_a_contract_violation() {
        let (block, x) = setup(6, 4, 4, 1);
        assert!(matches!(run(&block, &x, &[0.5; 3], GateMode::Sigmoid, true), Err(Error::Contract(_))));
    }
}
