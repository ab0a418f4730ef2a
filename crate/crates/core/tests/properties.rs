//! Invariants checked over random inputs.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use urnet_core::data::{load_checkpoint, save_checkpoint, Normalization, TrainState};
use urnet_core::metrics::{budget_to_scale, count_macs, FlopsModel, LayerSpec};
use urnet_core::model::{gated_block_forward, random_keep_mask, ParamBinder, ResidualBlockParams};
use urnet_core::objective::scale_loss;
use urnet_core::trainer::annealed_base;
use urnet_core::{BnMode, GateMode, Graph, ModePolicy, ModelSpec, ScaleParam, Tensor, UrnetModel};

fn bits(d: &[f64]) -> Vec<u64> {
    d.iter().map(|v| v.to_bits()).collect()
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
}

/// Direct nested-loop convolution, zero padding.
fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let [b, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, k, _] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; b * o * oh * ow];
    for n in 0..b {
        for f in 0..o {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((n * c + ch) * h + iy as usize) * wd + ix as usize;
                                let wi = ((f * c + ch) * k + ky) * k + kx;
                                acc += x.data()[xi] * w.data()[wi];
                            }
                        }
                    }
                    out[((n * o + f) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    out
}

fn tiny_model(seed: u64, use_feature_input: bool) -> UrnetModel {
    let spec = ModelSpec {
        in_channels: 3,
        stage_channels: vec![4, 8],
        blocks_per_stage: vec![2, 1],
        num_classes: 3,
        reduction: 2,
        use_feature_input,
        gate_training_probability: 0.1,
    };
    UrnetModel::new(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn conv_matches_naive(seed in any::<u64>(), b in 1usize..3, c in 1usize..9, o in 1usize..5, h in 3usize..9, k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&[b, c, h, h], &mut rng);
        let w = random_tensor(&[o, c, k, k], &mut rng);
        let pad = k / 2;
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(xv, wv, stride, pad).unwrap();
        let want = naive_conv(&x, &w, stride, pad);
        prop_assert_eq!(g.data(y).len(), want.len());
        for (a, e) in g.data(y).iter().zip(&want) {
            prop_assert!((a - e).abs() <= 1e-12, "{} vs {}", a, e);
        }
    }

    #[test]
    fn zero_gate_and_zero_addend_are_exact(seed in any::<u64>(), b in 1usize..4, c in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_tensor(&[b, c, 3, 3], &mut rng);
        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let zero = g.constant(Tensor::zeros(&[b]));
        let scaled = g.scale_features(fv, zero).unwrap();
        prop_assert!(g.data(scaled).iter().all(|&v| v == 0.0));
        let zeros = g.constant(Tensor::zeros(&[b, c, 3, 3]));
        let sum = g.add(fv, zeros).unwrap();
        prop_assert_eq!(bits(g.data(sum)), bits(f.data()));
    }

    #[test]
    fn closed_block_passes_input_through(seed in any::<u64>(), c in 1usize..6, batch in 1usize..4, skip in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = ResidualBlockParams::new("b", c, c, 1, &mut rng);
        let x = Tensor::from_fn(&[batch, c, 5, 5], |_| rng.random_range(-1.0f64..1.0).max(0.0)).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let gate = g.constant(Tensor::zeros(&[batch]));
        let y = gated_block_forward(&mut g, &mut ParamBinder::frozen(), xv, &block, gate, GateMode::Binary, skip, BnMode::Eval, &mut Vec::new()).unwrap();
        prop_assert_eq!(bits(g.data(y)), bits(x.data()));
    }

    #[test]
    fn scale_loss_matches_direct_formula_and_gradient(seed in any::<u64>(), b in 1usize..6, n in 1usize..20, s in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gates = Tensor::from_fn(&[b, n], |_| rng.random_range(0.0..1.0)).unwrap();
        let scale = ScaleParam::new(s).unwrap();
        let mut g = Graph::new();
        let gv = g.leaf(gates.clone().with_grad());
        let l = scale_loss(&mut g, gv, scale).unwrap();
        let rows: Vec<f64> = gates.data().chunks(n).map(|r| r.iter().sum::<f64>() / n as f64).collect();
        let direct = rows.iter().map(|m| (m - s).powi(2)).sum::<f64>() / b as f64;
        prop_assert!((g.data(l)[0] - direct).abs() <= 1e-12);
        g.backward(l).unwrap();
        let grad = g.grad(gv).unwrap();
        for (i, d) in grad.iter().enumerate() {
            let want = 2.0 * (rows[i / n] - s) / (n * b) as f64;
            prop_assert!((d - want).abs() <= 1e-10);
        }
    }

    #[test]
    fn random_drop_keeps_rounded_count(seed in any::<u64>(), n in 1usize..60, s in 0.0f64..=1.0) {
        let mask = random_keep_mask(ScaleParam::new(s).unwrap(), n, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(mask.iter().filter(|&&v| v == 1.0).count(), (s * n as f64).round() as usize);
        prop_assert!(mask.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn anneal_stays_between_target_and_one(s in 0.0f64..=1.0, epochs in 1usize..30, e in 0usize..40) {
        let now = annealed_base(e, s, epochs);
        let next = annealed_base(e + 1, s, epochs);
        prop_assert!(now >= s - 1e-15 && now <= 1.0 + 1e-15);
        prop_assert!(next <= now + 1e-15);
    }

    #[test]
    fn conv_macs_scale_with_every_factor(ci in 1usize..64, co in 1usize..64, k in 1usize..6, h in 1usize..33) {
        let base = count_macs(LayerSpec::Conv { in_channels: ci, out_channels: co, kernel: k, out_h: h, out_w: h });
        let doubled = count_macs(LayerSpec::Conv { in_channels: 2 * ci, out_channels: co, kernel: k, out_h: h, out_w: h });
        prop_assert_eq!(doubled, 2 * base);
        prop_assert_eq!(base, (ci * co * k * k * h * h) as u64);
    }

    #[test]
    fn budget_lookup_inverts_interpolation(s0 in 0.0f64..0.5, ds in 0.05f64..0.5, f0 in 1.0f64..100.0, df in 1.0f64..100.0, t in 0.0f64..=1.0) {
        let table = [(s0, f0), (s0 + ds, f0 + df)];
        let s = budget_to_scale(&table, f0 + t * df).unwrap().value();
        prop_assert!((s - (s0 + t * ds)).abs() < 1e-9);
    }

    #[test]
    fn per_sample_flops_follow_the_gate_record(seed in any::<u64>(), s in 0.0f64..=1.0, features in any::<bool>()) {
        let model = tiny_model(seed, features);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = Tensor::from_fn(&[4, 3, 8, 8], |_| rng.random_range(-1.0..1.0)).unwrap();
        let (_, record) = model.infer(&x, ScaleParam::new(s).unwrap(), ModePolicy::Eval, &mut rng).unwrap();
        let flops = FlopsModel::new(&model, 8, 8);
        for b in 0..record.batch() {
            let want = flops.fixed() as f64
                + record.sample(b).iter().zip(&flops.blocks).map(|(g, m)| g * *m as f64).sum::<f64>();
            prop_assert_eq!(flops.sample_macs(record.sample(b)), want);
        }
        if !features {
            let first = record.sample(0).to_vec();
            prop_assert!((1..record.batch()).all(|b| record.sample(b) == first.as_slice()));
        }
    }
}

#[test]
fn checkpoint_round_trip_keeps_predictions() {
    let model = tiny_model(5, true);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &TrainState::default(), &Normalization::identity(3), &path).unwrap();
    let loaded = load_checkpoint(&path, Some(&model.spec)).unwrap().model;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::from_fn(&[6, 3, 8, 8], |_| rng.random_range(-1.0..1.0)).unwrap();
    for s in [0.2, 0.6, 1.0] {
        let scale = ScaleParam::new(s).unwrap();
        let (a, ra) = model.infer(&x, scale, ModePolicy::Eval, &mut rng).unwrap();
        let (b, rb) = loaded.infer(&x, scale, ModePolicy::Eval, &mut rng).unwrap();
        assert_eq!(ra.gates, rb.gates);
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() <= 1e-5 * (1.0 + u.abs()), "{u} vs {v}");
        }
    }
}
