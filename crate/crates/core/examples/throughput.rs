//! Times forward+backward passes of the 12-block model.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use urnet_core::model::{ParamBinder, Trainable};
use urnet_core::objective::total_loss;
use urnet_core::{BnMode, Graph, ModePolicy, ModelSpec, ScaleParam, Tensor, UrnetModel};

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().unwrap()).collect();
    let (batch, size, iters) = (args.first().copied().unwrap_or(64), args.get(1).copied().unwrap_or(8), args.get(2).copied().unwrap_or(10));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = UrnetModel::new(ModelSpec::toy(10), &mut rng).unwrap();
    let x = Tensor::from_fn(&[batch, 3, size, size], |_| rng.random_range(-1.0..1.0)).unwrap();
    let labels: Vec<usize> = (0..batch).map(|i| i % 10).collect();
    let start = Instant::now();
    for _ in 0..iters {
        let mut g = Graph::new();
        let mut binder = ParamBinder::new(Trainable::Everything);
        let xv = g.constant(x.clone());
        let s = ScaleParam::new(0.6).unwrap();
        let out = model.forward(&mut g, &mut binder, xv, s, ModePolicy::Train { p: 0.1 }, BnMode::Train, &mut rng).unwrap();
        let (loss, _) = total_loss(&mut g, out.logits, &labels, out.gates, s, 2.0).unwrap();
        g.backward(loss).unwrap();
    }
    let per = start.elapsed().as_secs_f64() / iters as f64;
    println!("batch {batch} size {size}: {:.1} ms/iter, {:.0} samples/s", per * 1e3, batch as f64 / per);
}
