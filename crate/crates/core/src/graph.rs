//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order, so the recorded
//! list is already topologically sorted. [`Graph::backward`] walks it once in
//! reverse. Leaves are owned copies of their source tensors; callers read
//! the accumulated gradients back with [`Graph::grad`].

use crate::error::TensorError;
use crate::linalg::{col2im, gemm, im2col, ConvGeometry};
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether batch normalization uses batch statistics or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }

    /// Exponential moving average update with momentum [`BN_MOMENTUM`].
    pub fn update(&mut self, batch: &BatchStats) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.unbiased_var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

/// Statistics of one training-mode batch-norm evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub unbiased_var: Vec<f64>,
}

enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, geom: ConvGeometry },
    Affine { input: Var, weight: Var, bias: Var },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    ScaleFeatures { features: Var, gate: Var },
    GlobalAvgPool(Var),
    BatchNorm { input: Var, gamma: Var, beta: Var, normalized: Vec<f64>, inv_std: Vec<f64>, train: bool },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    ConcatCols(Var, Var),
    StackCols(Vec<Var>),
    RowMean(Var),
    AddScalar(Var),
    Square(Var),
    Mean(Var),
    Scale(Var, f64),
    Reshape(Var),
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// An append-only record of tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable logistic function.
pub fn stable_sigmoid(x: f64) -> f64 {
    sigmoid(x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its `requires_grad` flag is taken from the tensor.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        tensor.grad = None;
        self.nodes.push(Node { tensor, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].tensor.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad
    }

    /// Gradient accumulated by [`Graph::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.tensor.zero_grad());
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var], op: Op) -> Result<Var, TensorError> {
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name, index });
        }
        let mut tensor = Tensor::from_parts(shape, data);
        tensor.requires_grad = inputs.iter().any(|v| self.requires_grad(*v));
        self.nodes.push(Node { tensor, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn expect_ndim(&self, op: &'static str, v: Var, ndim: usize) -> Result<&[usize], TensorError> {
        let s = self.shape(v);
        if s.len() != ndim {
            return Err(TensorError::shape(op, format!("expected a {ndim}-d tensor, got shape {s:?}")));
        }
        Ok(s)
    }

    /// 2-d convolution of `[B,C,H,W]` by `[Cout,C,k,k]` with square odd kernels.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        const OP: &str = "conv2d";
        let xs = self.expect_ndim(OP, input, 4)?.to_vec();
        let ws = self.expect_ndim(OP, weight, 4)?.to_vec();
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        if ws[1] != c {
            return Err(TensorError::shape(OP, format!("input channel axis 1 is {c} but weight axis 1 is {}", ws[1])));
        }
        if ws[3] != k || k % 2 == 0 {
            return Err(TensorError::shape(OP, format!("kernel axes 2,3 must be equal and odd, got {}x{}", ws[2], ws[3])));
        }
        if stride == 0 {
            return Err(TensorError::shape(OP, "stride must be positive"));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(TensorError::shape(OP, format!("spatial axes 2,3 ({h}x{w}, pad {pad}) smaller than kernel {k}")));
        }
        let geom = ConvGeometry::new(b, c, h, w, cout, k, stride, pad);
        let cols = im2col(self.data(input), &geom);
        let l = geom.cols_width();
        let kk = geom.patch_len();
        let mut tmp = vec![0.0; cout * l];
        gemm(cout, kk, l, self.data(weight), (kk, 1), &cols, (l, 1), &mut tmp, (l, 1), 0.0);
        let p = geom.out_plane();
        let mut out = vec![0.0; b * cout * p];
        for bi in 0..b {
            for co in 0..cout {
                out[(bi * cout + co) * p..][..p].copy_from_slice(&tmp[co * l + bi * p..][..p]);
            }
        }
        let shape = vec![b, cout, geom.out_h, geom.out_w];
        self.push(OP, shape, out, &[input, weight], Op::Conv2d { input, weight, geom })
    }

    /// `input · weight + bias` for `[B,Din]·[Din,Dout] + [Dout]`.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        const OP: &str = "affine";
        let xs = self.expect_ndim(OP, input, 2)?.to_vec();
        let ws = self.expect_ndim(OP, weight, 2)?.to_vec();
        let (b, din, dout) = (xs[0], xs[1], ws[1]);
        if ws[0] != din {
            return Err(TensorError::shape(OP, format!("input axis 1 is {din} but weight axis 0 is {}", ws[0])));
        }
        if self.shape(bias) != [dout] {
            return Err(TensorError::shape(OP, format!("bias shape {:?} does not match [{dout}]", self.shape(bias))));
        }
        let mut out: Vec<f64> = self.data(bias).iter().copied().cycle().take(b * dout).collect();
        gemm(b, din, dout, self.data(input), (din, 1), self.data(weight), (dout, 1), &mut out, (dout, 1), 1.0);
        self.push(OP, vec![b, dout], out, &[input, weight, bias], Op::Affine { input, weight, bias })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.data(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        self.push("relu", self.shape(x).to_vec(), out, &[x], Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        self.push("sigmoid", self.shape(x).to_vec(), out, &[x], Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        self.push("add", self.shape(a).to_vec(), out, &[a, b], Op::Add(a, b))
    }

    /// Multiplies each sample's feature map by that sample's scalar gate.
    pub fn scale_features(&mut self, features: Var, gate: Var) -> Result<Var, TensorError> {
        const OP: &str = "scale_features";
        let fs = self.shape(features).to_vec();
        let gs = self.shape(gate);
        if gs.len() != 1 || gs[0] != fs[0] {
            return Err(TensorError::shape(OP, format!("batch axis 0 of features is {} but gate has shape {gs:?}", fs[0])));
        }
        let per = self.value(features).numel() / fs[0];
        let gv = self.data(gate);
        let out = self.data(features).chunks(per).zip(gv).flat_map(|(row, &g)| row.iter().map(move |v| v * g)).collect();
        self.push(OP, fs, out, &[features, gate], Op::ScaleFeatures { features, gate })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        const OP: &str = "global_avg_pool";
        let s = self.expect_ndim(OP, x, 4)?.to_vec();
        let plane = s[2] * s[3];
        let out = self.data(x).chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
        self.push(OP, vec![s[0], s[1]], out, &[x], Op::GlobalAvgPool(x))
    }

    /// Per-channel batch normalization of `[B,C,...]`. In train mode the batch
    /// statistics are returned so the caller can fold them into its running
    /// statistics; `running` is only read.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: &RunningStats,
        mode: BnMode,
    ) -> Result<(Var, Option<BatchStats>), TensorError> {
        const OP: &str = "batch_norm";
        let s = self.shape(input).to_vec();
        if s.len() < 2 {
            return Err(TensorError::shape(OP, format!("expected [B,C,...], got {s:?}")));
        }
        let (b, c) = (s[0], s[1]);
        let spatial: usize = s[2..].iter().product();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(TensorError::shape(OP, format!("{name} shape {:?} does not match channel axis 1 = {c}", self.shape(v))));
            }
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(TensorError::shape(OP, format!("running stats sized {} for {c} channels", running.mean.len())));
        }
        let x = self.data(input);
        let m = (b * spatial) as f64;
        let (mean, var, batch) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for bi in 0..b {
                    for (ci, mu) in mean.iter_mut().enumerate() {
                        *mu += x[(bi * c + ci) * spatial..][..spatial].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|mu| *mu /= m);
                for bi in 0..b {
                    for ci in 0..c {
                        let mu = mean[ci];
                        var[ci] += x[(bi * c + ci) * spatial..][..spatial].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= m);
                let correction = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                let stats = BatchStats { mean: mean.clone(), unbiased_var: var.iter().map(|v| v * correction).collect() };
                (mean, var, Some(stats))
            }
            BnMode::Eval => (running.mean.clone(), running.var.clone(), None),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut normalized = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * spatial;
                for i in off..off + spatial {
                    let xh = (x[i] - mean[ci]) * inv_std[ci];
                    normalized[i] = xh;
                    out[i] = g[ci] * xh + bt[ci];
                }
            }
        }
        let train = mode == BnMode::Train;
        let op = Op::BatchNorm { input, gamma, beta, normalized, inv_std, train };
        Ok((self.push(OP, s, out, &[input, gamma, beta], op)?, batch))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        const OP: &str = "softmax_cross_entropy";
        let s = self.expect_ndim(OP, logits, 2)?.to_vec();
        let (b, k) = (s[0], s[1]);
        if labels.len() != b {
            return Err(TensorError::shape(OP, format!("{} labels for batch axis 0 = {b}", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::LabelOutOfRange { label, classes: k });
        }
        let z = self.data(logits);
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for (bi, &label) in labels.iter().enumerate() {
            let row = &z[bi * k..(bi + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[label];
            for (p, v) in probs[bi * k..].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let op = Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs };
        self.push(OP, vec![1], vec![loss / b as f64], &[logits], op)
    }

    /// Concatenates `[B,P]` and `[B,Q]` into `[B,P+Q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        const OP: &str = "concat_cols";
        let sa = self.expect_ndim(OP, a, 2)?.to_vec();
        let sb = self.expect_ndim(OP, b, 2)?.to_vec();
        if sa[0] != sb[0] {
            return Err(TensorError::shape(OP, format!("batch axis 0 differs: {} vs {}", sa[0], sb[0])));
        }
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(sa[0] * (sa[1] + sb[1]));
        for i in 0..sa[0] {
            out.extend_from_slice(&da[i * sa[1]..(i + 1) * sa[1]]);
            out.extend_from_slice(&db[i * sb[1]..(i + 1) * sb[1]]);
        }
        self.push(OP, vec![sa[0], sa[1] + sb[1]], out, &[a, b], Op::ConcatCols(a, b))
    }

    /// Stacks N vectors of shape `[B]` into the columns of a `[B,N]` matrix.
    pub fn stack_cols(&mut self, cols: &[Var]) -> Result<Var, TensorError> {
        const OP: &str = "stack_cols";
        let first = *cols.first().ok_or_else(|| TensorError::shape(OP, "no columns"))?;
        let b = self.shape(first)[0];
        for &c in cols {
            if self.shape(c) != [b] {
                return Err(TensorError::shape(OP, format!("column shape {:?} is not [{b}]", self.shape(c))));
            }
        }
        let n = cols.len();
        let mut out = vec![0.0; b * n];
        for (j, &c) in cols.iter().enumerate() {
            for (i, v) in self.data(c).iter().enumerate() {
                out[i * n + j] = *v;
            }
        }
        self.push(OP, vec![b, n], out, cols, Op::StackCols(cols.to_vec()))
    }

    /// Mean of each row of a `[B,N]` matrix.
    pub fn row_mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.expect_ndim("row_mean", x, 2)?.to_vec();
        let out = self.data(x).chunks(s[1]).map(|r| r.iter().sum::<f64>() / s[1] as f64).collect();
        self.push("row_mean", vec![s[0]], out, &[x], Op::RowMean(x))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let out = self.data(x).iter().map(|v| v + c).collect();
        self.push("add_scalar", self.shape(x).to_vec(), out, &[x], Op::AddScalar(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.data(x).iter().map(|v| v * v).collect();
        self.push("square", self.shape(x).to_vec(), out, &[x], Op::Square(x))
    }

    /// Mean of all entries, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let d = self.data(x);
        let out = vec![d.iter().sum::<f64>() / d.len() as f64];
        self.push("mean", vec![1], out, &[x], Op::Mean(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let out = self.data(x).iter().map(|v| v * c).collect();
        self.push("scale", self.shape(x).to_vec(), out, &[x], Op::Scale(x, c))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(TensorError::shape("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let out = self.data(x).to_vec();
        self.push("reshape", shape.to_vec(), out, &[x], Op::Reshape(x))
    }

    /// Back-propagates from a one-element `loss`. Gradients are added to what
    /// earlier calls left behind; use [`Graph::zero_grad`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].tensor.requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            self.nodes[i].tensor.accumulate_grad(&g);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.tensor.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, geom } => {
                let (b, cout, p, l, kk) = (geom.batch, geom.out_c, geom.out_plane(), geom.cols_width(), geom.patch_len());
                let mut dtmp = vec![0.0; cout * l];
                for bi in 0..b {
                    for co in 0..cout {
                        dtmp[co * l + bi * p..][..p].copy_from_slice(&g[(bi * cout + co) * p..][..p]);
                    }
                }
                if self.wants(*weight) {
                    let cols = im2col(self.data(*input), geom);
                    let mut dw = vec![0.0; cout * kk];
                    gemm(cout, l, kk, &dtmp, (l, 1), &cols, (1, l), &mut dw, (kk, 1), 0.0);
                    accumulate(grads, *weight, dw);
                }
                if self.wants(*input) {
                    let mut dcols = vec![0.0; kk * l];
                    gemm(kk, cout, l, self.data(*weight), (1, kk), &dtmp, (l, 1), &mut dcols, (l, 1), 0.0);
                    accumulate(grads, *input, col2im(&dcols, geom));
                }
            }
            Op::Affine { input, weight, bias } => {
                let xs = self.shape(*input);
                let (b, din) = (xs[0], xs[1]);
                let dout = self.shape(*weight)[1];
                if self.wants(*input) {
                    let mut dx = vec![0.0; b * din];
                    gemm(b, dout, din, g, (dout, 1), self.data(*weight), (1, dout), &mut dx, (din, 1), 0.0);
                    accumulate(grads, *input, dx);
                }
                if self.wants(*weight) {
                    let mut dw = vec![0.0; din * dout];
                    gemm(din, b, dout, self.data(*input), (1, din), g, (dout, 1), &mut dw, (dout, 1), 0.0);
                    accumulate(grads, *weight, dw);
                }
                if self.wants(*bias) {
                    let mut db = vec![0.0; dout];
                    for row in g.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    accumulate(grads, *bias, db);
                }
            }
            Op::Relu(x) => {
                let d = self.data(*x).iter().zip(g).map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 }).collect();
                accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = out.iter().zip(g).map(|(&s, &gi)| gi * s * (1.0 - s)).collect();
                accumulate(grads, *x, d);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::ScaleFeatures { features, gate } => {
                let gv = self.data(*gate);
                let per = g.len() / gv.len();
                if self.wants(*features) {
                    let d = g.chunks(per).zip(gv).flat_map(|(row, &s)| row.iter().map(move |v| v * s)).collect();
                    accumulate(grads, *features, d);
                }
                if self.wants(*gate) {
                    let f = self.data(*features);
                    let d = g.chunks(per).zip(f.chunks(per)).map(|(gr, fr)| gr.iter().zip(fr).map(|(a, b)| a * b).sum()).collect();
                    accumulate(grads, *gate, d);
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let plane = s[2] * s[3];
                let inv = 1.0 / plane as f64;
                let d = g.iter().flat_map(|&gi| std::iter::repeat_n(gi * inv, plane)).collect();
                accumulate(grads, *x, d);
            }
            Op::BatchNorm { input, gamma, beta, normalized, inv_std, train } => {
                let s = self.shape(*input);
                let (b, c) = (s[0], s[1]);
                let spatial = normalized.len() / (b * c);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * spatial;
                        for j in off..off + spatial {
                            sum_g[ci] += g[j];
                            sum_gx[ci] += g[j] * normalized[j];
                        }
                    }
                }
                if self.wants(*input) {
                    let gam = self.data(*gamma);
                    let m = (b * spatial) as f64;
                    let mut dx = vec![0.0; normalized.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * spatial;
                            let k = gam[ci] * inv_std[ci];
                            for j in off..off + spatial {
                                dx[j] = if *train { k * (g[j] - sum_g[ci] / m - normalized[j] * sum_gx[ci] / m) } else { k * g[j] };
                            }
                        }
                    }
                    accumulate(grads, *input, dx);
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, sum_gx);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, sum_g);
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let b = labels.len();
                let k = probs.len() / b;
                let scale = g[0] / b as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (bi, &l) in labels.iter().enumerate() {
                    d[bi * k + l] -= scale;
                }
                accumulate(grads, *logits, d);
            }
            Op::ConcatCols(a, b) => {
                let (pa, pb) = (self.shape(*a)[1], self.shape(*b)[1]);
                let w = pa + pb;
                if self.wants(*a) {
                    let d = g.chunks(w).flat_map(|r| r[..pa].iter().copied()).collect();
                    accumulate(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = g.chunks(w).flat_map(|r| r[pa..].iter().copied()).collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::StackCols(cols) => {
                let n = cols.len();
                for (j, &c) in cols.iter().enumerate() {
                    if self.wants(c) {
                        let d = g.chunks(n).map(|r| r[j]).collect();
                        accumulate(grads, c, d);
                    }
                }
            }
            Op::RowMean(x) => {
                let n = self.shape(*x)[1];
                let inv = 1.0 / n as f64;
                let d = g.iter().flat_map(|&gi| std::iter::repeat_n(gi * inv, n)).collect();
                accumulate(grads, *x, d);
            }
            Op::AddScalar(x) | Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
            Op::Square(x) => {
                let d = self.data(*x).iter().zip(g).map(|(v, gi)| 2.0 * v * gi).collect();
                accumulate(grads, *x, d);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::Scale(x, c) => {
                let d = g.iter().map(|v| v * c).collect();
                accumulate(grads, *x, d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&delta).for_each(|(e, d)| *e += d),
        slot @ None => *slot = Some(delta),
    }
}
