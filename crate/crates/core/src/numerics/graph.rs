//! Reverse-mode tape.
//!
//! Every op appends a node holding its forward value plus whatever it needs
//! for the backward pass. `backward` walks the tape once in reverse order.
//! Values are never mutated after they are written.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore, StatUpdate};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        col: Vec<f64>,
        dims: ConvDims,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Reshape {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
        widths: Vec<usize>,
    },
    Slice {
        x: Var,
        start: usize,
        len: usize,
    },
    TimeStep {
        x: Var,
        t: usize,
    },
    Softmax {
        x: Var,
    },
    Stack {
        parts: Vec<(Var, usize)>,
    },
    WeightedPool {
        h: Var,
        a: Var,
    },
    NormalizeRows {
        x: Var,
    },
    Cce {
        probs: Var,
        labels: Vec<usize>,
        eps: f64,
    },
    Sum {
        x: Var,
    },
}

#[derive(Clone, Copy, Debug)]
struct ConvDims {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Arguments of a batch-normalization node.
pub struct BatchNormArgs<'a> {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: &'a Tensor,
    pub running_var: &'a Tensor,
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub momentum: f64,
    pub eps: f64,
    /// Normalize with the running statistics even in training mode and
    /// leave them untouched.
    pub frozen: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    mode: Mode,
    rng: ChaCha8Rng,
    stat_updates: Vec<StatUpdate>,
}

impl Graph {
    /// `seed` drives dropout masks; forward passes are deterministic given it.
    pub fn new(mode: Mode, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            stat_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter leaf; frozen parameters get no gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let frozen = store.is_frozen(id);
        self.push(store.get(id).clone(), Op::Param(id), !frozen)
    }

    /// Hash of every branch taken by a non-smooth op: ReLU signs, pooling
    /// winners and CCE clamps. Two evaluations with equal signatures lie on
    /// the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for v in self.value(*x).data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                Op::Cce { probs, labels, eps } => {
                    let p = self.value(*probs).data();
                    let m = p.len() / labels.len();
                    for (r, &l) in labels.iter().enumerate() {
                        let v = p[r * m + l];
                        (v < *eps, v > 1.0 - eps).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    // ---------------------------------------------------------------- ops

    /// `a (m x k) @ b (k x n)`; `a` may carry leading axes that are folded
    /// into `m`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bs = self.shape(b);
        if bs.len() != 2 {
            return Err(Error::shape(format!("matmul rhs must be 2-d, got {bs:?}")));
        }
        let (k, n) = (bs[0], bs[1]);
        let asz = self.value(a).len();
        let a_last = *self.shape(a).last().unwrap();
        if a_last != k {
            return Err(Error::shape(format!(
                "matmul {:?} @ {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let m = asz / k;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = n;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, m, k, n }, needs))
    }

    /// Broadcast-add a vector over the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap();
        if self.value(b).len() != n {
            return Err(Error::shape(format!(
                "bias of {} for last axis {n}",
                self.value(b).len()
            )));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(out, Op::AddBias { x, b }, needs))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        let needs = self.needs(x);
        self.push(out, Op::Scale { x, c }, needs)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = f(*v));
        let needs = self.needs(x);
        self.push(out, op, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh { x })
    }

    /// Same-padded stride-1 cross-correlation. `x` is `[N, H, W, Cin]`, `w`
    /// is `[K, K, Cin, Cout]` with odd `K`, `b` is `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects 4-d input and kernel, got {xs:?}, {ws:?}"
            )));
        }
        let (n, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, k2, wcin, cout) = (ws[0], ws[1], ws[2], ws[3]);
        if k != k2 || k % 2 == 0 {
            return Err(Error::config(format!("kernel must be square and odd, got {k}x{k2}")));
        }
        if wcin != cin {
            return Err(Error::config(format!(
                "kernel expects {wcin} input channels, input has {cin}"
            )));
        }
        if h < k || wd < k {
            return Err(Error::shape(format!("spatial extent {h}x{wd} smaller than kernel {k}")));
        }
        if self.value(b).len() != cout {
            return Err(Error::config(format!(
                "bias length {} for {cout} filters",
                self.value(b).len()
            )));
        }
        let dims = ConvDims {
            n,
            h,
            w: wd,
            cin,
            cout,
            k,
        };
        let col = im2col(self.value(x).data(), dims);
        let rows = n * h * wd;
        let kk = k * k * cin;
        let mut out = vec![0.0; rows * cout];
        let bias = self.value(b).data();
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(bias);
        }
        gemm(rows, kk, cout, &col, false, self.value(w).data(), false, &mut out, true);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let out = Tensor::new(vec![n, h, wd, cout], out)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, col, dims }, needs))
    }

    /// 2x2 max pooling with stride 2; a trailing odd row/column is dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[1] < 2 || xs[2] < 2 {
            return Err(Error::shape(format!("max_pool2 needs [N,H>=2,W>=2,C], got {xs:?}")));
        }
        let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * oh * ow * c];
        let mut argmax = vec![0usize; out.len()];
        for b in 0..n {
            for i in 0..oh {
                for j in 0..ow {
                    for ch in 0..c {
                        let mut best = usize::MAX;
                        let mut best_v = f64::NEG_INFINITY;
                        for di in 0..2 {
                            for dj in 0..2 {
                                let idx = ((b * h + 2 * i + di) * w + 2 * j + dj) * c + ch;
                                if src[idx] > best_v || best == usize::MAX {
                                    best_v = src[idx];
                                    best = idx;
                                }
                            }
                        }
                        let o = ((b * oh + i) * ow + j) * c + ch;
                        out[o] = best_v;
                        argmax[o] = best;
                    }
                }
            }
        }
        let needs = self.needs(x);
        let out = Tensor::new(vec![n, oh, ow, c], out)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }, needs))
    }

    /// Batch normalization over the last axis (channels); statistics pool all
    /// other axes.
    pub fn batch_norm(&mut self, x: Var, args: BatchNormArgs<'_>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().unwrap();
        if self.value(args.gamma).len() != c || self.value(args.beta).len() != c {
            return Err(Error::shape(format!("batch-norm affine params for {c} channels")));
        }
        let training = self.is_training() && !args.frozen;
        if training && xs[0] < 2 {
            return Err(Error::invalid(
                "batch-norm in training mode needs a batch of at least 2",
            ));
        }
        let src = self.value(x).data();
        let count = src.len() / c;
        let (mean, var) = if training {
            let mut mean = vec![0.0; c];
            for row in src.chunks(c) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            let mut var = vec![0.0; c];
            for row in src.chunks(c) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= count as f64);
            (mean, var)
        } else {
            (args.running_mean.data().to_vec(), args.running_var.data().to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + args.eps).sqrt()).collect();
        let gamma = self.value(args.gamma).data();
        let beta = self.value(args.beta).data();
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for (i, (xh, o)) in xhat.iter_mut().zip(out.iter_mut()).enumerate() {
            let ch = i % c;
            *xh = (src[i] - mean[ch]) * inv_std[ch];
            *o = gamma[ch] * *xh + beta[ch];
        }
        if training {
            self.stat_updates.push(StatUpdate {
                mean_id: args.mean_id,
                var_id: args.var_id,
                momentum: args.momentum,
                batch_mean: mean,
                batch_var: var,
            });
        }
        let needs = self.needs(x) || self.needs(args.gamma) || self.needs(args.beta);
        let out = Tensor::new(xs, out)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma: args.gamma,
                beta: args.beta,
                xhat,
                inv_std,
                training,
            },
            needs,
        ))
    }

    /// Inverted dropout; the identity outside training mode.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if !self.is_training() || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
        let needs = self.needs(x);
        self.push(out, Op::Dropout { x, mask }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Reshape { x }, needs))
    }

    /// Concatenate 2-d tensors along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape(format!("concat part {s:?} with {rows} rows")));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let out = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                widths,
            },
            needs,
        ))
    }

    /// Columns `start..start+len` of a 2-d tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(Error::shape(format!("slice {start}..{} of {s:?}", start + len)));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(s[0] * len);
        for r in 0..s[0] {
            out.extend_from_slice(&src[r * s[1] + start..r * s[1] + start + len]);
        }
        let needs = self.needs(x);
        let out = Tensor::new(vec![s[0], len], out)?;
        Ok(self.push(out, Op::Slice { x, start, len }, needs))
    }

    /// `x[:, t, :]` of a `[N, T, F]` tensor.
    pub fn time_step(&mut self, x: Var, t: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || t >= s[1] {
            return Err(Error::shape(format!("time step {t} of {s:?}")));
        }
        let (n, tt, f) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * f);
        for b in 0..n {
            out.extend_from_slice(&src[(b * tt + t) * f..(b * tt + t + 1) * f]);
        }
        let needs = self.needs(x);
        let out = Tensor::new(vec![n, f], out)?;
        Ok(self.push(out, Op::TimeStep { x, t }, needs))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let n = *self.shape(x).last().unwrap();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let needs = self.needs(x);
        self.push(out, Op::Softmax { x }, needs)
    }

    /// Gather per-bag instance rows into `[B, N, d]`. Each part is
    /// `[B * count, d]` with the `count` rows of one bag contiguous; within a
    /// bag the parts keep their order.
    pub fn stack_instances(&mut self, parts: &[(Var, usize)]) -> Result<Var> {
        let d = self.shape(parts[0].0)[1];
        let b = self.shape(parts[0].0)[0] / parts[0].1;
        for &(p, c) in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != d || s[0] != b * c {
                return Err(Error::shape(format!("instance part {s:?} for {b} bags x {c}")));
            }
        }
        let total: usize = parts.iter().map(|p| p.1).sum();
        let mut out = Vec::with_capacity(b * total * d);
        for bag in 0..b {
            for &(p, c) in parts {
                let src = self.value(p).data();
                out.extend_from_slice(&src[bag * c * d..(bag + 1) * c * d]);
            }
        }
        let needs = parts.iter().any(|&(p, _)| self.needs(p));
        let out = Tensor::new(vec![b, total, d], out)?;
        Ok(self.push(out, Op::Stack { parts: parts.to_vec() }, needs))
    }

    /// `z[b] = sum_n a[b, n] * h[b, n, :]`, summed in instance order.
    pub fn weighted_pool(&mut self, h: Var, a: Var) -> Result<Var> {
        let hs = self.shape(h).to_vec();
        let as_ = self.shape(a).to_vec();
        if hs.len() != 3 || as_ != hs[..2] {
            return Err(Error::shape(format!("weighted pool of {hs:?} with weights {as_:?}")));
        }
        let (b, n, d) = (hs[0], hs[1], hs[2]);
        let hv = self.value(h).data();
        let av = self.value(a).data();
        let mut out = vec![0.0; b * d];
        for bag in 0..b {
            let z = &mut out[bag * d..(bag + 1) * d];
            for i in 0..n {
                let w = av[bag * n + i];
                let row = &hv[(bag * n + i) * d..(bag * n + i + 1) * d];
                for (zz, hh) in z.iter_mut().zip(row) {
                    *zz += w * hh;
                }
            }
        }
        let needs = self.needs(h) || self.needs(a);
        let out = Tensor::new(vec![b, d], out)?;
        Ok(self.push(out, Op::WeightedPool { h, a }, needs))
    }

    /// Divide each row (last axis) by its sum.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let n = *self.shape(x).last().unwrap();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let needs = self.needs(x);
        self.push(out, Op::NormalizeRows { x }, needs)
    }

    /// Mean categorical cross-entropy `-log p[label]` over the rows of a
    /// `[B, m]` probability matrix; probabilities are clamped to
    /// `[eps, 1 - eps]`.
    pub fn cce(&mut self, probs: Var, labels: &[usize], eps: f64) -> Result<Var> {
        let s = self.shape(probs).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(format!("cce of {s:?} with {} labels", labels.len())));
        }
        let m = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(Error::invalid(format!("label {bad} outside [0, {m})")));
        }
        let p = self.value(probs).data();
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -p[r * m + l].clamp(eps, 1.0 - eps).ln())
            .sum::<f64>()
            / labels.len() as f64;
        let needs = self.needs(probs);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Cce {
                probs,
                labels: labels.to_vec(),
                eps,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, needs)
    }

    // ----------------------------------------------------------- backward

    /// Gradient of `v` after [`Graph::backward`], if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of all parameter leaves, summed per parameter id.
    pub fn param_grads(&self) -> Vec<(ParamId, &[f64])> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => self.grads[i].as_deref().map(|g| (id, g)),
                _ => None,
            })
            .collect()
    }

    /// Back-propagate from a scalar node.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward needs a scalar root"));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = self.grads[i].take() else { continue };
            self.backprop_node(i, &gy);
            self.grads[i] = Some(gy);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, gy: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |v: Var| nodes[v.0].value.data();
        let needs = |v: Var| nodes[v.0].needs_grad;
        match &nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul { a, b, m, k, n } => {
                if needs(a) {
                    let bv = val(b);
                    let ga = acc_slot(nodes, grads, a).unwrap();
                    gemm(m, n, k, gy, false, bv, true, ga, true);
                }
                if needs(b) {
                    let av = val(a);
                    let gb = acc_slot(nodes, grads, b).unwrap();
                    gemm(k, m, n, av, true, gy, false, gb, true);
                }
            }
            &Op::AddBias { x, b } => {
                if let Some(gx) = acc_slot(nodes, grads, x) {
                    gx.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
                if let Some(gb) = acc_slot(nodes, grads, b) {
                    let n = gb.len();
                    for row in gy.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(g) = acc_slot(nodes, grads, v) {
                        g.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                    }
                }
            }
            &Op::Mul { a, b } => {
                let av = val(a);
                let bv = val(b);
                if let Some(ga) = acc_slot(nodes, grads, a) {
                    for ((g, d), y) in ga.iter_mut().zip(gy).zip(bv) {
                        *g += d * y;
                    }
                }
                if let Some(gb) = acc_slot(nodes, grads, b) {
                    for ((g, d), x) in gb.iter_mut().zip(gy).zip(av) {
                        *g += d * x;
                    }
                }
            }
            &Op::Scale { x, c } => {
                if let Some(g) = acc_slot(nodes, grads, x) {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += c * d);
                }
            }
            &Op::Relu { x } => {
                let xv = val(x);
                if let Some(g) = acc_slot(nodes, grads, x) {
                    for ((g, d), v) in g.iter_mut().zip(gy).zip(xv) {
                        if *v > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            &Op::Sigmoid { x } => {
                let yv = nodes[i].value.data();
                if let Some(g) = acc_slot(nodes, grads, x) {
                    for ((g, d), y) in g.iter_mut().zip(gy).zip(yv) {
                        *g += d * y * (1.0 - y);
                    }
                }
            }
            &Op::Tanh { x } => {
                let yv = nodes[i].value.data();
                if let Some(g) = acc_slot(nodes, grads, x) {
                    for ((g, d), y) in g.iter_mut().zip(gy).zip(yv) {
                        *g += d * (1.0 - y * y);
                    }
                }
            }
            Op::Conv2d { x, w, b, col, dims } => {
                let (x, w, b, dims) = (*x, *w, *b, *dims);
                let rows = dims.n * dims.h * dims.w;
                let kk = dims.k * dims.k * dims.cin;
                if let Some(gw) = acc_slot(nodes, grads, w) {
                    gemm(kk, rows, dims.cout, col, true, gy, false, gw, true);
                }
                if let Some(gb) = acc_slot(nodes, grads, b) {
                    for row in gy.chunks(dims.cout) {
                        gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                }
                if needs(x) {
                    let wv = val(w);
                    let mut dcol = vec![0.0; rows * kk];
                    gemm(rows, dims.cout, kk, gy, false, wv, true, &mut dcol, false);
                    let gx = acc_slot(nodes, grads, x).unwrap();
                    col2im_add(&dcol, dims, gx);
                }
            }
            Op::MaxPool { x, argmax } => {
                let x = *x;
                if let Some(g) = acc_slot(nodes, grads, x) {
                    for (d, &idx) in gy.iter().zip(argmax) {
                        g[idx] += d;
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let (x, gamma, beta, training) = (*x, *gamma, *beta, *training);
                let c = inv_std.len();
                let count = (xhat.len() / c) as f64;
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for (j, (d, xh)) in gy.iter().zip(xhat).enumerate() {
                    sum_dy[j % c] += d;
                    sum_dy_xhat[j % c] += d * xh;
                }
                let gam = val(gamma);
                if let Some(gg) = acc_slot(nodes, grads, gamma) {
                    gg.iter_mut().zip(&sum_dy_xhat).for_each(|(g, s)| *g += s);
                }
                if let Some(gb) = acc_slot(nodes, grads, beta) {
                    gb.iter_mut().zip(&sum_dy).for_each(|(g, s)| *g += s);
                }
                if let Some(gx) = acc_slot(nodes, grads, x) {
                    for (j, (g, d)) in gx.iter_mut().zip(gy).enumerate() {
                        let ch = j % c;
                        if training {
                            *g += gam[ch] * inv_std[ch] * (d - sum_dy[ch] / count - xhat[j] * sum_dy_xhat[ch] / count);
                        } else {
                            *g += gam[ch] * inv_std[ch] * d;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                if let Some(g) = acc_slot(nodes, grads, x) {
                    for ((g, d), m) in g.iter_mut().zip(gy).zip(mask) {
                        *g += d * m;
                    }
                }
            }
            &Op::Reshape { x } => {
                if let Some(g) = acc_slot(nodes, grads, x) {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
            }
            Op::Concat { parts, widths } => {
                let total: usize = widths.iter().sum();
                let rows = gy.len() / total;
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if let Some(g) = acc_slot(nodes, grads, p) {
                        for r in 0..rows {
                            for c in 0..w {
                                g[r * w + c] += gy[r * total + off + c];
                            }
                        }
                    }
                    off += w;
                }
            }
            &Op::Slice { x, start, len } => {
                let width = nodes[x.0].value.shape()[1];
                if let Some(g) = acc_slot(nodes, grads, x) {
                    for (r, row) in gy.chunks(len).enumerate() {
                        for (c, d) in row.iter().enumerate() {
                            g[r * width + start + c] += d;
                        }
                    }
                }
            }
            &Op::TimeStep { x, t } => {
                let s = nodes[x.0].value.shape().to_vec();
                let (tt, f) = (s[1], s[2]);
                if let Some(g) = acc_slot(nodes, grads, x) {
                    for (b, row) in gy.chunks(f).enumerate() {
                        let base = (b * tt + t) * f;
                        g[base..base + f].iter_mut().zip(row).for_each(|(g, d)| *g += d);
                    }
                }
            }
            &Op::Softmax { x } => {
                let yv = nodes[i].value.data();
                let n = *nodes[i].value.shape().last().unwrap();
                if let Some(g) = acc_slot(nodes, grads, x) {
                    for ((grow, drow), yrow) in g.chunks_mut(n).zip(gy.chunks(n)).zip(yv.chunks(n)) {
                        let dot: f64 = drow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                        for ((g, d), y) in grow.iter_mut().zip(drow).zip(yrow) {
                            *g += y * (d - dot);
                        }
                    }
                }
            }
            Op::Stack { parts } => {
                let s = nodes[i].value.shape().to_vec();
                let (b, total, d) = (s[0], s[1], s[2]);
                let mut off = 0;
                for &(p, c) in parts {
                    if let Some(g) = acc_slot(nodes, grads, p) {
                        for bag in 0..b {
                            let src = &gy[(bag * total + off) * d..(bag * total + off + c) * d];
                            g[bag * c * d..(bag + 1) * c * d]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(g, v)| *g += v);
                        }
                    }
                    off += c;
                }
            }
            &Op::WeightedPool { h, a } => {
                let hs = nodes[h.0].value.shape().to_vec();
                let (b, n, d) = (hs[0], hs[1], hs[2]);
                let av = val(a);
                if needs(a) {
                    let hv = val(h);
                    let ga = acc_slot(nodes, grads, a).unwrap();
                    for bag in 0..b {
                        let dz = &gy[bag * d..(bag + 1) * d];
                        for inst in 0..n {
                            let row = &hv[(bag * n + inst) * d..(bag * n + inst + 1) * d];
                            ga[bag * n + inst] += dz.iter().zip(row).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(gh) = acc_slot(nodes, grads, h) {
                    for bag in 0..b {
                        let dz = &gy[bag * d..(bag + 1) * d];
                        for inst in 0..n {
                            let w = av[bag * n + inst];
                            let row = &mut gh[(bag * n + inst) * d..(bag * n + inst + 1) * d];
                            row.iter_mut().zip(dz).for_each(|(g, v)| *g += w * v);
                        }
                    }
                }
            }
            &Op::NormalizeRows { x } => {
                let xv = val(x);
                let yv = nodes[i].value.data();
                let n = *nodes[i].value.shape().last().unwrap();
                if let Some(g) = acc_slot(nodes, grads, x) {
                    for (((grow, drow), yrow), xrow) in
                        g.chunks_mut(n).zip(gy.chunks(n)).zip(yv.chunks(n)).zip(xv.chunks(n))
                    {
                        let s: f64 = xrow.iter().sum();
                        let dot: f64 = drow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                        for (g, d) in grow.iter_mut().zip(drow) {
                            *g += (d - dot) / s;
                        }
                    }
                }
            }
            Op::Cce { probs, labels, eps } => {
                let (probs, eps) = (*probs, *eps);
                let m = nodes[probs.0].value.shape()[1];
                let pv = val(probs);
                let scale = gy[0] / labels.len() as f64;
                if let Some(g) = acc_slot(nodes, grads, probs) {
                    for (r, &l) in labels.iter().enumerate() {
                        let p = pv[r * m + l];
                        if p > eps && p < 1.0 - eps {
                            g[r * m + l] -= scale / p;
                        }
                    }
                }
            }
            &Op::Sum { x } => {
                if let Some(g) = acc_slot(nodes, grads, x) {
                    g.iter_mut().for_each(|g| *g += gy[0]);
                }
            }
        }
    }
}

fn acc_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn im2col(x: &[f64], d: ConvDims) -> Vec<f64> {
    let pad = d.k / 2;
    let kk = d.k * d.k * d.cin;
    let mut col = vec![0.0; d.n * d.h * d.w * kk];
    for b in 0..d.n {
        for y in 0..d.h {
            for xx in 0..d.w {
                let row = ((b * d.h + y) * d.w + xx) * kk;
                for ky in 0..d.k {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= d.h as isize {
                        continue;
                    }
                    for kx in 0..d.k {
                        let sx = xx as isize + kx as isize - pad as isize;
                        if sx < 0 || sx >= d.w as isize {
                            continue;
                        }
                        let src = ((b * d.h + sy as usize) * d.w + sx as usize) * d.cin;
                        let dst = row + (ky * d.k + kx) * d.cin;
                        col[dst..dst + d.cin].copy_from_slice(&x[src..src + d.cin]);
                    }
                }
            }
        }
    }
    col
}

fn col2im_add(dcol: &[f64], d: ConvDims, gx: &mut [f64]) {
    let pad = d.k / 2;
    let kk = d.k * d.k * d.cin;
    for b in 0..d.n {
        for y in 0..d.h {
            for xx in 0..d.w {
                let row = ((b * d.h + y) * d.w + xx) * kk;
                for ky in 0..d.k {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= d.h as isize {
                        continue;
                    }
                    for kx in 0..d.k {
                        let sx = xx as isize + kx as isize - pad as isize;
                        if sx < 0 || sx >= d.w as isize {
                            continue;
                        }
                        let dst = ((b * d.h + sy as usize) * d.w + sx as usize) * d.cin;
                        let src = row + (ky * d.k + kx) * d.cin;
                        gx[dst..dst + d.cin]
                            .iter_mut()
                            .zip(&dcol[src..src + d.cin])
                            .for_each(|(g, v)| *g += v);
                    }
                }
            }
        }
    }
}
