use super::kernels::{self, ConvGeom, ConvGrads};
use super::{Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

/// Per-channel statistics of a training-mode batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<T>,
}

const BN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, geom: ConvGeom, cols: Vec<T> },
    MaxPool2 { input: Var, argmax: Vec<u32> },
    GlobalAvgPool { input: Var },
    Relu { input: Var },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch: bool },
    Dense { input: Var, weight: Var, bias: Var },
    Softmax { input: Var, temperature: T },
    CrossEntropy { probs: Var, labels: Vec<usize>, mask: Vec<bool>, kept: usize },
    Kl { p: Var, q: Var, mask: Vec<bool>, kept: usize },
    Entropy { p: Var, mask: Vec<bool>, kept: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { input: Var, factor: T },
    Sum { input: Var },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of executed operations.
///
/// Operations are appended as they execute; [`Graph::backward`] walks them
/// in exact reverse order. A graph built with [`Graph::inference`] keeps no
/// backward state and refuses to differentiate.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
    inference: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

fn log_floor<T: Real>(v: T) -> T {
    v.max(T::min_positive_value()).ln()
}

fn masked_count(mask: &Option<&[bool]>, rows: usize, op: &'static str) -> Result<(Vec<bool>, usize)> {
    match mask {
        None => Ok((vec![true; rows], rows)),
        Some(m) if m.len() == rows => Ok((m.to_vec(), m.iter().filter(|&&b| b).count())),
        Some(m) => Err(shape_err(op, format!("mask has {} rows, expected {rows}", m.len()))),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), backward_done: false, inference: false }
    }

    /// A graph that records values only; `backward` is unavailable.
    pub fn inference() -> Self {
        Self { inference: true, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Scalar value of a one-element variable.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("graph nodes have valid shapes")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool, name: &'static str) -> Result<Var> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs_grad = needs_grad && !self.inference;
        let op = if self.inference { Op::Leaf } else { op };
        self.nodes.push(Node { shape, value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        !self.inference && vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a tensor. It takes part in differentiation iff `requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad, "leaf")
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false, "constant")
    }

    /// Copy of `v` that contributes no adjoint upstream.
    pub fn stop_gradient(&mut self, v: Var) -> Result<Var> {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false, "stop_gradient")
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, padding: Padding) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(shape_err("conv2d", format!("expected 4-d input and kernel, got {xs:?} and {ks:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (k, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if c != kc {
            return Err(shape_err("conv2d", format!("input has {c} channels but kernel expects {kc}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [k] {
                return Err(shape_err("conv2d", format!("bias shape {:?} does not match {k} output channels", self.shape(b))));
            }
        }
        let (pad_h, pad_w) = match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(shape_err("conv2d", format!("same padding needs odd kernel extents, got {kh}x{kw}")));
                }
                (kh / 2, kw / 2)
            }
            Padding::Valid => (0, 0),
        };
        if h + 2 * pad_h < kh || w + 2 * pad_w < kw {
            return Err(shape_err("conv2d", format!("kernel {kh}x{kw} larger than input {h}x{w}")));
        }
        let geom = ConvGeom { n, c, h, w, k, kh, kw, pad_h, pad_w, out_h: h + 2 * pad_h - kh + 1, out_w: w + 2 * pad_w - kw + 1 };
        let mut vars = vec![input, kernel];
        vars.extend(bias);
        let needs = self.any_grad(&vars);
        let mut out = vec![T::zero(); n * geom.out_sample()];
        let mut cols = Vec::new();
        kernels::conv_forward(
            &geom,
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            &mut out,
            needs.then_some(&mut cols),
        );
        self.push(vec![n, k, geom.out_h, geom.out_w], out, Op::Conv2d { input, kernel, bias, geom, cols }, needs, "conv2d")
    }

    /// 2x2 max pooling with stride 2; ties resolve to the first element in
    /// row-major window order.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(shape_err("maxpool2", format!("expected 4-d input, got {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err("maxpool2", format!("spatial extents must be even, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let needs = self.any_grad(&[input]);
        self.push(vec![n, c, oh, ow], out, Op::MaxPool2 { input, argmax }, needs, "maxpool2")
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(shape_err("global_avg_pool", format!("expected 4-d input, got {s:?}")));
        }
        let area = s[2] * s[3];
        let inv = T::one() / T::from_usize(area).unwrap();
        let out = self.value(input).chunks(area).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        let needs = self.any_grad(&[input]);
        self.push(vec![s[0], s[1]], out, Op::GlobalAvgPool { input }, needs, "global_avg_pool")
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).iter().map(|&v| v.max(T::zero())).collect();
        let shape = self.shape(input).to_vec();
        let needs = self.any_grad(&[input]);
        self.push(shape, out, Op::Relu { input }, needs, "relu")
    }

    fn check_bn(&self, input: Var, params: &[Var]) -> Result<(usize, usize, usize)> {
        let s = self.shape(input);
        if s.len() != 4 {
            return Err(shape_err("batchnorm2d", format!("expected 4-d input, got {s:?}")));
        }
        for &p in params {
            if self.shape(p) != [s[1]] {
                return Err(shape_err("batchnorm2d", format!("parameter shape {:?} does not match {} channels", self.shape(p), s[1])));
            }
        }
        Ok((s[0], s[1], s[2] * s[3]))
    }

    /// Training-mode batch normalization over (N, H, W) per channel.
    pub fn batchnorm2d_train(&mut self, input: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats<T>)> {
        let (n, c, area) = self.check_bn(input, &[gamma, beta])?;
        let m = n * area;
        let mf = T::from_usize(m).unwrap();
        let eps = T::from_f64c(BN_EPS);
        let x = self.value(input);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                let plane = &x[(s * c + ch) * area..(s * c + ch + 1) * area];
                mean[ch] = mean[ch] + plane.iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|v| *v = *v / mf);
        for s in 0..n {
            for ch in 0..c {
                let plane = &x[(s * c + ch) * area..(s * c + ch + 1) * area];
                let mu = mean[ch];
                var[ch] = var[ch] + plane.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
            }
        }
        let biased: Vec<T> = var.iter().map(|&v| v / mf).collect();
        let inv_std: Vec<T> = biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for s in 0..n {
            for ch in 0..c {
                let r = (s * c + ch) * area..(s * c + ch + 1) * area;
                for i in r {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        let unbiased = if m > 1 {
            let d = T::from_usize(m - 1).unwrap();
            var.iter().map(|&v| v / d).collect()
        } else {
            biased
        };
        let stats = BatchStats { mean, var: unbiased };
        let shape = self.shape(input).to_vec();
        let needs = self.any_grad(&[input, gamma, beta]);
        let v = self.push(shape, out, Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch: true }, needs, "batchnorm2d")?;
        Ok((v, stats))
    }

    /// Evaluation-mode batch normalization with fixed statistics.
    pub fn batchnorm2d_eval(&mut self, input: Var, gamma: Var, beta: Var, mean: &[T], var: &[T]) -> Result<Var> {
        let (n, c, area) = self.check_bn(input, &[gamma, beta])?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err("batchnorm2d", format!("running statistics must have {c} entries")));
        }
        let eps = T::from_f64c(BN_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let x = self.value(input);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for s in 0..n {
            for ch in 0..c {
                for i in (s * c + ch) * area..(s * c + ch + 1) * area {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        let shape = self.shape(input).to_vec();
        let needs = self.any_grad(&[input, gamma, beta]);
        self.push(shape, out, Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch: false }, needs, "batchnorm2d")
    }

    /// `x[N,D] · weight[K,D]^T + bias[K]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.shape(bias) != [ws[0]] {
            return Err(shape_err(
                "dense",
                format!("input {xs:?}, weight {ws:?}, bias {:?} are incompatible", self.shape(bias)),
            ));
        }
        let (n, d, k) = (xs[0], xs[1], ws[0]);
        let b = self.value(bias);
        let mut out: Vec<T> = (0..n).flat_map(|_| b.iter().copied()).collect();
        T::gemm(n, d, k, T::one(), self.value(input), d as isize, 1, self.value(weight), 1, d as isize, T::one(), &mut out, k as isize, 1);
        let needs = self.any_grad(&[input, weight, bias]);
        self.push(vec![n, k], out, Op::Dense { input, weight, bias }, needs, "dense")
    }

    /// Row-wise softmax of `logits / temperature`, max-subtracted.
    pub fn softmax(&mut self, input: Var, temperature: T) -> Result<Var> {
        if !(temperature > T::zero()) || !temperature.is_finite() {
            return Err(TensorError::Invalid { op: "softmax", detail: format!("temperature must be positive, got {temperature:?}") });
        }
        let s = self.shape(input).to_vec();
        if s.len() != 2 {
            return Err(shape_err("softmax", format!("expected [N, C] logits, got {s:?}")));
        }
        let out = softmax_rows(self.value(input), s[1], temperature);
        let needs = self.any_grad(&[input]);
        self.push(s, out, Op::Softmax { input, temperature }, needs, "softmax")
    }

    fn check_dist(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(shape_err(op, format!("expected [N, C] probabilities, got {s:?}")));
        }
        if self.value(v).iter().any(|&p| p < T::zero()) {
            return Err(TensorError::Invalid { op, detail: "negative probability".into() });
        }
        Ok((s[0], s[1]))
    }

    /// Mean of `-ln p(y)` over kept rows; an empty selection yields 0.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize], mask: Option<&[bool]>) -> Result<Var> {
        let (n, c) = self.check_dist(probs, "cross_entropy")?;
        if labels.len() != n {
            return Err(shape_err("cross_entropy", format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(TensorError::Invalid { op: "cross_entropy", detail: format!("label {bad} out of range for {c} classes") });
        }
        let (mask, kept) = masked_count(&mask, n, "cross_entropy")?;
        let p = self.value(probs);
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            if mask[i] {
                total = total - log_floor(p[i * c + y]);
            }
        }
        let loss = if kept == 0 { T::zero() } else { total / T::from_usize(kept).unwrap() };
        let needs = self.any_grad(&[probs]);
        self.push(vec![1], vec![loss], Op::CrossEntropy { probs, labels: labels.to_vec(), mask, kept }, needs, "cross_entropy")
    }

    /// Mean over kept rows of `Σ p (ln p − ln q)`, with `0 ln 0 = 0`.
    pub fn kl_divergence(&mut self, p: Var, q: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (n, c) = self.check_dist(p, "kl_divergence")?;
        let shape_q = self.check_dist(q, "kl_divergence")?;
        if shape_q != (n, c) {
            return Err(shape_err("kl_divergence", format!("p is {n}x{c} but q is {}x{}", shape_q.0, shape_q.1)));
        }
        let (mask, kept) = masked_count(&mask, n, "kl_divergence")?;
        let (pv, qv) = (self.value(p), self.value(q));
        let mut total = T::zero();
        for row in 0..n {
            if !mask[row] {
                continue;
            }
            for i in row * c..(row + 1) * c {
                if pv[i] > T::zero() {
                    total = total + pv[i] * (pv[i].ln() - log_floor(qv[i]));
                }
            }
        }
        let loss = if kept == 0 { T::zero() } else { total / T::from_usize(kept).unwrap() };
        let needs = self.any_grad(&[p, q]);
        self.push(vec![1], vec![loss], Op::Kl { p, q, mask, kept }, needs, "kl_divergence")
    }

    /// Mean over kept rows of `-Σ p ln p`.
    pub fn entropy(&mut self, p: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (n, c) = self.check_dist(p, "entropy")?;
        let (mask, kept) = masked_count(&mask, n, "entropy")?;
        let pv = self.value(p);
        let mut total = T::zero();
        for row in (0..n).filter(|&r| mask[r]) {
            for &v in &pv[row * c..(row + 1) * c] {
                if v > T::zero() {
                    total = total - v * v.ln();
                }
            }
        }
        let loss = if kept == 0 { T::zero() } else { total / T::from_usize(kept).unwrap() };
        let needs = self.any_grad(&[p]);
        self.push(vec![1], vec![loss], Op::Entropy { p, mask, kept }, needs, "entropy")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.any_grad(&[a, b]);
        self.push(shape, out, Op::Add { a, b }, needs, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.any_grad(&[a, b]);
        self.push(shape, out, Op::Mul { a, b }, needs, "mul")
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let out = self.value(input).iter().map(|&x| x * factor).collect();
        let shape = self.shape(input).to_vec();
        let needs = self.any_grad(&[input]);
        self.push(shape, out, Op::Scale { input, factor }, needs, "scale")
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let total = self.value(input).iter().copied().sum();
        let needs = self.any_grad(&[input]);
        self.push(vec![1], vec![total], Op::Sum { input }, needs, "sum")
    }

    /// Adjoint of `v` from the last backward pass, if it received one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.inference {
            return Err(TensorError::Invalid { op: "backward", detail: "graph was built for inference".into() });
        }
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(ls.to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Op::Leaf, Some(g)) = (&node.op, g) {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite { op: "backward" });
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        // Zero-initialized accumulator for `v`.
        fn acc<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> &'a mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()])
        }
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, geom, cols } => {
                let mut dx = wants(*input).then(|| acc(grads, nodes, *input).split_off(0));
                let mut dk = wants(*kernel).then(|| acc(grads, nodes, *kernel).split_off(0));
                let mut db = bias.filter(|b| wants(*b)).map(|b| acc(grads, nodes, b).split_off(0));
                kernels::conv_backward(
                    geom,
                    &nodes[kernel.0].value,
                    cols,
                    g,
                    ConvGrads { dx: dx.as_deref_mut(), dkernel: dk.as_deref_mut(), dbias: db.as_deref_mut() },
                );
                if let Some(v) = dx {
                    grads[input.0] = Some(v);
                }
                if let Some(v) = dk {
                    grads[kernel.0] = Some(v);
                }
                if let (Some(v), Some(b)) = (db, bias) {
                    grads[b.0] = Some(v);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if wants(*input) {
                    let dx = acc(grads, nodes, *input);
                    for (&src, &gv) in argmax.iter().zip(g) {
                        dx[src as usize] = dx[src as usize] + gv;
                    }
                }
            }
            Op::GlobalAvgPool { input } => {
                if wants(*input) {
                    let s = &nodes[input.0].shape;
                    let area = s[2] * s[3];
                    let inv = T::one() / T::from_usize(area).unwrap();
                    let dx = acc(grads, nodes, *input);
                    for (plane, &gv) in dx.chunks_mut(area).zip(g) {
                        plane.iter_mut().for_each(|d| *d = *d + gv * inv);
                    }
                }
            }
            Op::Relu { input } => {
                if wants(*input) {
                    let x = &nodes[input.0].value;
                    let dx = acc(grads, nodes, *input);
                    for i in 0..dx.len() {
                        if x[i] > T::zero() {
                            dx[i] = dx[i] + g[i];
                        }
                    }
                }
            }
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch } => {
                let s = &nodes[input.0].shape;
                let (n, c, area) = (s[0], s[1], s[2] * s[3]);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for smp in 0..n {
                    for ch in 0..c {
                        for i in (smp * c + ch) * area..(smp * c + ch + 1) * area {
                            sum_g[ch] = sum_g[ch] + g[i];
                            sum_gx[ch] = sum_gx[ch] + g[i] * xhat[i];
                        }
                    }
                }
                if wants(*beta) {
                    let d = acc(grads, nodes, *beta);
                    (0..c).for_each(|ch| d[ch] = d[ch] + sum_g[ch]);
                }
                if wants(*gamma) {
                    let d = acc(grads, nodes, *gamma);
                    (0..c).for_each(|ch| d[ch] = d[ch] + sum_gx[ch]);
                }
                if wants(*input) {
                    let gam = &nodes[gamma.0].value;
                    let m = T::from_usize(n * area).unwrap();
                    let dx = acc(grads, nodes, *input);
                    for smp in 0..n {
                        for ch in 0..c {
                            let k = gam[ch] * inv_std[ch];
                            for i in (smp * c + ch) * area..(smp * c + ch + 1) * area {
                                let d = if *batch {
                                    k * (g[i] - (sum_g[ch] + xhat[i] * sum_gx[ch]) / m)
                                } else {
                                    k * g[i]
                                };
                                dx[i] = dx[i] + d;
                            }
                        }
                    }
                }
            }
            Op::Dense { input, weight, bias } => {
                let (n, d) = (nodes[input.0].shape[0], nodes[input.0].shape[1]);
                let k = nodes[weight.0].shape[0];
                if wants(*input) {
                    let w = &nodes[weight.0].value;
                    let dx = acc(grads, nodes, *input);
                    T::gemm(n, k, d, T::one(), g, k as isize, 1, w, d as isize, 1, T::one(), dx, d as isize, 1);
                }
                if wants(*weight) {
                    let x = &nodes[input.0].value;
                    let dw = acc(grads, nodes, *weight);
                    T::gemm(k, n, d, T::one(), g, 1, k as isize, x, d as isize, 1, T::one(), dw, d as isize, 1);
                }
                if wants(*bias) {
                    let db = acc(grads, nodes, *bias);
                    for row in g.chunks(k) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                }
            }
            Op::Softmax { input, temperature } => {
                if wants(*input) {
                    let c = node.shape[1];
                    let y = &node.value;
                    let inv_t = T::one() / *temperature;
                    let dx = acc(grads, nodes, *input);
                    for r in 0..node.shape[0] {
                        let span = r * c..(r + 1) * c;
                        let dot: T = span.clone().map(|i| y[i] * g[i]).sum();
                        for i in span {
                            dx[i] = dx[i] + inv_t * y[i] * (g[i] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy { probs, labels, mask, kept } => {
                if wants(*probs) && *kept > 0 {
                    let c = nodes[probs.0].shape[1];
                    let scale = g[0] / T::from_usize(*kept).unwrap();
                    let p = &nodes[probs.0].value;
                    let dp = acc(grads, nodes, *probs);
                    for (r, &y) in labels.iter().enumerate() {
                        if mask[r] {
                            let i = r * c + y;
                            dp[i] = dp[i] - scale / p[i].max(T::min_positive_value());
                        }
                    }
                }
            }
            Op::Kl { p, q, mask, kept } => {
                if *kept > 0 {
                    let c = nodes[p.0].shape[1];
                    let scale = g[0] / T::from_usize(*kept).unwrap();
                    let pv = nodes[p.0].value.clone();
                    let qv = &nodes[q.0].value;
                    if wants(*q) {
                        let dq = acc(grads, nodes, *q);
                        for r in (0..mask.len()).filter(|&r| mask[r]) {
                            for i in r * c..(r + 1) * c {
                                dq[i] = dq[i] - scale * pv[i] / qv[i].max(T::min_positive_value());
                            }
                        }
                    }
                    if wants(*p) {
                        let dp = acc(grads, nodes, *p);
                        for r in (0..mask.len()).filter(|&r| mask[r]) {
                            for i in r * c..(r + 1) * c {
                                dp[i] = dp[i] + scale * (log_floor(pv[i]) + T::one() - log_floor(qv[i]));
                            }
                        }
                    }
                }
            }
            Op::Entropy { p, mask, kept } => {
                if wants(*p) && *kept > 0 {
                    let c = nodes[p.0].shape[1];
                    let scale = g[0] / T::from_usize(*kept).unwrap();
                    let pv = &nodes[p.0].value;
                    let dp = acc(grads, nodes, *p);
                    for r in (0..mask.len()).filter(|&r| mask[r]) {
                        for i in r * c..(r + 1) * c {
                            dp[i] = dp[i] - scale * (log_floor(pv[i]) + T::one());
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if wants(v) {
                        let d = acc(grads, nodes, v);
                        d.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv);
                    }
                }
            }
            Op::Mul { a, b } => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if wants(v) {
                        let o = &nodes[other.0].value;
                        let d = acc(grads, nodes, v);
                        for i in 0..d.len() {
                            d[i] = d[i] + g[i] * o[i];
                        }
                    }
                }
            }
            Op::Scale { input, factor } => {
                if wants(*input) {
                    let d = acc(grads, nodes, *input);
                    d.iter_mut().zip(g).for_each(|(d, &gv)| *d = *d + gv * *factor);
                }
            }
            Op::Sum { input } => {
                if wants(*input) {
                    let d = acc(grads, nodes, *input);
                    d.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
        }
    }
}

/// Row-wise temperature softmax on raw slices.
pub fn softmax_rows<T: Real>(logits: &[T], classes: usize, temperature: T) -> Vec<T> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        out.extend(row.iter().map(|&z| ((z - max) / temperature).exp()));
        let total: T = out[start..].iter().copied().sum();
        out[start..].iter_mut().for_each(|v| *v = *v / total);
    }
    out
}
