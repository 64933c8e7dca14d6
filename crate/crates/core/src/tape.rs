//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every operation evaluates eagerly, stores its value in a new node and
//! records what `backward` needs. Node ids are allocated in order, so the
//! inputs of a node always precede it and a reverse sweep is a valid
//! topological order.

use crate::error::{Error, Result};
use crate::tensor::{axis_extents, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Affine { x: Var, scale: f64 },
    LeakyRelu { x: Var, slope: f64 },
    BatchNorm(Box<BatchNormSaved>),
    MaxAxis { x: Var, dims: (usize, usize, usize), argmax: Vec<usize> },
    SumAxis { x: Var, dims: (usize, usize, usize), scale: f64 },
    Softmax { x: Var, cols: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64>, mean: bool },
    Cosine(Box<CosineSaved>),
    Conv1dCircular { x: Var, w: Var, b: Var, dims: (usize, usize, usize) },
    Conv2d(Box<Conv2dSaved>),
    AvgPool2d { x: Var, k: usize, dims: [usize; 4] },
    Concat { inputs: Vec<Var>, outer: usize, widths: Vec<usize> },
    GatherRows { x: Var, idx: Vec<usize>, width: usize },
    Reshape { x: Var },
    ScaleRows { x: Var, w: Var, inner: usize },
    WeightedSum { x: Var, w: Var, dims: (usize, usize, usize) },
}

#[derive(Debug)]
struct BatchNormSaved {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

#[derive(Debug)]
struct CosineSaved {
    a: Var,
    b: Var,
    dims: (usize, usize, usize),
    eps: f64,
    norm_a: Vec<f64>,
    norm_b: Vec<f64>,
}

#[derive(Debug)]
struct Conv2dSaved {
    x: Var,
    w: Var,
    b: Var,
    in_dims: [usize; 4],
    out_hw: (usize, usize),
    stride: usize,
    cols: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch-norm mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NormMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with stored running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Discrete choices made during a forward pass: max winners, activation
/// branches and neighbour lists, in the order they were taken.
///
/// Replaying a recorded pattern on a later pass pins that pass to the same
/// smooth piece of a piecewise-smooth function, which is what finite
/// differences need near a kink.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Pattern {
    choices: Vec<Vec<usize>>,
}

impl Pattern {
    pub fn len(&self) -> usize {
        self.choices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.choices.is_empty()
    }
}

#[derive(Debug, Default)]
enum PatternMode {
    #[default]
    Off,
    Record(Pattern),
    Replay(Pattern, usize),
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    pub(crate) bound: Vec<(usize, Var)>,
    pattern: PatternMode,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// `c = a * b + beta * c` for row-major `c` of shape `m x n`, with arbitrary
/// strides on `a` (`m x k`) and `b` (`k x n`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        (rows - 1) * rs + (cols - 1) * cs + 1
    };
    if k > 0 {
        assert!(a.len() >= span(m, k, a_strides));
        assert!(b.len() >= span(k, n, b_strides));
    }
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn accumulate<'a>(slot: &'a mut Option<Tensor>, shape: &[usize]) -> &'a mut [f64] {
    slot.get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Starts recording discrete choices; see [`Pattern`].
    pub fn record_pattern(&mut self) {
        self.pattern = PatternMode::Record(Pattern::default());
    }

    /// Makes every subsequent discrete choice follow `pattern`.
    pub fn replay_pattern(&mut self, pattern: Pattern) {
        self.pattern = PatternMode::Replay(pattern, 0);
    }

    /// The recorded pattern, if recording.
    pub fn take_pattern(&mut self) -> Option<Pattern> {
        match std::mem::take(&mut self.pattern) {
            PatternMode::Record(p) => Some(p),
            other => {
                self.pattern = other;
                None
            }
        }
    }

    /// Passes a freshly computed choice through the pattern machinery:
    /// records it, or swaps in the replayed one.
    pub(crate) fn pin(&mut self, op: &'static str, computed: Vec<usize>) -> Result<Vec<usize>> {
        match &mut self.pattern {
            PatternMode::Off => Ok(computed),
            PatternMode::Record(p) => {
                p.choices.push(computed.clone());
                Ok(computed)
            }
            PatternMode::Replay(p, cursor) => {
                let Some(choice) = p.choices.get(*cursor) else {
                    return Err(Error::invalid(op, "replayed pattern is exhausted"));
                };
                if choice.len() != computed.len() {
                    return Err(Error::invalid(op, "replayed pattern does not match this pass"));
                }
                *cursor += 1;
                Ok(choice.clone())
            }
        }
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Batch mean and biased variance computed by a train-mode batch norm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm(s) if s.train => Some((&s.batch_mean, &s.batch_var)),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            0.0,
            &mut out,
        );
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b }, &[a, b]))
    }

    fn zip_same(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op_name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Adds `bias` (shape `[C]`) to every row of `x` (last axis `C`).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(bias) != [c] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(c) {
            row.iter_mut().zip(&b).for_each(|(v, bi)| *v += bi);
        }
        Ok(self.push(value, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let mut value = self.value(x).clone();
        value.data_mut().iter_mut().for_each(|v| *v = scale * *v + shift);
        self.push(value, Op::Affine { x, scale }, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    /// Elementwise `max(x, slope * x)`. The derivative at zero is `slope`.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::invalid("leaky_relu", format!("slope {slope} outside (0,1)")));
        }
        let mut value = self.value(x).clone();
        if matches!(self.pattern, PatternMode::Off) {
            value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = if *v > 0.0 { *v } else { slope * *v });
        } else {
            let branch = value.data().iter().map(|&v| (v > 0.0) as usize).collect();
            let branch = self.pin("leaky_relu", branch)?;
            value
                .data_mut()
                .iter_mut()
                .zip(branch)
                .for_each(|(v, b)| *v = if b == 1 { *v } else { slope * *v });
        }
        Ok(self.push(value, Op::LeakyRelu { x, slope }, &[x]))
    }

    /// Per-channel batch normalization of `x: [R, C]` with scale `gamma` and
    /// shift `beta` (both `[C]`).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: NormMode<'_>,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::invalid("batch_norm", format!("expected [R, C], got {shape:?}")));
        }
        let (rows, c) = (shape[0], shape[1]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", &shape, self.shape(gamma)));
        }
        let xs = self.value(x).data();
        let (mean, var, train) = match mode {
            NormMode::Train => {
                if rows < 2 {
                    return Err(Error::BatchTooSmall(rows));
                }
                let mut mean = vec![0.0; c];
                for row in xs.chunks(c) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; c];
                for row in xs.chunks(c) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= rows as f64);
                (mean, var, true)
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", &shape, &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for (i, &v) in xs.iter().enumerate() {
            let ch = i % c;
            xhat[i] = (v - mean[ch]) * inv_std[ch];
            out[i] = g[ch] * xhat[i] + b[ch];
        }
        let saved = BatchNormSaved {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
            batch_mean: mean,
            batch_var: var,
        };
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm(Box::new(saved)),
            &[x, gamma, beta],
        ))
    }

    fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        let mut out: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &d)| d)
            .collect();
        if out.is_empty() {
            out.push(1);
        }
        out
    }

    /// Maximum along `axis`, with ties resolved toward the lowest index.
    /// Returns the reduced tensor and the winning index for every output slot.
    pub fn max_over_axis(&mut self, x: Var, axis: usize) -> Result<(Var, Vec<usize>)> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("max_over_axis", format!("axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        if len == 0 {
            return Err(Error::EmptyAxis { op: "max_over_axis" });
        }
        let xs = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    let v = xs[base + i];
                    let slot = o * inner + i;
                    if l == 0 || v > out[slot] {
                        out[slot] = v;
                        argmax[slot] = l;
                    }
                }
            }
        }
        if !matches!(self.pattern, PatternMode::Off) {
            argmax = self.pin("max_over_axis", argmax)?;
            let xs = self.value(x).data();
            for (slot, &l) in argmax.iter().enumerate() {
                let (o, i) = (slot / inner, slot % inner);
                out[slot] = xs[(o * len + l) * inner + i];
            }
        }
        let var = self.push(
            Tensor::from_parts(Self::reduced_shape(&shape, axis), out),
            Op::MaxAxis {
                x,
                dims: (outer, len, inner),
                argmax: argmax.clone(),
            },
            &[x],
        );
        Ok((var, argmax))
    }

    fn sum_scaled(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let op = if mean { "mean_over_axis" } else { "sum_over_axis" };
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(op, format!("axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        if len == 0 {
            return Err(Error::EmptyAxis { op });
        }
        let scale = if mean { 1.0 / len as f64 } else { 1.0 };
        let xs = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xs[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        Ok(self.push(
            Tensor::from_parts(Self::reduced_shape(&shape, axis), out),
            Op::SumAxis {
                x,
                dims: (outer, len, inner),
                scale,
            },
            &[x],
        ))
    }

    pub fn sum_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.sum_scaled(x, axis, false)
    }

    pub fn mean_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.sum_scaled(x, axis, true)
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let flat = self.reshape(x, &[n])?;
        self.sum_over_axis(flat, 0)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let flat = self.reshape(x, &[n])?;
        self.mean_over_axis(flat, 0)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let cols = *self.shape(x).last().unwrap();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        self.push(value, Op::Softmax { x, cols }, &[x])
    }

    fn cross_entropy_impl(&mut self, logits: Var, labels: &[usize], mean: bool) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape("softmax_cross_entropy", &shape, &[labels.len()]));
        }
        let classes = shape[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let xs = self.value(logits).data();
        let mut probs = vec![0.0; xs.len()];
        let mut losses = Vec::with_capacity(labels.len());
        for (r, (row, &label)) in xs.chunks(classes).zip(labels).enumerate() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            losses.push(lse - row[label]);
            for (c, v) in row.iter().enumerate() {
                probs[r * classes + c] = (v - lse).exp();
            }
        }
        let value = if mean {
            Tensor::scalar(losses.iter().sum::<f64>() / labels.len() as f64)
        } else {
            Tensor::vector(losses)
        };
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                mean,
            },
            &[logits],
        ))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.cross_entropy_impl(logits, labels, true)
    }

    /// Per-row softmax cross-entropy, shape `[B]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.cross_entropy_impl(logits, labels, false)
    }

    /// Cosine similarity between every row `a[g, n, :]` and the reference
    /// `b[g, :]`, giving `[G, N]`. Norms are floored at `eps`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 2 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("cosine_similarity", &sa, &sb));
        }
        let (groups, n, d) = (sa[0], sa[1], sa[2]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let norm_b: Vec<f64> = bv.chunks(d).map(norm).collect();
        let norm_a: Vec<f64> = av.chunks(d).map(norm).collect();
        let mut out = vec![0.0; groups * n];
        for g in 0..groups {
            let bref = &bv[g * d..(g + 1) * d];
            for j in 0..n {
                let r = g * n + j;
                let arow = &av[r * d..(r + 1) * d];
                let dot: f64 = arow.iter().zip(bref).map(|(x, y)| x * y).sum();
                out[r] = dot / (norm_a[r].max(eps) * norm_b[g].max(eps));
            }
        }
        let saved = CosineSaved {
            a,
            b,
            dims: (groups, n, d),
            eps,
            norm_a,
            norm_b,
        };
        Ok(self.push(
            Tensor::from_parts(vec![groups, n], out),
            Op::Cosine(Box::new(saved)),
            &[a, b],
        ))
    }

    /// Cosine similarity of two vectors of equal length, as a one-element tensor.
    pub fn cosine_similarity_vec(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 1 || sa != sb {
            return Err(Error::shape("cosine_similarity", &sa, &sb));
        }
        let a3 = self.reshape(a, &[1, 1, sa[0]])?;
        let b2 = self.reshape(b, &[1, sb[0]])?;
        let s = self.cosine_similarity(a3, b2, eps)?;
        self.reshape(s, &[1])
    }

    /// Kernel-3 convolution along the middle axis of `x: [G, N, C]` with
    /// circular padding. `w` is `[C, C, 3]` (out, in, tap) and tap 0 reads the
    /// previous position.
    pub fn conv1d_circular(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::invalid("conv1d_circular", format!("expected [G, N, C], got {sx:?}")));
        }
        let (groups, n, c) = (sx[0], sx[1], sx[2]);
        if n < 3 {
            return Err(Error::invalid("conv1d_circular", format!("needs N >= 3, got {n}")));
        }
        if self.shape(w) != [c, c, 3] || self.shape(b) != [c] {
            return Err(Error::shape("conv1d_circular", &sx, self.shape(w)));
        }
        let (xs, ws, bs) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; xs.len()];
        for g in 0..groups {
            for pos in 0..n {
                let dst = &mut out[(g * n + pos) * c..(g * n + pos + 1) * c];
                dst.copy_from_slice(bs);
                for t in 0..3 {
                    let src = (pos + n + t - 1) % n;
                    let xrow = &xs[(g * n + src) * c..(g * n + src + 1) * c];
                    for (co, d) in dst.iter_mut().enumerate() {
                        let wrow = &ws[co * c * 3..(co + 1) * c * 3];
                        *d += xrow
                            .iter()
                            .enumerate()
                            .map(|(ci, xv)| wrow[ci * 3 + t] * xv)
                            .sum::<f64>();
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(sx, out),
            Op::Conv1dCircular {
                x,
                w,
                b,
                dims: (groups, n, c),
            },
            &[x, w, b],
        ))
    }

    /// 3x3 convolution with zero padding 1 on NHWC input `x: [V, H, W, Cin]`;
    /// `w` is `[Cout, Cin, 3, 3]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[3] || sw[2] != 3 || sw[3] != 3 {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let (v, h, wd, cin) = (sx[0], sx[1], sx[2], sx[3]);
        let cout = sw[0];
        if self.shape(b) != [cout] {
            return Err(Error::shape("conv2d", &sw, self.shape(b)));
        }
        let ho = (h + 2 - 3) / stride + 1;
        let wo = (wd + 2 - 3) / stride + 1;
        let q = cin * 9;
        let rows = v * ho * wo;
        let xs = self.value(x).data();
        let mut cols = vec![0.0; rows * q];
        for img in 0..v {
            for oy in 0..ho {
                for ox in 0..wo {
                    let r = (img * ho + oy) * wo + ox;
                    let col = &mut cols[r * q..(r + 1) * q];
                    for ky in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let src = ((img * h + iy as usize) * wd + ix as usize) * cin;
                            for ci in 0..cin {
                                col[ci * 9 + ky * 3 + kx] = xs[src + ci];
                            }
                        }
                    }
                }
            }
        }
        let mut out = vec![0.0; rows * cout];
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(self.value(b).data());
        }
        gemm(rows, q, cout, &cols, (q, 1), self.value(w).data(), (1, q), 1.0, &mut out);
        let saved = Conv2dSaved {
            x,
            w,
            b,
            in_dims: [v, h, wd, cin],
            out_hw: (ho, wo),
            stride,
            cols,
        };
        Ok(self.push(
            Tensor::from_parts(vec![v, ho, wo, cout], out),
            Op::Conv2d(Box::new(saved)),
            &[x, w, b],
        ))
    }

    /// Non-overlapping `k x k` average pooling on NHWC input.
    pub fn avg_pool_2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || k == 0 || sx[1] % k != 0 || sx[2] % k != 0 {
            return Err(Error::invalid("avg_pool_2d", format!("kernel {k} for {sx:?}")));
        }
        let (v, h, w, c) = (sx[0], sx[1], sx[2], sx[3]);
        let (ho, wo) = (h / k, w / k);
        let xs = self.value(x).data();
        let mut out = vec![0.0; v * ho * wo * c];
        let norm = 1.0 / (k * k) as f64;
        for img in 0..v {
            for y in 0..h {
                for xx in 0..w {
                    let src = ((img * h + y) * w + xx) * c;
                    let dst = ((img * ho + y / k) * wo + xx / k) * c;
                    for ch in 0..c {
                        out[dst + ch] += xs[src + ch] * norm;
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![v, ho, wo, c], out),
            Op::AvgPool2d {
                x,
                k,
                dims: [v, h, w, c],
            },
            &[x],
        ))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} for {first:?}")));
        }
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
        }
        let (outer, _, inner) = axis_extents(&first, axis);
        let widths: Vec<usize> = inputs.iter().map(|&v| self.shape(v)[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total / inner;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                widths,
            },
            inputs,
        ))
    }

    /// Selects rows of `x` (viewed as `[R, rest]`) by index, repeats allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let rows = sx[0];
        let width: usize = sx[1..].iter().product();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid("gather_rows", format!("index {bad} >= {rows}")));
        }
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows", "empty index list"));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            out.extend_from_slice(&xs[i * width..(i + 1) * width]);
        }
        let mut shape = sx;
        shape[0] = idx.len();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
                width,
            },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Multiplies each trailing block of `x` by the matching entry of `w`,
    /// whose shape must be a prefix of `x`'s shape (e.g. `[G, N, C] * [G, N]`).
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() > sx.len() || sx[..sw.len()] != sw[..] {
            return Err(Error::shape("scale_rows", &sx, &sw));
        }
        let inner: usize = sx[sw.len()..].iter().product();
        let ws = self.value(w).data().to_vec();
        let mut value = self.value(x).clone();
        for (chunk, wv) in value.data_mut().chunks_mut(inner).zip(&ws) {
            chunk.iter_mut().for_each(|v| *v *= wv);
        }
        Ok(self.push(value, Op::ScaleRows { x, w, inner }, &[x, w]))
    }

    /// `out[g, :] = sum_n w[g, n] * x[g, n, :]` for `x: [G, N, C]`, `w: [G, N]`.
    pub fn weighted_sum(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 2 || sx[..2] != sw[..] {
            return Err(Error::shape("weighted_sum", &sx, &sw));
        }
        let (groups, n, c) = (sx[0], sx[1], sx[2]);
        let (xs, ws) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0; groups * c];
        for g in 0..groups {
            for j in 0..n {
                let wv = ws[g * n + j];
                let row = &xs[(g * n + j) * c..(g * n + j + 1) * c];
                for (o, v) in out[g * c..(g + 1) * c].iter_mut().zip(row) {
                    *o += wv * v;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![groups, c], out),
            Op::WeightedSum {
                x,
                w,
                dims: (groups, n, c),
            },
            &[x, w],
        ))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must have one element, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(id);
            let Some(g) = upper[0].as_ref() else { continue };
            self.backward_node(node, g.data(), lower);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    let da = accumulate(&mut grads[a.0], self.shape(*a));
                    gemm(m, n, k, g, (n, 1), self.value(*b).data(), (1, n), 1.0, da);
                }
                if self.needs(*b) {
                    let db = accumulate(&mut grads[b.0], self.shape(*b));
                    gemm(k, m, n, self.value(*a).data(), (1, k), g, (n, 1), 1.0, db);
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if self.needs(*a) {
                    let da = accumulate(&mut grads[a.0], self.shape(*a));
                    da.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
                if self.needs(*b) {
                    let db = accumulate(&mut grads[b.0], self.shape(*b));
                    db.iter_mut().zip(g).for_each(|(d, gv)| *d += sign * gv);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    let da = accumulate(&mut grads[a.0], self.shape(*a));
                    for ((d, gv), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    let db = accumulate(&mut grads[b.0], self.shape(*b));
                    for ((d, gv), x) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if self.needs(*x) {
                    let dx = accumulate(&mut grads[x.0], self.shape(*x));
                    dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
                if self.needs(*bias) {
                    let c = self.shape(*bias)[0];
                    let db = accumulate(&mut grads[bias.0], &[c]);
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, gv)| *d += gv);
                    }
                }
            }
            Op::Affine { x, scale } => {
                let dx = accumulate(&mut grads[x.0], self.shape(*x));
                dx.iter_mut().zip(g).for_each(|(d, gv)| *d += scale * gv);
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let dx = accumulate(&mut grads[x.0], self.shape(*x));
                for ((d, gv), v) in dx.iter_mut().zip(g).zip(xv) {
                    *d += if *v > 0.0 { *gv } else { slope * gv };
                }
            }
            Op::BatchNorm(s) => {
                let c = s.inv_std.len();
                let rows = s.xhat.len() / c;
                let gamma = self.value(s.gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (i, (gv, xh)) in g.iter().zip(&s.xhat).enumerate() {
                    sum_g[i % c] += gv;
                    sum_gx[i % c] += gv * xh;
                }
                if self.needs(s.gamma) {
                    let dg = accumulate(&mut grads[s.gamma.0], &[c]);
                    dg.iter_mut().zip(&sum_gx).for_each(|(d, v)| *d += v);
                }
                if self.needs(s.beta) {
                    let db = accumulate(&mut grads[s.beta.0], &[c]);
                    db.iter_mut().zip(&sum_g).for_each(|(d, v)| *d += v);
                }
                if self.needs(s.x) {
                    let dx = accumulate(&mut grads[s.x.0], self.shape(s.x));
                    let n = rows as f64;
                    for (i, d) in dx.iter_mut().enumerate() {
                        let ch = i % c;
                        let scale = gamma[ch] * s.inv_std[ch];
                        *d += if s.train {
                            scale * (g[i] - sum_g[ch] / n - s.xhat[i] * sum_gx[ch] / n)
                        } else {
                            scale * g[i]
                        };
                    }
                }
            }
            Op::MaxAxis { x, dims, argmax } => {
                let (_, len, inner) = *dims;
                let dx = accumulate(&mut grads[x.0], self.shape(*x));
                for (slot, (&l, gv)) in argmax.iter().zip(g).enumerate() {
                    let (o, i) = (slot / inner, slot % inner);
                    dx[(o * len + l) * inner + i] += gv;
                }
            }
            Op::SumAxis { x, dims, scale } => {
                let (outer, len, inner) = *dims;
                let dx = accumulate(&mut grads[x.0], self.shape(*x));
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            dx[base + i] += scale * g[o * inner + i];
                        }
                    }
                }
            }
            Op::Softmax { x, cols } => {
                let y = node.value.data();
                let dx = accumulate(&mut grads[x.0], self.shape(*x));
                for ((drow, yrow), grow) in dx.chunks_mut(*cols).zip(y.chunks(*cols)).zip(g.chunks(*cols)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for ((d, yv), gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *d += yv * (gv - dot);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                mean,
            } => {
                let classes = self.shape(*logits)[1];
                let batch = labels.len();
                let dl = accumulate(&mut grads[logits.0], self.shape(*logits));
                for (r, &label) in labels.iter().enumerate() {
                    let gr = if *mean { g[0] / batch as f64 } else { g[r] };
                    for c in 0..classes {
                        let onehot = if c == label { 1.0 } else { 0.0 };
                        dl[r * classes + c] += gr * (probs[r * classes + c] - onehot);
                    }
                }
            }
            Op::Cosine(s) => {
                let (groups, n, d) = s.dims;
                let av = self.value(s.a).data();
                let bv = self.value(s.b).data();
                let out = node.value.data();
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for grp in 0..groups {
                    let nb = s.norm_b[grp].max(s.eps);
                    let b_active = s.norm_b[grp] > s.eps;
                    let bref = &bv[grp * d..(grp + 1) * d];
                    for j in 0..n {
                        let r = grp * n + j;
                        let na = s.norm_a[r].max(s.eps);
                        let a_active = s.norm_a[r] > s.eps;
                        let arow = &av[r * d..(r + 1) * d];
                        let (gs, sim) = (g[r], out[r]);
                        for k in 0..d {
                            let mut ga = bref[k] / (na * nb);
                            if a_active {
                                ga -= sim * arow[k] / (na * na);
                            }
                            da[r * d + k] += gs * ga;
                            let mut gb = arow[k] / (na * nb);
                            if b_active {
                                gb -= sim * bref[k] / (nb * nb);
                            }
                            db[grp * d + k] += gs * gb;
                        }
                    }
                }
                if self.needs(s.a) {
                    let dst = accumulate(&mut grads[s.a.0], self.shape(s.a));
                    dst.iter_mut().zip(&da).for_each(|(d, v)| *d += v);
                }
                if self.needs(s.b) {
                    let dst = accumulate(&mut grads[s.b.0], self.shape(s.b));
                    dst.iter_mut().zip(&db).for_each(|(d, v)| *d += v);
                }
            }
            Op::Conv1dCircular { x, w, b, dims } => {
                let (groups, n, c) = *dims;
                let xs = self.value(*x).data();
                let ws = self.value(*w).data();
                let mut dx = vec![0.0; xs.len()];
                let mut dw = vec![0.0; ws.len()];
                let mut db = vec![0.0; c];
                for grp in 0..groups {
                    for pos in 0..n {
                        let grow = &g[(grp * n + pos) * c..(grp * n + pos + 1) * c];
                        db.iter_mut().zip(grow).for_each(|(d, v)| *d += v);
                        for t in 0..3 {
                            let src = (pos + n + t - 1) % n;
                            let base = (grp * n + src) * c;
                            for (co, gv) in grow.iter().enumerate() {
                                for ci in 0..c {
                                    let wi = (co * c + ci) * 3 + t;
                                    dx[base + ci] += gv * ws[wi];
                                    dw[wi] += gv * xs[base + ci];
                                }
                            }
                        }
                    }
                }
                for (v, d) in [(*x, dx), (*w, dw), (*b, db)] {
                    if self.needs(v) {
                        let dst = accumulate(&mut grads[v.0], self.shape(v));
                        dst.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Conv2d(s) => {
                let [v, h, wd, cin] = s.in_dims;
                let (ho, wo) = s.out_hw;
                let cout = self.shape(s.w)[0];
                let q = cin * 9;
                let rows = v * ho * wo;
                if self.needs(s.b) {
                    let db = accumulate(&mut grads[s.b.0], &[cout]);
                    for row in g.chunks(cout) {
                        db.iter_mut().zip(row).for_each(|(d, gv)| *d += gv);
                    }
                }
                if self.needs(s.w) {
                    let dw = accumulate(&mut grads[s.w.0], self.shape(s.w));
                    gemm(cout, rows, q, g, (1, cout), &s.cols, (q, 1), 1.0, dw);
                }
                if self.needs(s.x) {
                    let mut dcols = vec![0.0; rows * q];
                    gemm(rows, cout, q, g, (cout, 1), self.value(s.w).data(), (q, 1), 0.0, &mut dcols);
                    let dx = accumulate(&mut grads[s.x.0], self.shape(s.x));
                    for img in 0..v {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let r = (img * ho + oy) * wo + ox;
                                let col = &dcols[r * q..(r + 1) * q];
                                for ky in 0..3 {
                                    let iy = (oy * s.stride + ky) as isize - 1;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..3 {
                                        let ix = (ox * s.stride + kx) as isize - 1;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let dst = ((img * h + iy as usize) * wd + ix as usize) * cin;
                                        for ci in 0..cin {
                                            dx[dst + ci] += col[ci * 9 + ky * 3 + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::AvgPool2d { x, k, dims } => {
                let [v, h, w, c] = *dims;
                let (ho, wo) = (h / k, w / k);
                let norm = 1.0 / (k * k) as f64;
                let dx = accumulate(&mut grads[x.0], self.shape(*x));
                for img in 0..v {
                    for y in 0..h {
                        for xx in 0..w {
                            let dst = ((img * h + y) * w + xx) * c;
                            let src = ((img * ho + y / k) * wo + xx / k) * c;
                            for ch in 0..c {
                                dx[dst + ch] += g[src + ch] * norm;
                            }
                        }
                    }
                }
            }
            Op::Concat {
                inputs,
                outer,
                widths,
            } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&v, &w) in inputs.iter().zip(widths) {
                    if self.needs(v) {
                        let dv = accumulate(&mut grads[v.0], self.shape(v));
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + w];
                            dv[o * w..(o + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, gv)| *d += gv);
                        }
                    }
                    offset += w;
                }
            }
            Op::GatherRows { x, idx, width } => {
                let dx = accumulate(&mut grads[x.0], self.shape(*x));
                for (r, &i) in idx.iter().enumerate() {
                    let src = &g[r * width..(r + 1) * width];
                    dx[i * width..(i + 1) * width]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, gv)| *d += gv);
                }
            }
            Op::Reshape { x } => {
                let dx = accumulate(&mut grads[x.0], self.shape(*x));
                dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
            }
            Op::ScaleRows { x, w, inner } => {
                let ws = self.value(*w).data();
                if self.needs(*x) {
                    let dx = accumulate(&mut grads[x.0], self.shape(*x));
                    for ((chunk, gchunk), wv) in dx.chunks_mut(*inner).zip(g.chunks(*inner)).zip(ws) {
                        chunk.iter_mut().zip(gchunk).for_each(|(d, gv)| *d += wv * gv);
                    }
                }
                if self.needs(*w) {
                    let xs = self.value(*x).data();
                    let dw = accumulate(&mut grads[w.0], self.shape(*w));
                    for ((d, gchunk), xchunk) in dw.iter_mut().zip(g.chunks(*inner)).zip(xs.chunks(*inner)) {
                        *d += gchunk.iter().zip(xchunk).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::WeightedSum { x, w, dims } => {
                let (groups, n, c) = *dims;
                let xs = self.value(*x).data();
                let ws = self.value(*w).data();
                if self.needs(*x) {
                    let dx = accumulate(&mut grads[x.0], self.shape(*x));
                    for grp in 0..groups {
                        let grow = &g[grp * c..(grp + 1) * c];
                        for j in 0..n {
                            let wv = ws[grp * n + j];
                            let base = (grp * n + j) * c;
                            for (k, gv) in grow.iter().enumerate() {
                                dx[base + k] += wv * gv;
                            }
                        }
                    }
                }
                if self.needs(*w) {
                    let dw = accumulate(&mut grads[w.0], self.shape(*w));
                    for grp in 0..groups {
                        let grow = &g[grp * c..(grp + 1) * c];
                        for j in 0..n {
                            let xrow = &xs[(grp * n + j) * c..(grp * n + j + 1) * c];
                            dw[grp * n + j] += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
        }
    }
}
