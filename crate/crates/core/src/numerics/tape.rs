// Wengert-list style tape: every primitive evaluates eagerly and appends a
// node. Nodes only reference earlier nodes, so index order is a topological
// order and the backward sweep is a single reverse scan.

use super::{Scalar, Tensor};
use crate::error::{contract, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, Var),
    MulConst(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sin(Var),
    Cos(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Diag(Var),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Polar(Var),
    ComplexMul(Var, Var),
    Conv1d { input: Var, weight: Var, bias: Var, padding: usize },
    MaxPool1d { input: Var, argmax: Vec<usize> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::MulConst(..) => "mul_const",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Softplus(..) => "softplus",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumRows(..) => "sum_rows",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::Diag(..) => "diag",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::Reshape(..) => "reshape",
            Op::Polar(..) => "polar",
            Op::ComplexMul(..) => "complex_mul",
            Op::Conv1d { .. } => "conv1d",
            Op::MaxPool1d { .. } => "max_pool1d",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `var`; `None` when `var` does
    /// not require a gradient or does not influence the loss.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but materializes zeros shaped like the node.
    pub fn get_or_zeros(&self, tape: &Tape<T>, var: Var) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(var).shape()))
    }
}

/// Recording tape for reverse-mode differentiation.
#[derive(Clone, Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn data(&self, var: Var) -> &[T] {
        self.nodes[var.0].value.data()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("shape preserved");
        self.push(value, op, &[x])
    }

    /// Input leaf; differentiable iff the tensor's `requires_grad` flag is set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node { value: tensor, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_grad(true))
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_grad(false))
    }

    /// `[n, m] x [m, p] -> [n, p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, m) = self.value(a).dims2()?;
        let (m2, p) = self.value(b).dims2()?;
        contract!(
            m == m2,
            "matmul inner dimensions differ: {:?} x {:?}",
            self.shape(a),
            self.shape(b)
        );
        let out = matmul_kernel(self.data(a), self.data(b), n, m, p);
        let value = Tensor::new(vec![n, p], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let src = self.data(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        contract!(
            self.shape(a) == self.shape(b),
            "{what}: shapes differ, {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `x[r, c] + bias[c]`, bias broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.value(x).dims2()?;
        contract!(
            self.value(bias).len() == c,
            "bias of length {} does not match {c} columns",
            self.value(bias).len()
        );
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bv)| v + bv))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    /// Multiplies every entry of `x` by the single-element tensor `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self
            .value(s)
            .item()
            .ok_or_else(|| Error::Contract(format!("scale factor has shape {:?}", self.shape(s))))?;
        let data = self.data(x).iter().map(|&v| v * sv).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::Scale(x, s), &[x, s]))
    }

    pub fn mul_const(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::MulConst(x, c), |v| v * c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.mul_const(x, -T::one())
    }

    /// ReLU with subgradient 0 at the origin.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), T::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), T::ln)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sin(x), T::sin)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, Op::Cos(x), T::cos)
    }

    /// `log(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::of_f64(self.value(x).len() as f64);
        let s: T = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(x), &[x])
    }

    /// `[r, c] -> [r]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.value(x).dims2()?;
        let data = self.data(x).chunks(c).map(|row| row.iter().copied().sum()).collect();
        Ok(self.push(Tensor::vector(data), Op::SumRows(x), &[x]))
    }

    /// Row-wise dot product of two equally shaped matrices.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let prod = self.mul(a, b)?;
        self.sum_rows(prod)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.value(x).dims2()?;
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::SoftmaxRows(x), &[x]))
    }

    /// Row-wise log-softmax using the max-shifted log-sum-exp.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.value(x).dims2()?;
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::LogSoftmaxRows(x), &[x]))
    }

    /// Main diagonal of a square matrix.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        contract!(
            self.shape(x).len() == 2 && r == c,
            "diag needs a square matrix, got {:?}",
            self.shape(x)
        );
        let src = self.data(x);
        let data = (0..r).map(|i| src[i * c + i]).collect();
        Ok(self.push(Tensor::vector(data), Op::Diag(x), &[x]))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        contract!(!parts.is_empty(), "concat_cols of nothing");
        let dims = parts
            .iter()
            .map(|&p| self.value(p).dims2())
            .collect::<Result<Vec<_>>>()?;
        let rows = dims[0].0;
        contract!(
            dims.iter().all(|&(r, _)| r == rows),
            "concat_cols row counts differ: {dims:?}"
        );
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &(_, c)) in parts.iter().zip(&dims) {
                data.extend_from_slice(&self.data(p)[i * c..(i + 1) * c]);
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Selects rows of a matrix; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        contract!(!indices.is_empty(), "gather_rows with no indices");
        contract!(
            indices.iter().all(|&i| i < r),
            "gather_rows index out of range for {r} rows"
        );
        let src = self.data(x);
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![indices.len(), c], data)?;
        Ok(self.push(value, Op::GatherRows(x, indices.to_vec()), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().with_grad(false).reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Angles `[.., k]` to unit complex numbers `[.., 2k]`, stored as
    /// interleaved `(cos, sin)` pairs.
    pub fn polar(&mut self, theta: Var) -> Var {
        let src = self.value(theta);
        let mut shape = src.shape().to_vec();
        *shape.last_mut().expect("non-empty shape") *= 2;
        let data = src
            .data()
            .iter()
            .flat_map(|&t| [t.cos(), t.sin()])
            .collect();
        let value = Tensor::new(shape, data).expect("doubled last axis");
        self.push(value, Op::Polar(theta), &[theta])
    }

    /// Elementwise complex product of interleaved `(re, im)` tensors.
    pub fn complex_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "complex_mul")?;
        contract!(
            self.value(a).len().is_multiple_of(2),
            "complex tensors need an even number of reals"
        );
        let data = self
            .data(a)
            .chunks(2)
            .zip(self.data(b).chunks(2))
            .flat_map(|(x, y)| [x[0] * y[0] - x[1] * y[1], x[0] * y[1] + x[1] * y[0]])
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::ComplexMul(a, b), &[a, b]))
    }

    /// Stride-1 1-D convolution: input `[n, c_in, len]`, weight
    /// `[c_out, c_in, kernel]`, bias `[c_out]`, zero padding on both sides.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var, padding: usize) -> Result<Var> {
        let (n, c_in, len) = dims3(self.shape(input))?;
        let (c_out, wc_in, kernel) = dims3(self.shape(weight))?;
        contract!(
            c_in == wc_in,
            "conv1d input has {c_in} channels, weight expects {wc_in}"
        );
        contract!(
            self.value(bias).len() == c_out,
            "conv1d bias length {} != {c_out}",
            self.value(bias).len()
        );
        contract!(
            len + 2 * padding >= kernel,
            "conv1d kernel {kernel} longer than padded input {len}+2*{padding}"
        );
        let out_len = len + 2 * padding - kernel + 1;
        let (x, w, b) = (self.data(input), self.data(weight), self.data(bias));
        let mut out = vec![T::zero(); n * c_out * out_len];
        for s in 0..n {
            for o in 0..c_out {
                let y = &mut out[(s * c_out + o) * out_len..][..out_len];
                y.iter_mut().for_each(|v| *v = b[o]);
                for c in 0..c_in {
                    let xs = &x[(s * c_in + c) * len..][..len];
                    for k in 0..kernel {
                        let wv = w[(o * c_in + c) * kernel + k];
                        let (lo, hi) = valid_range(k, padding, len, out_len);
                        for t in lo..hi {
                            y[t] += wv * xs[t + k - padding];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c_out, out_len], out)?;
        Ok(self.push(
            value,
            Op::Conv1d { input, weight, bias, padding },
            &[input, weight, bias],
        ))
    }

    /// Adaptive max pooling over the last axis of `[n, c, len]` down to
    /// `out_len` bins. Bin `i` covers `[floor(i*len/out), ceil((i+1)*len/out))`;
    /// ties go to the earliest position.
    pub fn adaptive_max_pool1d(&mut self, input: Var, out_len: usize) -> Result<Var> {
        let (n, c, len) = dims3(self.shape(input))?;
        contract!(out_len > 0, "adaptive pooling to zero bins");
        let x = self.data(input);
        let mut out = Vec::with_capacity(n * c * out_len);
        let mut argmax = Vec::with_capacity(n * c * out_len);
        for row in 0..n * c {
            let xs = &x[row * len..][..len];
            for i in 0..out_len {
                let start = i * len / out_len;
                let end = ((i + 1) * len).div_ceil(out_len);
                let mut best = start;
                for t in start + 1..end {
                    if xs[t] > xs[best] {
                        best = t;
                    }
                }
                out.push(xs[best]);
                argmax.push(row * len + best);
            }
        }
        let value = Tensor::new(vec![n, c, out_len], out)?;
        Ok(self.push(value, Op::MaxPool1d { input, argmax }, &[input]))
    }

    /// Reverse sweep from a single-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        contract!(loss.0 < self.nodes.len(), "loss node {} not on this tape", loss.0);
        contract!(
            self.value(loss).len() == 1,
            "loss must be a scalar, got shape {:?}",
            self.shape(loss)
        );
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at node {idx} ({}), element {pos}",
                    self.nodes[idx].op.name()
                )));
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| {
                    Tensor::new(self.nodes[i].value.shape().to_vec(), data)
                        .expect("gradient shaped like its node")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], var: Var, delta: Vec<T>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Vec<T>>],
        var: Var,
        f: impl FnOnce(&mut [T]),
    ) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        let slot = &mut grads[var.0];
        let g = slot.get_or_insert_with(|| vec![T::zero(); self.nodes[var.0].value.len()]);
        f(g);
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let map1 = |x: Var, f: &dyn Fn(T, T, T) -> T| -> Vec<T> {
            self.data(x)
                .iter()
                .zip(out)
                .zip(g)
                .map(|((&xv, &yv), &gv)| f(xv, yv, gv))
                .collect()
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (n, m) = self.value(a).dims2().expect("checked in forward");
                let (_, p) = self.value(b).dims2().expect("checked in forward");
                if self.requires_grad(a) {
                    let ga = matmul_a_bt(g, self.data(b), n, p, m);
                    self.accumulate(grads, a, ga);
                }
                if self.requires_grad(b) {
                    let gb = matmul_at_b(self.data(a), g, n, m, p);
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Transpose(x) => {
                let (r, c) = self.value(x).dims2().expect("checked in forward");
                let mut gx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                self.accumulate(grads, x, gx);
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.iter().map(|&v| -v).collect());
            }
            &Op::Mul(a, b) => {
                if self.requires_grad(a) {
                    let ga = g.iter().zip(self.data(b)).map(|(&gv, &bv)| gv * bv).collect();
                    self.accumulate(grads, a, ga);
                }
                if self.requires_grad(b) {
                    let gb = g.iter().zip(self.data(a)).map(|(&gv, &av)| gv * av).collect();
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::AddBias(x, bias) => {
                self.accumulate(grads, x, g.to_vec());
                let c = self.value(bias).len();
                self.accumulate_with(grads, bias, |gb| {
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                });
            }
            &Op::Scale(x, s) => {
                let sv = self.data(s)[0];
                self.accumulate(grads, x, g.iter().map(|&v| v * sv).collect());
                if self.requires_grad(s) {
                    let gs = g.iter().zip(self.data(x)).map(|(&gv, &xv)| gv * xv).sum();
                    self.accumulate(grads, s, vec![gs]);
                }
            }
            &Op::MulConst(x, c) => {
                self.accumulate(grads, x, g.iter().map(|&v| v * c).collect());
            }
            &Op::Relu(x) => {
                let gx = map1(x, &|xv, _, gv| if xv > T::zero() { gv } else { T::zero() });
                self.accumulate(grads, x, gx);
            }
            &Op::Sigmoid(x) => {
                let gx = map1(x, &|_, yv, gv| gv * yv * (T::one() - yv));
                self.accumulate(grads, x, gx);
            }
            &Op::Exp(x) => {
                let gx = map1(x, &|_, yv, gv| gv * yv);
                self.accumulate(grads, x, gx);
            }
            &Op::Log(x) => {
                let gx = map1(x, &|xv, _, gv| gv / xv);
                self.accumulate(grads, x, gx);
            }
            &Op::Sin(x) => {
                let gx = map1(x, &|xv, _, gv| gv * xv.cos());
                self.accumulate(grads, x, gx);
            }
            &Op::Cos(x) => {
                let gx = map1(x, &|xv, _, gv| -gv * xv.sin());
                self.accumulate(grads, x, gx);
            }
            &Op::Softplus(x) => {
                let gx = map1(x, &|xv, _, gv| gv * sigmoid(xv));
                self.accumulate(grads, x, gx);
            }
            &Op::Sum(x) => {
                self.accumulate(grads, x, vec![g[0]; self.value(x).len()]);
            }
            &Op::Mean(x) => {
                let n = self.value(x).len();
                let v = g[0] / T::of_f64(n as f64);
                self.accumulate(grads, x, vec![v; n]);
            }
            &Op::SumRows(x) => {
                let (_, c) = self.value(x).dims2().expect("checked in forward");
                let gx = g.iter().flat_map(|&gv| std::iter::repeat_n(gv, c)).collect();
                self.accumulate(grads, x, gx);
            }
            &Op::SoftmaxRows(x) => {
                let c = *self.shape(x).last().expect("non-empty shape");
                let mut gx = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(c).zip(out.chunks(c)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    gx.extend(grow.iter().zip(yrow).map(|(&gv, &yv)| yv * (gv - dot)));
                }
                self.accumulate(grads, x, gx);
            }
            &Op::LogSoftmaxRows(x) => {
                let c = *self.shape(x).last().expect("non-empty shape");
                let mut gx = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(c).zip(out.chunks(c)) {
                    let total: T = grow.iter().copied().sum();
                    gx.extend(grow.iter().zip(yrow).map(|(&gv, &yv)| gv - yv.exp() * total));
                }
                self.accumulate(grads, x, gx);
            }
            &Op::Diag(x) => {
                let n = g.len();
                self.accumulate_with(grads, x, |gx| {
                    for i in 0..n {
                        gx[i * n + i] += g[i];
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let rows = self.value(parts[0]).dims2().expect("checked in forward").0;
                let total = g.len() / rows;
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).dims2().expect("checked in forward").1;
                    if self.requires_grad(p) {
                        let gp = (0..rows)
                            .flat_map(|i| g[i * total + offset..i * total + offset + c].iter().copied())
                            .collect();
                        self.accumulate(grads, p, gp);
                    }
                    offset += c;
                }
            }
            Op::GatherRows(x, indices) => {
                let c = self.value(*x).dims2().expect("checked in forward").1;
                self.accumulate_with(grads, *x, |gx| {
                    for (k, &i) in indices.iter().enumerate() {
                        gx[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(&g[k * c..(k + 1) * c])
                            .for_each(|(a, &v)| *a += v);
                    }
                });
            }
            &Op::Reshape(x) => {
                self.accumulate(grads, x, g.to_vec());
            }
            &Op::Polar(theta) => {
                let gx = self
                    .data(theta)
                    .iter()
                    .zip(g.chunks(2))
                    .map(|(&t, gc)| -gc[0] * t.sin() + gc[1] * t.cos())
                    .collect();
                self.accumulate(grads, theta, gx);
            }
            &Op::ComplexMul(a, b) => {
                // d(xy)/dx pulled back through the real 2x2 form of y.
                let pull = |other: &[T]| -> Vec<T> {
                    g.chunks(2)
                        .zip(other.chunks(2))
                        .flat_map(|(gc, o)| {
                            [gc[0] * o[0] + gc[1] * o[1], -gc[0] * o[1] + gc[1] * o[0]]
                        })
                        .collect()
                };
                if self.requires_grad(a) {
                    self.accumulate(grads, a, pull(self.data(b)));
                }
                if self.requires_grad(b) {
                    self.accumulate(grads, b, pull(self.data(a)));
                }
            }
            &Op::Conv1d { input, weight, bias, padding } => {
                let (n, c_in, len) = dims3(self.shape(input)).expect("checked in forward");
                let (c_out, _, kernel) = dims3(self.shape(weight)).expect("checked in forward");
                let out_len = len + 2 * padding - kernel + 1;
                let (x, w) = (self.data(input), self.data(weight));
                if self.requires_grad(input) {
                    let mut gx = vec![T::zero(); x.len()];
                    for s in 0..n {
                        for o in 0..c_out {
                            let gy = &g[(s * c_out + o) * out_len..][..out_len];
                            for c in 0..c_in {
                                let gxs = &mut gx[(s * c_in + c) * len..][..len];
                                for k in 0..kernel {
                                    let wv = w[(o * c_in + c) * kernel + k];
                                    let (lo, hi) = valid_range(k, padding, len, out_len);
                                    for t in lo..hi {
                                        gxs[t + k - padding] += wv * gy[t];
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(grads, input, gx);
                }
                if self.requires_grad(weight) {
                    let mut gw = vec![T::zero(); w.len()];
                    for s in 0..n {
                        for o in 0..c_out {
                            let gy = &g[(s * c_out + o) * out_len..][..out_len];
                            for c in 0..c_in {
                                let xs = &x[(s * c_in + c) * len..][..len];
                                for k in 0..kernel {
                                    let (lo, hi) = valid_range(k, padding, len, out_len);
                                    let mut acc = T::zero();
                                    for t in lo..hi {
                                        acc += gy[t] * xs[t + k - padding];
                                    }
                                    gw[(o * c_in + c) * kernel + k] += acc;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, weight, gw);
                }
                if self.requires_grad(bias) {
                    let mut gb = vec![T::zero(); c_out];
                    for (row, gy) in g.chunks(out_len).enumerate() {
                        gb[row % c_out] += gy.iter().copied().sum();
                    }
                    self.accumulate(grads, bias, gb);
                }
            }
            Op::MaxPool1d { input, argmax } => {
                self.accumulate_with(grads, *input, |gx| {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        gx[src] += gv;
                    }
                });
            }
        }
    }
}

fn dims3(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        &[a, b, c] => Ok((a, b, c)),
        other => Err(Error::Contract(format!("expected a rank-3 tensor, got shape {other:?}"))),
    }
}

/// Output positions `t` for which `t + k - padding` lands inside the input.
fn valid_range(k: usize, padding: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(k);
    let hi = (len + padding).saturating_sub(k).min(out_len);
    (lo, hi.max(lo))
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    let s: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

/// `a[n, m] x b[m, p]`.
pub(crate) fn matmul_kernel<T: Scalar>(a: &[T], b: &[T], n: usize, m: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * p];
    for (arow, orow) in a.chunks(m).zip(out.chunks_mut(p)) {
        for (&aik, brow) in arow.iter().zip(b.chunks(p)) {
            if aik == T::zero() {
                continue;
            }
            orow.iter_mut().zip(brow).for_each(|(o, &bv)| *o += aik * bv);
        }
    }
    out
}

/// `g[n, p] x b[m, p]^T -> [n, m]`.
fn matmul_a_bt<T: Scalar>(g: &[T], b: &[T], n: usize, p: usize, m: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * m);
    for grow in g.chunks(p).take(n) {
        out.extend(
            b.chunks(p)
                .take(m)
                .map(|brow| grow.iter().zip(brow).map(|(&x, &y)| x * y).sum::<T>()),
        );
    }
    out
}

/// `a[n, m]^T x g[n, p] -> [m, p]`.
fn matmul_at_b<T: Scalar>(a: &[T], g: &[T], n: usize, m: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * p];
    for (arow, grow) in a.chunks(m).zip(g.chunks(p)).take(n) {
        for (&aik, orow) in arow.iter().zip(out.chunks_mut(p)) {
            if aik == T::zero() {
                continue;
            }
            orow.iter_mut().zip(grow).for_each(|(o, &gv)| *o += aik * gv);
        }
    }
    out
}
