use super::kernels;
use super::{normalize_axis, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<R> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    Scale(Var, R),
    Softmax(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    SetPool(Var, usize),
    Sum(Var),
    Select(Var, usize),
    CrossEntropy(Var, usize),
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
}

/// Records primitive operations in execution order for reverse-mode
/// differentiation.
///
/// Every op appends one node whose inputs already exist on the tape, so the
/// node list is a topological order and `backward` is a single reverse sweep.
pub struct Tape<R: Real = f32> {
    nodes: Vec<Node<R>>,
    relu_signature: u64,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            relu_signature: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    /// Hash of the sign pattern of every ReLU input seen so far. Two forward
    /// passes with equal signatures took the same linear piece.
    pub fn relu_signature(&self) -> u64 {
        self.relu_signature
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![R::zero(); m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<R> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<R> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix. This is the
    /// only broadcasting the tape supports.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(bias).len() != n {
            return Err(Error::Dimension(format!(
                "bias of length {} cannot be added to {:?}",
                self.value(bias).len(),
                self.value(x).shape()
            )));
        }
        let xs = self.value(x).data();
        let bs = self.value(bias).data();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            out.extend(xs[i * n..(i + 1) * n].iter().zip(bs).map(|(&a, &b)| a + b));
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias(x, bias), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut sig = self.relu_signature;
        let out: Vec<R> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| {
                let on = v > R::zero();
                sig = (sig ^ on as u64).wrapping_mul(0x0100_0000_01b3);
                if on {
                    v
                } else {
                    R::zero()
                }
            })
            .collect();
        self.relu_signature = sig;
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data: out.into() }, Op::Relu(x), rg)
    }

    pub fn scale(&mut self, x: Var, c: R) -> Var {
        let out: Vec<R> = self.value(x).data().iter().map(|&v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data: out.into() }, Op::Scale(x, c), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = self.value(x).softmax(axis)?;
        let axis = normalize_axis(self.value(x).rank(), axis)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax(x, axis), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if start >= end || end > n {
            return Err(Error::Dimension(format!(
                "column range {start}..{end} invalid for {:?}",
                self.value(x).shape()
            )));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            out.extend_from_slice(&xs[i * n + start..i * n + end]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![m, end - start], out)?, Op::SliceCols(x, start), rg))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat of zero tensors".into()));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| self.value(p).dims2())
            .collect::<Result<_>>()?;
        let m = dims[0].0;
        if dims.iter().any(|d| d.0 != m) {
            return Err(Error::Dimension(format!(
                "concat row counts differ: {dims:?}"
            )));
        }
        let n: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &(_, w)) in parts.iter().zip(&dims) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let xs = self.value(x).data();
        let mut out = vec![R::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xs[i * n + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(x), rg))
    }

    /// Symmetric set pooling. Rows of `x` come in consecutive groups of
    /// `group` elements; each group becomes one output row holding the
    /// channelwise mean followed by the channelwise (population) standard
    /// deviation. A group of one has zero deviation.
    pub fn set_pool(&mut self, x: Var, group: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if group == 0 || m % group != 0 {
            return Err(Error::Dimension(format!(
                "{m} rows cannot be pooled in groups of {group}"
            )));
        }
        let groups = m / group;
        let xs = self.value(x).data();
        let mut out = vec![R::zero(); groups * 2 * n];
        let mut mean = vec![0f64; n];
        let mut var = vec![0f64; n];
        for g in 0..groups {
            mean.iter_mut().for_each(|v| *v = 0.0);
            var.iter_mut().for_each(|v| *v = 0.0);
            let rows = &xs[g * group * n..(g + 1) * group * n];
            for r in rows.chunks_exact(n) {
                for (acc, v) in mean.iter_mut().zip(r) {
                    *acc += v.f64();
                }
            }
            mean.iter_mut().for_each(|v| *v /= group as f64);
            for r in rows.chunks_exact(n) {
                for ((acc, v), mu) in var.iter_mut().zip(r).zip(&mean) {
                    let d = v.f64() - mu;
                    *acc += d * d;
                }
            }
            let o = &mut out[g * 2 * n..(g + 1) * 2 * n];
            for c in 0..n {
                o[c] = R::of(mean[c]);
                o[n + c] = R::of((var[c] / group as f64).sqrt());
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![groups, 2 * n], out)?, Op::SetPool(x, group), rg))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.f64()).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(R::of(s)), Op::Sum(x), rg)
    }

    /// Entry `index` of the flattened tensor, as a scalar.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let Some(&v) = self.value(x).data().get(index) else {
            return Err(Error::Dimension(format!(
                "index {index} out of range for {:?}",
                self.value(x).shape()
            )));
        };
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(v), Op::Select(x, index), rg))
    }

    /// `-log softmax(logits)[label]` via log-sum-exp; logits is a vector or a
    /// single row.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let (m, n) = self.value(logits).dims2()?;
        if m != 1 {
            return Err(Error::Dimension(format!(
                "cross entropy expects one row of logits, got {:?}",
                self.value(logits).shape()
            )));
        }
        if label >= n {
            return Err(Error::Contract(format!(
                "label {label} out of range for {n} classes"
            )));
        }
        let z = self.value(logits).to_f64();
        let loss = super::log_sum_exp(&z) - z[label];
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(R::of(loss)), Op::CrossEntropy(logits, label), rg))
    }

    /// Reverse sweep from a scalar `loss`. Nodes the loss does not depend on
    /// get no gradient (reported as zeros by [`Gradients::get`]).
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<R>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![R::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.map(|g| Tensor {
                    shape: n.value.shape().to_vec(),
                    data: g.into(),
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<R>>], v: Var) -> Option<&'g mut Vec<R>> {
        if !self.rg(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![R::zero(); len]))
    }

    fn propagate(&self, op: &Op<R>, out: &Tensor<R>, g: &[R], grads: &mut [Option<Vec<R>>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                if let Some(ga) = self.acc(grads, *a) {
                    kernels::matmul_nt_acc(g, self.value(*b).data(), ga, m, k, n);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::matmul_tn_acc(self.value(*a).data(), g, gb, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddBias(x, bias) => {
                let (_, n) = self.value(*x).dims2()?;
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    let mut sums = vec![0f64; n];
                    for row in g.chunks_exact(n) {
                        sums.iter_mut().zip(row).for_each(|(s, v)| *s += v.f64());
                    }
                    gb.iter_mut().zip(sums).for_each(|(b, s)| *b += R::of(s));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        if xv[i] > R::zero() {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *c);
                }
            }
            Op::Softmax(x, axis) => {
                let (m, n) = out.dims2()?;
                let y = out.data();
                if let Some(gx) = self.acc(grads, *x) {
                    let (lines, len, stride, step) =
                        if *axis == 1 { (m, n, n, 1) } else { (n, m, 1, n) };
                    for line in 0..lines {
                        let base = line * stride;
                        let dot: f64 = (0..len)
                            .map(|j| (g[base + j * step] * y[base + j * step]).f64())
                            .sum();
                        for j in 0..len {
                            let i = base + j * step;
                            gx[i] += R::of(y[i].f64() * (g[i].f64() - dot));
                        }
                    }
                }
            }
            Op::SliceCols(x, start) => {
                let (m, n) = self.value(*x).dims2()?;
                let w = out.dims2()?.1;
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..m {
                        for j in 0..w {
                            gx[i * n + start + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = out.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2()?.1;
                    if let Some(gp) = self.acc(grads, p) {
                        for i in 0..m {
                            for j in 0..w {
                                gp[i * w + j] += g[i * n + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Transpose(x) => {
                let (m, n) = self.value(*x).dims2()?;
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::SetPool(x, group) => {
                let (m, n) = self.value(*x).dims2()?;
                let xv = self.value(*x).data();
                let pooled = out.data();
                let group = *group;
                if let Some(gx) = self.acc(grads, *x) {
                    let inv = 1.0 / group as f64;
                    for r in 0..m {
                        let gi = r / group;
                        let o = &pooled[gi * 2 * n..(gi + 1) * 2 * n];
                        let go = &g[gi * 2 * n..(gi + 1) * 2 * n];
                        for c in 0..n {
                            let mean = o[c].f64();
                            let std = o[n + c].f64();
                            let mut d = go[c].f64() * inv;
                            if std > 0.0 {
                                d += go[n + c].f64() * (xv[r * n + c].f64() - mean) * inv / std;
                            }
                            gx[r * n + c] += R::of(d);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Select(x, index) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx[*index] += g[0];
                }
            }
            Op::CrossEntropy(z, label) => {
                let p = super::softmax_f64(&self.value(*z).to_f64());
                if let Some(gz) = self.acc(grads, *z) {
                    for (i, pi) in p.iter().enumerate() {
                        let t = if i == *label { 1.0 } else { 0.0 };
                        gz[i] += R::of((pi - t) * g[0].f64());
                    }
                }
            }
        }
        Ok(())
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<R: Real> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient of the loss with respect to `v`; zeros when unreachable.
    pub fn get(&self, v: Var, like: &Tensor<R>) -> Tensor<R> {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(like.shape().to_vec()),
        }
    }

    pub fn try_get(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
