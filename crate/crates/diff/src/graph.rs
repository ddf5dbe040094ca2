//! The tape. Every operation appends a node holding its forward value and
//! enough bookkeeping to replay the chain rule in reverse.

use std::collections::BTreeMap;

use crate::conv;
use crate::error::{shape_err, DiffError, Result};
use crate::params::{Gradients, ParameterStore};
use crate::scalar::{mm, Real};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fused operation whose forward value is computed by the caller and whose
/// vector-Jacobian product is supplied here.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &'static str;

    /// Returns one entry per input: the gradient of the loss with respect to
    /// that input, or `None` when `needs[i]` is false.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Square(Var),
    Exp(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rstd: Vec<T>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterAddRows {
        x: Var,
        idx: Vec<usize>,
    },
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    ScaleRows {
        x: Var,
        s: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    Upsample2(Var),
    Custom {
        op: Box<dyn CustomOp<T>>,
        inputs: Vec<Var>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Reverse-mode differentiation tape.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, Var>,
    frozen: Vec<String>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            frozen: Vec::new(),
        }
    }

    /// Parameters whose names start with `prefix` are bound as constants.
    pub fn freeze_prefix(&mut self, prefix: impl Into<String>) {
        self.frozen.push(prefix.into());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A tensor that does not receive gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An unnamed leaf that receives gradients (queried through [`GradTable::wrt`]).
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a named parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParameterStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?.clone();
        let trainable = !self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        let v = self.push(t, Op::Leaf, trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Copies the value of `v` into a new node with no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    fn binary_same(&mut self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a), self.value(b));
        if sa.rank() != 2 || sb.rank() != 2 || sa.shape()[1] != sb.shape()[0] {
            return Err(shape_err(
                "matmul",
                format!("{:?} @ {:?}", sa.shape(), sb.shape()),
            ));
        }
        let (m, k, n) = (sa.shape()[0], sa.shape()[1], sb.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        mm::ab(m, k, n, sa.data(), sb.data(), &mut out, false);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), g))
    }

    /// `a[n, m] + b[m]` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let m = ta.cols();
        if tb.len() != m {
            return Err(shape_err(
                "add_bias",
                format!("{:?} + {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(m.max(1)) {
            for (x, &bb) in row.iter_mut().zip(tb.data()) {
                *x += bb;
            }
        }
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::AddBias(a, b), g))
    }

    /// Dense layer `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let g = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), g))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let g = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, s), g)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        let g = self.any_grad(&[a]);
        self.push(out, Op::AddScalar(a), g)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).map(f);
        let g = self.any_grad(&[a]);
        self.push(out, op, g)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (eps = 1e-5).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let m = tx.cols();
        if self.value(gamma).len() != m || self.value(beta).len() != m {
            return Err(shape_err("layer_norm", format!("width {m}")));
        }
        let eps = T::lit(1e-5);
        let inv_m = T::lit(1.0 / m as f64);
        let (tg, tb) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = tx.clone();
        let mut rstd = Vec::with_capacity(tx.rows());
        for row in out.data_mut().chunks_mut(m) {
            let mean = row.iter().copied().sum::<T>() * inv_m;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_m;
            let r = (var + eps).sqrt().recip();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * r * tg[j] + tb[j];
            }
            rstd.push(r);
        }
        let g = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd,
            },
            g,
        ))
    }

    /// Concatenates 2D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.rows() != rows {
                return Err(shape_err("concat_cols", format!("{:?}", t.shape())));
            }
            total += t.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let g = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(vec![rows, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            g,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || start + len > t.cols() {
            return Err(shape_err(
                "slice_cols",
                format!("{:?}[{start}..{}]", t.shape(), start + len),
            ));
        }
        let rows = t.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let g = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![rows, len], out)?,
            Op::SliceCols { x, start },
            g,
        ))
    }

    /// Concatenates tensors along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tail = self.value(parts[0]).shape()[1..].to_vec();
        let mut lead = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.is_empty() || s[1..] != tail[..] {
                return Err(shape_err("concat_rows", format!("{s:?} vs tail {tail:?}")));
            }
            lead += s[0];
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let g = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::ConcatRows(parts.to_vec()),
            g,
        ))
    }

    /// Selects rows `idx` of a 2D tensor (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if t.rank() != 2 {
            return Err(shape_err("gather_rows", format!("{:?}", t.shape())));
        }
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in &idx {
            if i >= rows {
                return Err(shape_err("gather_rows", format!("row {i} of {rows}")));
            }
            out.extend_from_slice(t.row(i));
        }
        let n = idx.len();
        let g = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![n, cols], out)?,
            Op::GatherRows { x, idx },
            g,
        ))
    }

    /// Sums row `e` of `x` into output row `idx[e]`; output has `n` rows.
    /// Accumulation follows edge order, so results are reproducible bit for bit.
    pub fn scatter_add_rows(&mut self, x: Var, idx: Vec<usize>, n: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || t.rows() != idx.len() {
            return Err(shape_err(
                "scatter_add_rows",
                format!("{:?} with {} indices", t.shape(), idx.len()),
            ));
        }
        let cols = t.cols();
        let mut out = vec![T::zero(); n * cols];
        for (e, &i) in idx.iter().enumerate() {
            if i >= n {
                return Err(shape_err("scatter_add_rows", format!("row {i} of {n}")));
            }
            for (o, &v) in out[i * cols..(i + 1) * cols].iter_mut().zip(t.row(e)) {
                *o += v;
            }
        }
        let g = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(vec![n, cols], out)?,
            Op::ScatterAddRows { x, idx },
            g,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(shape_err("transpose", format!("{:?}", t.shape())));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let src = t.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let g = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), g))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let g = self.any_grad(&[x]);
        Ok(self.push(t, Op::Reshape(x), g))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let g = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / T::lit(t.len().max(1) as f64);
        let g = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), g)
    }

    /// Mean squared difference against a constant target.
    pub fn mse(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        let t = self.constant(target.clone());
        let d = self.sub(x, t)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Multiplies row `i` of `x[n, m]` by `s[i]` (`s` has `n` elements).
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        if tx.rank() != 2 || ts.len() != tx.rows() {
            return Err(shape_err(
                "scale_rows",
                format!("{:?} by {:?}", tx.shape(), ts.shape()),
            ));
        }
        let m = tx.cols();
        let mut out = tx.clone();
        for (row, &k) in out.data_mut().chunks_mut(m).zip(ts.data()) {
            for v in row {
                *v *= k;
            }
        }
        let g = self.any_grad(&[x, s]);
        Ok(self.push(out, Op::ScaleRows { x, s }, g))
    }

    /// Same-padded, stride-1 convolution. `x: [C, H, W]`, `w: [O, C, k, k]`
    /// with odd `k`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let out = conv::conv2d_forward(tx, tw, tb)?;
        let g = self.any_grad(&[x, w, b]);
        Ok(self.push(out, Op::Conv2d { x, w, b }, g))
    }

    /// 2x2 max pooling on `[C, H, W]`; `H` and `W` must be even.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = conv::max_pool2_forward(self.value(x))?;
        let g = self.any_grad(&[x]);
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, g))
    }

    /// Nearest-neighbour 2x upsampling on `[C, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let out = conv::upsample2_forward(self.value(x))?;
        let g = self.any_grad(&[x]);
        Ok(self.push(out, Op::Upsample2(x), g))
    }

    /// Records a fused op whose forward `output` the caller already computed.
    pub fn custom(
        &mut self,
        op: Box<dyn CustomOp<T>>,
        inputs: &[Var],
        output: Tensor<T>,
    ) -> Var {
        let g = self.any_grad(inputs);
        self.push(
            output,
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
            g,
        )
    }

    /// Propagates d`loss`/d(node) to every leaf that requires gradients.
    pub fn backward(&self, loss: Var) -> Result<GradTable<T>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(DiffError::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut leaves: BTreeMap<usize, Vec<T>> = BTreeMap::new();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.insert(i, g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(GradTable {
            leaves,
            params: self
                .params
                .iter()
                .filter(|(_, v)| self.nodes[v.0].needs_grad)
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].needs_grad;
        let len = |v: Var| nodes[v.0].value.len();
        let val = |v: Var| &nodes[v.0].value;
        // Accumulates into the gradient slot of `v`, allocating zeros on first use.
        fn slot<T: Real>(
            grads: &mut [Option<Vec<T>>],
            v: Var,
            n: usize,
        ) -> &mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
        }
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if needs(*a) {
                    let ga = slot(grads, *a, m * k);
                    mm::abt(m, n, k, g, tb.data(), ga, true);
                }
                if needs(*b) {
                    let gb = slot(grads, *b, k * n);
                    mm::atb(k, m, n, ta.data(), g, gb, true);
                }
            }
            Op::AddBias(a, b) => {
                if needs(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if needs(*b) {
                    let m = len(*b);
                    let gb = slot(grads, *b, m);
                    for row in g.chunks(m.max(1)) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if needs(*b) {
                    add_into(slot(grads, *b, g.len()), g);
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if needs(*b) {
                    for (o, &x) in slot(grads, *b, g.len()).iter_mut().zip(g) {
                        *o -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                if needs(*a) {
                    let ga = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * tb[i];
                    }
                }
                if needs(*b) {
                    let gb = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * ta[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                for (o, &x) in slot(grads, *a, g.len()).iter_mut().zip(g) {
                    *o += x * *s;
                }
            }
            Op::AddScalar(a) => add_into(slot(grads, *a, g.len()), g),
            Op::Relu(a) => {
                let ga = slot(grads, *a, g.len());
                for ((o, &x), &yy) in ga.iter_mut().zip(g).zip(y.data()) {
                    if yy > T::zero() {
                        *o += x;
                    }
                }
            }
            Op::Softplus(a) => {
                let xa = val(*a).data();
                let ga = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * sigmoid(xa[i]);
                }
            }
            Op::Sigmoid(a) => {
                let ga = slot(grads, *a, g.len());
                for ((o, &x), &yy) in ga.iter_mut().zip(g).zip(y.data()) {
                    *o += x * yy * (T::one() - yy);
                }
            }
            Op::Tanh(a) => {
                let ga = slot(grads, *a, g.len());
                for ((o, &x), &yy) in ga.iter_mut().zip(g).zip(y.data()) {
                    *o += x * (T::one() - yy * yy);
                }
            }
            Op::Square(a) => {
                let xa = val(*a).data();
                let ga = slot(grads, *a, g.len());
                let two = T::lit(2.0);
                for i in 0..g.len() {
                    ga[i] += g[i] * two * xa[i];
                }
            }
            Op::Exp(a) => {
                let ga = slot(grads, *a, g.len());
                for ((o, &x), &yy) in ga.iter_mut().zip(g).zip(y.data()) {
                    *o += x * yy;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd,
            } => {
                let tx = val(*x);
                let m = tx.cols();
                let tg = val(*gamma).data();
                let inv_m = T::lit(1.0 / m as f64);
                // Recover the normalized input from the stored statistics.
                let mut xhat = vec![T::zero(); tx.len()];
                for (r, row) in tx.data().chunks(m).enumerate() {
                    let mean = row.iter().copied().sum::<T>() * inv_m;
                    for j in 0..m {
                        xhat[r * m + j] = (row[j] - mean) * rstd[r];
                    }
                }
                if needs(*gamma) {
                    let gg = slot(grads, *gamma, m);
                    for (gr, xr) in g.chunks(m).zip(xhat.chunks(m)) {
                        for j in 0..m {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if needs(*beta) {
                    let gb = slot(grads, *beta, m);
                    for gr in g.chunks(m) {
                        add_into(gb, gr);
                    }
                }
                if needs(*x) {
                    let gx = slot(grads, *x, tx.len());
                    let mut dxh = vec![T::zero(); m];
                    for (r, (gr, xr)) in g.chunks(m).zip(xhat.chunks(m)).enumerate() {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..m {
                            dxh[j] = gr[j] * tg[j];
                            s1 += dxh[j];
                            s2 += dxh[j] * xr[j];
                        }
                        s1 *= inv_m;
                        s2 *= inv_m;
                        for j in 0..m {
                            gx[r * m + j] += rstd[r] * (dxh[j] - s1 - xr[j] * s2);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let rows = y.rows();
                let mut off = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if needs(p) {
                        let gp = slot(grads, p, rows * c);
                        for r in 0..rows {
                            add_into(
                                &mut gp[r * c..(r + 1) * c],
                                &g[r * total + off..r * total + off + c],
                            );
                        }
                    }
                    off += c;
                }
            }
            Op::SliceCols { x, start } => {
                let tx = val(*x);
                let (rows, cols) = (tx.rows(), tx.cols());
                let w = y.cols();
                let gx = slot(grads, *x, rows * cols);
                for r in 0..rows {
                    add_into(
                        &mut gx[r * cols + start..r * cols + start + w],
                        &g[r * w..(r + 1) * w],
                    );
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = len(p);
                    if needs(p) {
                        add_into(slot(grads, p, n), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::GatherRows { x, idx } => {
                let tx = val(*x);
                let cols = tx.cols();
                let gx = slot(grads, *x, tx.len());
                for (e, &i) in idx.iter().enumerate() {
                    add_into(&mut gx[i * cols..(i + 1) * cols], &g[e * cols..(e + 1) * cols]);
                }
            }
            Op::ScatterAddRows { x, idx } => {
                let tx = val(*x);
                let cols = tx.cols();
                let gx = slot(grads, *x, tx.len());
                for (e, &i) in idx.iter().enumerate() {
                    add_into(&mut gx[e * cols..(e + 1) * cols], &g[i * cols..(i + 1) * cols]);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                let gx = slot(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Reshape(x) => add_into(slot(grads, *x, g.len()), g),
            Op::Sum(x) => {
                let n = len(*x);
                for o in slot(grads, *x, n).iter_mut() {
                    *o += g[0];
                }
            }
            Op::Mean(x) => {
                let n = len(*x);
                let s = g[0] / T::lit(n.max(1) as f64);
                for o in slot(grads, *x, n).iter_mut() {
                    *o += s;
                }
            }
            Op::ScaleRows { x, s } => {
                let (tx, ts) = (val(*x), val(*s));
                let m = tx.cols();
                if needs(*x) {
                    let gx = slot(grads, *x, tx.len());
                    for (r, &k) in ts.data().iter().enumerate() {
                        for j in 0..m {
                            gx[r * m + j] += g[r * m + j] * k;
                        }
                    }
                }
                if needs(*s) {
                    let gs = slot(grads, *s, ts.len());
                    for (r, o) in gs.iter_mut().enumerate() {
                        let mut acc = T::zero();
                        for j in 0..m {
                            acc += g[r * m + j] * tx.data()[r * m + j];
                        }
                        *o += acc;
                    }
                }
            }
            Op::Conv2d { x, w, b } => {
                let (tx, tw) = (val(*x), val(*w));
                let (gx, gw, gb) = conv::conv2d_backward(tx, tw, g, needs(*x), needs(*w), needs(*b));
                if let Some(gx) = gx {
                    add_into(slot(grads, *x, tx.len()), &gx);
                }
                if let Some(gw) = gw {
                    add_into(slot(grads, *w, tw.len()), &gw);
                }
                if let Some(gb) = gb {
                    let n = len(*b);
                    add_into(slot(grads, *b, n), &gb);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let gx = slot(grads, *x, len(*x));
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src as usize] += g[o];
                }
            }
            Op::Upsample2(x) => {
                let n = len(*x);
                let gx = conv::upsample2_backward(val(*x).shape(), g);
                add_into(slot(grads, *x, n), &gx);
            }
            Op::Custom { op, inputs } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                let need: Vec<bool> = inputs.iter().map(|&v| needs(v)).collect();
                let outs = op.backward(&ins, y, g, &need);
                for ((&v, gv), &nd) in inputs.iter().zip(outs).zip(&need) {
                    if let (Some(gv), true) = (gv, nd) {
                        debug_assert_eq!(gv.len(), len(v), "custom op {}", op.name());
                        add_into(slot(grads, v, len(v)), &gv);
                    }
                }
            }
        }
    }
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct GradTable<T> {
    leaves: BTreeMap<usize, Vec<T>>,
    params: BTreeMap<String, Var>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> GradTable<T> {
    /// Gradient with respect to a leaf; zeros if the leaf was unreachable.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match self.leaves.get(&v.0) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Gradients for every trainable parameter bound on the graph.
    pub fn params(&self) -> Gradients<T> {
        let mut out = Gradients::new();
        for (name, v) in &self.params {
            out.insert(name.clone(), self.wrt(*v));
        }
        out
    }
}
