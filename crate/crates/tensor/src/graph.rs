//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! Nodes built only from constants never require gradients, so frozen
//! parameters cost nothing in the backward pass.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Silu(Var),
    Gelu(Var),
    Mean(Var),
    MseLoss(Var, Var),
    AddChannel { x: Var, v: Var },
    RowsBroadcast { x: Var, v: Var, mul: bool },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<T>, rstd: Vec<T> },
    LayerNorm { x: Var, rstd: Vec<T> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Attention { q: Var, k: Var, v: Var, heads: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Reshape(Var),
    TransposeLast2(Var),
    Upsample2x(Var),
    Gather { table: Var, ids: Vec<usize> },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Recorded computation.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64c(GELU_C);
    let a = T::from_f64c(GELU_A);
    let half = T::from_f64c(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64c(GELU_C);
    let a = T::from_f64c(GELU_A);
    let half = T::from_f64c(0.5);
    let th = (c * (x + a * x * x * x)).tanh();
    let three = T::from_f64c(3.0);
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * a * x * x)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), self.rg(&[a, b])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), self.rg(&[a, b])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), self.rg(&[a, b])))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(&[a]);
        self.push(v, Op::Silu(a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        self.push(v, Op::Mean(a), rg)
    }

    /// Mean squared error over all elements.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse_loss", a, b)?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let s: T = x.iter().zip(y).map(|(&p, &q)| (p - q) * (p - q)).sum();
        let v = Tensor::scalar(s / T::from_usize(x.len().max(1)).unwrap());
        Ok(self.push(v, Op::MseLoss(a, b), self.rg(&[a, b])))
    }

    /// Adds a per-channel vector to `x: [B, C, ...]`; `v` is `[C]`, `[1, C]` or `[B, C]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let vs = self.shape(v).to_vec();
        if xs.len() < 2 {
            return Err(TensorError::invalid("add_channel", format!("x must be [B, C, ..], got {xs:?}")));
        }
        let (b, c) = (xs[0], xs[1]);
        let vb = match vs.as_slice() {
            [vc] if *vc == c => 1,
            [vb, vc] if *vc == c && (*vb == 1 || *vb == b) => *vb,
            _ => return Err(TensorError::shape("add_channel", &[b, c], &vs)),
        };
        let inner: usize = xs[2..].iter().product();
        let mut out = self.value(x).clone();
        let vd = self.value(v).data();
        for bi in 0..b {
            let vrow = if vb == 1 { 0 } else { bi };
            for ci in 0..c {
                let add = vd[vrow * c + ci];
                let base = (bi * c + ci) * inner;
                for o in &mut out.data_mut()[base..base + inner] {
                    *o += add;
                }
            }
        }
        Ok(self.push(out, Op::AddChannel { x, v }, self.rg(&[x, v])))
    }

    fn rows_broadcast(&mut self, x: Var, v: Var, mul: bool) -> Result<Var> {
        let op = if mul { "mul_rows" } else { "add_rows" };
        let xs = self.shape(x).to_vec();
        let vs = self.shape(v).to_vec();
        if xs.len() != 3 || vs.len() != 2 || xs[2] != vs[1] {
            return Err(TensorError::invalid(op, format!("expected x [B, N, D] and v [B, D], got {xs:?} and {vs:?}")));
        }
        let (bx, n, d) = (xs[0], xs[1], xs[2]);
        let bv = vs[0];
        let b = bx.max(bv);
        if (bx != 1 && bx != b) || (bv != 1 && bv != b) {
            return Err(TensorError::invalid(op, format!("batch sizes {bx} and {bv} do not broadcast")));
        }
        let xd = self.value(x).data();
        let vd = self.value(v).data();
        let mut out = Vec::with_capacity(b * n * d);
        for bi in 0..b {
            let xo = if bx == 1 { 0 } else { bi * n * d };
            let vo = if bv == 1 { 0 } else { bi * d };
            for r in 0..n {
                for j in 0..d {
                    let (a, s) = (xd[xo + r * d + j], vd[vo + j]);
                    out.push(if mul { a * s } else { a + s });
                }
            }
        }
        let t = Tensor::new(&[b, n, d], out)?;
        Ok(self.push(t, Op::RowsBroadcast { x, v, mul }, self.rg(&[x, v])))
    }

    /// `x[b, n, :] * v[b, :]` with batch broadcasting over size-1 leading axes.
    pub fn mul_rows(&mut self, x: Var, v: Var) -> Result<Var> {
        self.rows_broadcast(x, v, true)
    }

    /// `x[b, n, :] + v[b, :]` with batch broadcasting over size-1 leading axes.
    pub fn add_rows(&mut self, x: Var, v: Var) -> Result<Var> {
        self.rows_broadcast(x, v, false)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Swaps the two trailing axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(TensorError::invalid("transpose_last2", format!("rank {} < 2", s.len())));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let lead: usize = s[..s.len() - 2].iter().product();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        transpose_blocks(src, &mut out, lead, r, c);
        let mut ns = s.clone();
        let k = ns.len();
        ns.swap(k - 2, k - 1);
        let t = Tensor::new(&ns, out)?;
        Ok(self.push(t, Op::TransposeLast2(x), self.rg(&[x])))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| TensorError::invalid("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * n..(o + 1) * n]);
            }
        }
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(inputs);
        Ok(self.push(t, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(TensorError::invalid(
                "narrow",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Narrow { x, axis, start }, self.rg(&[x])))
    }

    /// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(TensorError::invalid("upsample2x", format!("expected [B, C, H, W], got {s:?}")));
        }
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); bc * 4 * h * w];
        for p in 0..bc {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    out[(p * 2 * h + i) * 2 * w + j] = src[(p * h + i / 2) * w + j / 2];
                }
            }
        }
        let t = Tensor::new(&[s[0], s[1], 2 * h, 2 * w], out)?;
        Ok(self.push(t, Op::Upsample2x(x), self.rg(&[x])))
    }

    /// Selects rows of a `[R, D]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(TensorError::invalid("gather_rows", format!("table must be 2-d, got {s:?}")));
        }
        let d = s[1];
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= s[0] {
                return Err(TensorError::invalid("gather_rows", format!("row {id} out of range {}", s[0])));
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.push(t, Op::Gather { table, ids: ids.to_vec() }, self.rg(&[table])))
    }

    /// Reverse pass from a single-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::invalid("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, &gy, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let g = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (o, &v) in gb.iter_mut().zip(g) {
                        *o -= v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &gv), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gv * y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, &gv), &x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gv * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (o, &gv) in ga.iter_mut().zip(g) {
                        *o += gv * *c;
                    }
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &gv), &xv) in ga.iter_mut().zip(g).zip(x) {
                        let s = sigmoid(xv);
                        *o += gv * s * (T::one() + xv * (T::one() - s));
                    }
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &gv), &xv) in ga.iter_mut().zip(g).zip(x) {
                        *o += gv * gelu_grad(xv);
                    }
                }
            }
            Op::Mean(a) => {
                let n = T::from_usize(self.value(*a).numel().max(1)).unwrap();
                let s = g[0] / n;
                if let Some(ga) = self.acc(grads, *a) {
                    for o in ga.iter_mut() {
                        *o += s;
                    }
                }
            }
            Op::MseLoss(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let s = g[0] * T::from_f64c(2.0) / T::from_usize(av.len().max(1)).unwrap();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &x), &y) in ga.iter_mut().zip(av).zip(bv) {
                        *o += s * (x - y);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, &x), &y) in gb.iter_mut().zip(av).zip(bv) {
                        *o -= s * (x - y);
                    }
                }
            }
            Op::AddChannel { x, v } => {
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(gx, g);
                }
                let xs = self.shape(*x);
                let (b, c) = (xs[0], xs[1]);
                let inner: usize = xs[2..].iter().product();
                if let Some(gv) = self.acc(grads, *v) {
                    for bi in 0..b {
                        let row = if gv.len() > c { bi } else { 0 };
                        for ci in 0..c {
                            let base = (bi * c + ci) * inner;
                            let s: T = g[base..base + inner].iter().copied().sum();
                            gv[row * c + ci] += s;
                        }
                    }
                }
            }
            Op::RowsBroadcast { x, v, mul } => {
                let out = self.shape(Var(i));
                let (b, n, d) = (out[0], out[1], out[2]);
                let bx = self.shape(*x)[0];
                let bv = self.shape(*v)[0];
                let xd = self.value(*x).data();
                let vd = self.value(*v).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for bi in 0..b {
                        let xo = if bx == 1 { 0 } else { bi * n * d };
                        let vo = if bv == 1 { 0 } else { bi * d };
                        for r in 0..n {
                            for j in 0..d {
                                let gv = g[(bi * n + r) * d + j];
                                gx[xo + r * d + j] += if *mul { gv * vd[vo + j] } else { gv };
                            }
                        }
                    }
                }
                if let Some(gvv) = self.acc(grads, *v) {
                    for bi in 0..b {
                        let xo = if bx == 1 { 0 } else { bi * n * d };
                        let vo = if bv == 1 { 0 } else { bi * d };
                        for r in 0..n {
                            for j in 0..d {
                                let gv = g[(bi * n + r) * d + j];
                                gvv[vo + j] += if *mul { gv * xd[xo + r * d + j] } else { gv };
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                crate::conv::conv2d_backward(self, grads, g, *x, *w, *b, *stride, *pad)?
            }
            Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                crate::norm::group_norm_backward(self, grads, g, *x, *gamma, *beta, *groups, mean, rstd)
            }
            Op::LayerNorm { x, rstd } => crate::norm::layer_norm_backward(self, grads, g, Var(i), *x, rstd),
            Op::Linear { x, w, b } => crate::norm::linear_backward(self, grads, g, *x, *w, *b),
            Op::Attention { q, k, v, heads } => {
                crate::attention::attention_backward(self, grads, g, *q, *k, *v, *heads)
            }
            Op::Concat { inputs, axis } => {
                let shape = self.shape(Var(i)).to_vec();
                let (outer, _, inner) = split_axis(&shape, *axis);
                let total = shape[*axis] * inner;
                let mut off = 0;
                for &v in inputs {
                    let n = self.shape(v)[*axis] * inner;
                    if let Some(gv) = self.acc(grads, v) {
                        for o in 0..outer {
                            add_into(&mut gv[o * n..(o + 1) * n], &g[o * total + off..o * total + off + n]);
                        }
                    }
                    off += n;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x).to_vec();
                let len = self.shape(Var(i))[*axis];
                let (outer, n, inner) = split_axis(&xs, *axis);
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        let base = (o * n + start) * inner;
                        add_into(&mut gx[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                }
            }
            Op::TransposeLast2(x) => {
                let s = self.shape(*x).to_vec();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let lead: usize = s[..s.len() - 2].iter().product();
                if let Some(gx) = self.acc(grads, *x) {
                    let mut tmp = vec![T::zero(); g.len()];
                    transpose_blocks(g, &mut tmp, lead, c, r);
                    add_into(gx, &tmp);
                }
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x).to_vec();
                let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
                if let Some(gx) = self.acc(grads, *x) {
                    for p in 0..bc {
                        for i2 in 0..2 * h {
                            for j2 in 0..2 * w {
                                gx[(p * h + i2 / 2) * w + j2 / 2] += g[(p * 2 * h + i2) * 2 * w + j2];
                            }
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
        }
        Ok(())
    }

    /// Mutable gradient buffer for `v`, allocated on first use; `None` when `v` needs no gradient.
    pub(crate) fn acc<'a>(&self, grads: &'a mut [Option<Tensor<T>>], v: Var) -> Option<&'a mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        slot.as_mut().map(|t| t.data_mut())
    }
}

pub(crate) fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Transposes `lead` consecutive `r x c` blocks of `src` into `dst`.
pub(crate) fn transpose_blocks<T: Scalar>(src: &[T], dst: &mut [T], lead: usize, r: usize, c: usize) {
    for l in 0..lead {
        let base = l * r * c;
        for i in 0..r {
            for j in 0..c {
                dst[base + j * r + i] = src[base + i * c + j];
            }
        }
    }
}
