//! Normalization layers and the dense linear map.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Op, Var};
use crate::linalg::{gemm, MatMut, MatRef};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

impl<T: Scalar> Graph<T> {
    /// Group normalization of `x: [B, C, ...]` with per-channel scale `gamma` and shift `beta`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || groups == 0 || !xs[1].is_multiple_of(groups) {
            return Err(TensorError::invalid("group_norm", format!("{groups} groups do not divide input {xs:?}")));
        }
        let (b, c) = (xs[0], xs[1]);
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(TensorError::shape("group_norm affine", &[c], self.shape(p)));
            }
        }
        let inner: usize = xs[2..].iter().product();
        let gsize = c / groups * inner;
        let eps = T::from_f64c(NORM_EPS);
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![T::zero(); xd.len()];
        let mut means = Vec::with_capacity(b * groups);
        let mut rstds = Vec::with_capacity(b * groups);
        let n = T::from_usize(gsize).unwrap();
        for bg in 0..b * groups {
            let seg = &xd[bg * gsize..(bg + 1) * gsize];
            let mean = seg.iter().copied().sum::<T>() / n;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + eps).sqrt();
            let cbase = (bg % groups) * (c / groups);
            let dst = &mut out[bg * gsize..(bg + 1) * gsize];
            for (k, (o, src)) in dst.chunks_mut(inner).zip(seg.chunks(inner)).enumerate() {
                let (scale, shift) = (rstd * gd[cbase + k], bd[cbase + k]);
                for (o, &v) in o.iter_mut().zip(src) {
                    *o = (v - mean) * scale + shift;
                }
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let t = Tensor::new(&xs, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(t, Op::GroupNorm { x, gamma, beta, groups, mean: means, rstd: rstds }, rg))
    }

    /// Parameter-free layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| TensorError::invalid("layer_norm", "scalar input"))?;
        let eps = T::from_f64c(NORM_EPS);
        let xd = self.value(x).data();
        let n = T::from_usize(d).unwrap();
        let mut out = vec![T::zero(); xd.len()];
        let mut rstds = Vec::with_capacity(xd.len() / d.max(1));
        for (r, row) in xd.chunks(d).enumerate() {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + eps).sqrt();
            for (j, &v) in row.iter().enumerate() {
                out[r * d + j] = (v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        let t = Tensor::new(&xs, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::LayerNorm { x, rstd: rstds }, rg))
    }

    /// `x: [..., Din] @ w: [Din, Dout] + b: [Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(TensorError::invalid("linear", format!("input {xs:?} incompatible with weight {ws:?}")));
        }
        let (din, dout) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(TensorError::shape("linear bias", &[dout], self.shape(b)));
            }
        }
        let rows = self.value(x).numel() / din;
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(bd);
            }
        }
        gemm(
            T::one(),
            MatRef::rm(self.value(x).data(), 0, rows, din),
            MatRef::rm(self.value(w).data(), 0, din, dout),
            T::one(),
            MatMut::rm(&mut out, 0, rows, dout),
        );
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = dout;
        let t = Tensor::new(&shape, out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(t, Op::Linear { x, w, b }, rg))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward<T: Scalar>(
    graph: &Graph<T>,
    grads: &mut [Option<Tensor<T>>],
    gy: &[T],
    x: Var,
    gamma: Var,
    beta: Var,
    groups: usize,
    means: &[T],
    rstds: &[T],
) {
    let xs = graph.shape(x);
    let c = xs[1];
    let inner: usize = xs[2..].iter().product();
    let gsize = c / groups * inner;
    let xd = graph.value(x).data();
    let gd = graph.value(gamma).data();
    let nb = means.len();
    let xhat = |bg: usize, idx: usize| (xd[bg * gsize + idx] - means[bg]) * rstds[bg];
    let chan = |bg: usize, idx: usize| (bg % groups) * (c / groups) + idx / inner;

    if let Some(gb) = graph.acc(grads, beta) {
        for bg in 0..nb {
            for idx in 0..gsize {
                gb[chan(bg, idx)] += gy[bg * gsize + idx];
            }
        }
    }
    if let Some(gg) = graph.acc(grads, gamma) {
        for bg in 0..nb {
            for idx in 0..gsize {
                gg[chan(bg, idx)] += gy[bg * gsize + idx] * xhat(bg, idx);
            }
        }
    }
    if let Some(gx) = graph.acc(grads, x) {
        let n = T::from_usize(gsize).unwrap();
        for bg in 0..nb {
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for idx in 0..gsize {
                let dxh = gy[bg * gsize + idx] * gd[chan(bg, idx)];
                s1 += dxh;
                s2 += dxh * xhat(bg, idx);
            }
            let (m1, m2) = (s1 / n, s2 / n);
            for idx in 0..gsize {
                let dxh = gy[bg * gsize + idx] * gd[chan(bg, idx)];
                gx[bg * gsize + idx] += rstds[bg] * (dxh - m1 - xhat(bg, idx) * m2);
            }
        }
    }
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    graph: &Graph<T>,
    grads: &mut [Option<Tensor<T>>],
    gy: &[T],
    out: Var,
    x: Var,
    rstds: &[T],
) {
    let y = graph.value(out).data();
    let d = *graph.shape(x).last().unwrap();
    let n = T::from_usize(d).unwrap();
    if let Some(gx) = graph.acc(grads, x) {
        for (r, &rstd) in rstds.iter().enumerate() {
            let row = r * d..(r + 1) * d;
            let m1 = gy[row.clone()].iter().copied().sum::<T>() / n;
            let m2 = gy[row.clone()].iter().zip(&y[row.clone()]).map(|(&g, &v)| g * v).sum::<T>() / n;
            for j in row {
                gx[j] += rstd * (gy[j] - m1 - y[j] * m2);
            }
        }
    }
}

pub(crate) fn linear_backward<T: Scalar>(
    graph: &Graph<T>,
    grads: &mut [Option<Tensor<T>>],
    gy: &[T],
    x: Var,
    w: Var,
    b: Option<Var>,
) {
    let ws = graph.shape(w);
    let (din, dout) = (ws[0], ws[1]);
    let rows = graph.value(x).numel() / din;
    if let Some(b) = b {
        if let Some(gb) = graph.acc(grads, b) {
            for r in 0..rows {
                for j in 0..dout {
                    gb[j] += gy[r * dout + j];
                }
            }
        }
    }
    if let Some(gw) = graph.acc(grads, w) {
        gemm(
            T::one(),
            MatRef::rm(graph.value(x).data(), 0, rows, din).t(),
            MatRef::rm(gy, 0, rows, dout),
            T::one(),
            MatMut::rm(gw, 0, din, dout),
        );
    }
    if let Some(gx) = graph.acc(grads, x) {
        gemm(
            T::one(),
            MatRef::rm(gy, 0, rows, dout),
            MatRef::rm(graph.value(w).data(), 0, din, dout).t(),
            T::one(),
            MatMut::rm(gx, 0, rows, din),
        );
    }
}
