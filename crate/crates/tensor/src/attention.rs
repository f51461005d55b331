//! Multi-head scaled dot-product attention with broadcastable key/value batches.

use crate::error::{Result, TensorError};
use crate::graph::{add_into, Graph, Op, Var};
use crate::linalg::{gemm, MatMut, MatRef};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
struct Dims {
    b: usize,
    bk: usize,
    bv: usize,
    mq: usize,
    mk: usize,
    d: usize,
    dh: usize,
}

impl Dims {
    fn q_off(&self, b: usize, h: usize) -> usize {
        b * self.mq * self.d + h * self.dh
    }

    fn k_off(&self, b: usize, h: usize) -> usize {
        let bk = if self.bk == 1 { 0 } else { b };
        bk * self.mk * self.d + h * self.dh
    }

    fn v_off(&self, b: usize, h: usize) -> usize {
        let bv = if self.bv == 1 { 0 } else { b };
        bv * self.mk * self.d + h * self.dh
    }

    fn head<'a, T>(&self, data: &'a [T], off: usize, rows: usize) -> MatRef<'a, T> {
        MatRef { data, offset: off, rows, cols: self.dh, rs: self.d, cs: 1 }
    }

    fn scale<T: Scalar>(&self) -> T {
        T::one() / T::from_usize(self.dh).unwrap().sqrt()
    }
}

fn dims(qs: &[usize], ks: &[usize], vs: &[usize], heads: usize) -> Result<Dims> {
    let ok = qs.len() == 3
        && ks.len() == 3
        && vs.len() == 3
        && ks[1..] == vs[1..]
        && qs[2] == ks[2]
        && heads > 0
        && qs[2].is_multiple_of(heads)
        && (ks[0] == 1 || ks[0] == qs[0])
        && (vs[0] == 1 || vs[0] == qs[0])
        && ks[1] > 0;
    if !ok {
        return Err(TensorError::invalid(
            "attention",
            format!("q {qs:?}, k {ks:?}, v {vs:?} with {heads} heads are incompatible"),
        ));
    }
    Ok(Dims { b: qs[0], bk: ks[0], bv: vs[0], mq: qs[1], mk: ks[1], d: qs[2], dh: qs[2] / heads })
}

fn softmax_rows<T: Scalar>(s: &mut [T], cols: usize) {
    for row in s.chunks_mut(cols) {
        let m = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

fn probs<T: Scalar>(dm: &Dims, q: &[T], k: &[T], b: usize, h: usize, out: &mut [T]) {
    gemm(
        dm.scale(),
        dm.head(q, dm.q_off(b, h), dm.mq),
        dm.head(k, dm.k_off(b, h), dm.mk).t(),
        T::zero(),
        MatMut::rm(out, 0, dm.mq, dm.mk),
    );
    softmax_rows(out, dm.mk);
}

/// Attention weights `[B, H, Mq, Mk]`; each row is a probability vector.
pub fn attention_weights<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    let dm = dims(q.shape(), k.shape(), k.shape(), heads)?;
    let mut out = vec![T::zero(); dm.b * heads * dm.mq * dm.mk];
    let block = dm.mq * dm.mk;
    for b in 0..dm.b {
        for h in 0..heads {
            let o = (b * heads + h) * block;
            probs(&dm, q.data(), k.data(), b, h, &mut out[o..o + block]);
        }
    }
    Tensor::new(&[dm.b, heads, dm.mq, dm.mk], out)
}

impl<T: Scalar> Graph<T> {
    /// `softmax(q_h k_h^T / sqrt(d_h)) v_h` per head, heads concatenated on the last axis.
    ///
    /// `q: [B, Mq, D]`; `k, v: [_, Mk, D]` whose leading axes are each 1 (shared) or `B`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let dm = dims(self.shape(q), self.shape(k), self.shape(v), heads)?;
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![T::zero(); dm.b * dm.mq * dm.d];
        let mut p = vec![T::zero(); dm.mq * dm.mk];
        for b in 0..dm.b {
            for h in 0..heads {
                probs(&dm, qd, kd, b, h, &mut p);
                gemm(
                    T::one(),
                    MatRef::rm(&p, 0, dm.mq, dm.mk),
                    dm.head(vd, dm.v_off(b, h), dm.mk),
                    T::zero(),
                    MatMut { data: &mut out, offset: dm.q_off(b, h), rows: dm.mq, cols: dm.dh, rs: dm.d, cs: 1 },
                );
            }
        }
        let t = Tensor::new(&[dm.b, dm.mq, dm.d], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(t, Op::Attention { q, k, v, heads }, rg))
    }
}

pub(crate) fn attention_backward<T: Scalar>(
    graph: &Graph<T>,
    grads: &mut [Option<Tensor<T>>],
    gy: &[T],
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) {
    let dm = dims(graph.shape(q), graph.shape(k), graph.shape(v), heads).expect("validated in forward");
    let (qd, kd, vd) = (graph.value(q).data(), graph.value(k).data(), graph.value(v).data());
    let (need_q, need_k, need_v) = (graph.requires_grad(q), graph.requires_grad(k), graph.requires_grad(v));
    let mut gq = vec![T::zero(); if need_q { qd.len() } else { 0 }];
    let mut gk = vec![T::zero(); if need_k { kd.len() } else { 0 }];
    let mut gv = vec![T::zero(); if need_v { vd.len() } else { 0 }];
    let mut p = vec![T::zero(); dm.mq * dm.mk];
    let mut dp = vec![T::zero(); dm.mq * dm.mk];
    let scale: T = dm.scale();
    for b in 0..dm.b {
        for h in 0..heads {
            probs(&dm, qd, kd, b, h, &mut p);
            let go = dm.head(gy, dm.q_off(b, h), dm.mq);
            if need_v {
                gemm(
                    T::one(),
                    MatRef::rm(&p, 0, dm.mq, dm.mk).t(),
                    go,
                    T::one(),
                    MatMut { data: &mut gv, offset: dm.v_off(b, h), rows: dm.mk, cols: dm.dh, rs: dm.d, cs: 1 },
                );
            }
            if !(need_q || need_k) {
                continue;
            }
            gemm(T::one(), go, dm.head(vd, dm.v_off(b, h), dm.mk).t(), T::zero(), MatMut::rm(&mut dp, 0, dm.mq, dm.mk));
            for (prow, dprow) in p.chunks(dm.mk).zip(dp.chunks_mut(dm.mk)) {
                let dot: T = prow.iter().zip(dprow.iter()).map(|(&a, &b)| a * b).sum();
                for (d, &pv) in dprow.iter_mut().zip(prow) {
                    *d = pv * (*d - dot);
                }
            }
            if need_q {
                gemm(
                    scale,
                    MatRef::rm(&dp, 0, dm.mq, dm.mk),
                    dm.head(kd, dm.k_off(b, h), dm.mk),
                    T::one(),
                    MatMut { data: &mut gq, offset: dm.q_off(b, h), rows: dm.mq, cols: dm.dh, rs: dm.d, cs: 1 },
                );
            }
            if need_k {
                gemm(
                    scale,
                    MatRef::rm(&dp, 0, dm.mq, dm.mk).t(),
                    dm.head(qd, dm.q_off(b, h), dm.mq),
                    T::one(),
                    MatMut { data: &mut gk, offset: dm.k_off(b, h), rows: dm.mk, cols: dm.dh, rs: dm.d, cs: 1 },
                );
            }
        }
    }
    if let Some(g) = graph.acc(grads, q) {
        add_into(g, &gq);
    }
    if let Some(g) = graph.acc(grads, k) {
        add_into(g, &gk);
    }
    if let Some(g) = graph.acc(grads, v) {
        add_into(g, &gv);
    }
}
