//! 2-d convolution via im2col + gemm.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Op, Var};
use crate::linalg::{gemm, MatMut, MatRef};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `oj` whose input column `oj * stride + kj - pad` lies in `0..w`.
fn valid_cols(g: Geom, kj: usize) -> (usize, usize) {
    let lo = if g.pad > kj { (g.pad - kj).div_ceil(g.stride) } else { 0 };
    let hi = if g.w + g.pad > kj { ((g.w - 1 + g.pad - kj) / g.stride + 1).min(g.wo) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], g: Geom, cols: &mut [T]) {
    let plane = g.ho * g.wo;
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kj);
                for oi in 0..g.ho {
                    let out = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii as usize >= g.h || lo == hi {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + ii as usize) * g.w..][..g.w];
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    let j0 = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        out[lo..hi].copy_from_slice(&src[j0..j0 + hi - lo]);
                    } else {
                        for (o, j) in out[lo..hi].iter_mut().zip((j0..).step_by(g.stride)) {
                            *o = src[j];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: Geom, dx: &mut [T]) {
    let plane = g.ho * g.wo;
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kj);
                if lo == hi {
                    continue;
                }
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii as usize >= g.h {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + ii as usize) * g.w..][..g.w];
                    let j0 = lo * g.stride + kj - g.pad;
                    for (&v, j) in src[oi * g.wo + lo..oi * g.wo + hi].iter().zip((j0..).step_by(g.stride)) {
                        dst[j] += v;
                    }
                }
            }
        }
    }
}

fn geometry(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<Geom> {
    if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || xs[1] != ws[1] || stride == 0 {
        return Err(TensorError::invalid(
            "conv2d",
            format!("incompatible input {xs:?} and weight {ws:?} (stride {stride})"),
        ));
    }
    let (h, w, k) = (xs[2], xs[3], ws[2]);
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(TensorError::invalid("conv2d", format!("kernel {k} larger than padded input {h}x{w}")));
    }
    Ok(Geom { c: xs[1], h, w, k, stride, pad, ho: (h + 2 * pad - k) / stride + 1, wo: (w + 2 * pad - k) / stride + 1 })
}

impl<T: Scalar> Graph<T> {
    /// `x: [B, Ci, H, W]`, `w: [Co, Ci, k, k]`, optional `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let geo = geometry(&xs, &ws, stride, pad)?;
        let co = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(TensorError::shape("conv2d bias", &[co], self.shape(b)));
            }
        }
        let batch = xs[0];
        let ckk = geo.c * geo.k * geo.k;
        let plane = geo.ho * geo.wo;
        let in_plane = geo.c * geo.h * geo.w;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![T::zero(); batch * co * plane];
        let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * plane] };
        for bi in 0..batch {
            let xb = &xd[bi * in_plane..(bi + 1) * in_plane];
            let rhs = if geo.is_pointwise() {
                MatRef::rm(xb, 0, ckk, plane)
            } else {
                im2col(xb, geo, &mut cols);
                MatRef::rm(&cols, 0, ckk, plane)
            };
            gemm(
                T::one(),
                MatRef::rm(wd, 0, co, ckk),
                rhs,
                T::zero(),
                MatMut::rm(&mut out, bi * co * plane, co, plane),
            );
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for bi in 0..batch {
                for c in 0..co {
                    let base = (bi * co + c) * plane;
                    for o in &mut out[base..base + plane] {
                        *o += bd[c];
                    }
                }
            }
        }
        let t = Tensor::new(&[batch, co, geo.ho, geo.wo], out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(t, Op::Conv2d { x, w, b, stride, pad }, rg))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    graph: &Graph<T>,
    grads: &mut [Option<Tensor<T>>],
    gy: &[T],
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    pad: usize,
) -> Result<()> {
    let xs = graph.shape(x).to_vec();
    let ws = graph.shape(w).to_vec();
    let geo = geometry(&xs, &ws, stride, pad)?;
    let co = ws[0];
    let batch = xs[0];
    let ckk = geo.c * geo.k * geo.k;
    let plane = geo.ho * geo.wo;
    let in_plane = geo.c * geo.h * geo.w;
    let xd = graph.value(x).data();
    let wd = graph.value(w).data();

    if let Some(b) = b {
        if let Some(gb) = graph.acc(grads, b) {
            for bi in 0..batch {
                for c in 0..co {
                    let base = (bi * co + c) * plane;
                    gb[c] += gy[base..base + plane].iter().copied().sum::<T>();
                }
            }
        }
    }

    let need_w = graph.requires_grad(w);
    let need_x = graph.requires_grad(x);
    let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * plane] };
    if need_w {
        let gw = graph.acc(grads, w).expect("weight requires grad");
        for bi in 0..batch {
            let xb = &xd[bi * in_plane..(bi + 1) * in_plane];
            let cols_ref = if geo.is_pointwise() {
                MatRef::rm(xb, 0, ckk, plane)
            } else {
                im2col(xb, geo, &mut cols);
                MatRef::rm(&cols, 0, ckk, plane)
            };
            gemm(
                T::one(),
                MatRef::rm(gy, bi * co * plane, co, plane),
                cols_ref.t(),
                T::one(),
                MatMut::rm(gw, 0, co, ckk),
            );
        }
    }
    if need_x {
        let gx = graph.acc(grads, x).expect("input requires grad");
        let mut dcols = vec![T::zero(); ckk * plane];
        for bi in 0..batch {
            if geo.is_pointwise() {
                gemm(
                    T::one(),
                    MatRef::rm(wd, 0, co, ckk).t(),
                    MatRef::rm(gy, bi * co * plane, co, plane),
                    T::one(),
                    MatMut::rm(gx, bi * in_plane, ckk, plane),
                );
            } else {
                gemm(
                    T::one(),
                    MatRef::rm(wd, 0, co, ckk).t(),
                    MatRef::rm(gy, bi * co * plane, co, plane),
                    T::zero(),
                    MatMut::rm(&mut dcols, 0, ckk, plane),
                );
                col2im_add(&dcols, geo, &mut gx[bi * in_plane..(bi + 1) * in_plane]);
            }
        }
    }
    Ok(())
}
