//! Matrix products, convolutions and broadcast bias.
//!
//! Convolutions use the cross-correlation convention (the kernel is not
//! flipped), with `[C, H, W]` inputs and `[C_out, C_in, kh, kw]` kernels.

use super::{Grads, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{col2im_add, gemm, im2col, ConvGeom};
use crate::tensor::Tensor;

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    /// `[m,k] · [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
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
        let v = Tensor::from_parts(vec![m, n], out);
        Ok(self.push(v, Op::Matmul { a, b, m, k, n }, &[a, b]))
    }

    /// Batched product `[B,m,k] · [B,k,n] → [B,m,n]`; with `trans_b` the right
    /// operand is `[B,n,k]` and multiplied transposed.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bad = || {
            Error::dim(
                "batch_matmul",
                format!("cannot multiply {sa:?} by {sb:?} (trans_b={trans_b})"),
            )
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        if kb != k {
            return Err(bad());
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &va[i * m * k..(i + 1) * m * k],
                false,
                &vb[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let v = Tensor::from_parts(vec![batch, m, n], out);
        Ok(self.push(
            v,
            Op::BatchMatmul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            },
            &[a, b],
        ))
    }

    /// 2-D cross-correlation of `x: [C_in,H,W]` with `w: [C_out,C_in,kh,kw]`.
    /// Output is `[C_out, (H+2p-kh)/s+1, (W+2p-kw)/s+1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] {
            return Err(Error::dim(
                "conv2d",
                format!("input {sx:?} incompatible with kernel {sw:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be at least 1"));
        }
        let geom = ConvGeom {
            channels: sx[0],
            height: sx[1],
            width: sx[2],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
        };
        if geom.kh > geom.height + 2 * pad || geom.kw > geom.width + 2 * pad {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "kernel {}x{} larger than padded input {sx:?} (pad {pad})",
                    geom.kh, geom.kw
                ),
            ));
        }
        let c_out = sw[0];
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let xv = self.value(x).data();
        let owned;
        let cols: &[f64] = if geom.is_pointwise() {
            xv
        } else {
            owned = im2col(xv, &geom);
            &owned
        };
        let mut out = vec![0.0; c_out * cols_n];
        gemm(
            c_out,
            rows,
            cols_n,
            self.value(w).data(),
            false,
            cols,
            false,
            &mut out,
            false,
        );
        let v = Tensor::from_parts(vec![c_out, geom.out_height(), geom.out_width()], out);
        Ok(self.push(v, Op::Conv2d { x, w, geom, c_out }, &[x, w]))
    }

    /// Transposed convolution (no padding) of `x: [C_in,H,W]` with
    /// `w: [C_in,C_out,kh,kw]`. Output is `[C_out, (H-1)·s+kh, (W-1)·s+kw]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 4 || sw[0] != sx[0] {
            return Err(Error::dim(
                "conv_transpose2d",
                format!("input {sx:?} incompatible with kernel {sw:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::dim("conv_transpose2d", "stride must be at least 1"));
        }
        let (c_in, h, wd) = (sx[0], sx[1], sx[2]);
        let (c_out, kh, kw) = (sw[1], sw[2], sw[3]);
        let geom = ConvGeom {
            channels: c_out,
            height: (h - 1) * stride + kh,
            width: (wd - 1) * stride + kw,
            kh,
            kw,
            stride,
            pad: 0,
        };
        let rows = geom.col_rows();
        let mut cols = vec![0.0; rows * h * wd];
        gemm(
            rows,
            c_in,
            h * wd,
            self.value(w).data(),
            true,
            self.value(x).data(),
            false,
            &mut cols,
            false,
        );
        let mut out = vec![0.0; c_out * geom.height * geom.width];
        col2im_add(&cols, &geom, &mut out);
        let v = Tensor::from_parts(vec![c_out, geom.height, geom.width], out);
        Ok(self.push(v, Op::ConvTranspose2d { x, w, geom, c_in }, &[x, w]))
    }

    /// Adds the vector `b` along `axis` of `x` (`b.len() == x.shape[axis]`).
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if axis >= sx.len() || sb.len() != 1 || sb[0] != sx[axis] {
            return Err(Error::dim(
                "add_bias",
                format!("bias {sb:?} does not match axis {axis} of {sx:?}"),
            ));
        }
        let (outer, len, inner) = outer_inner(sx, axis);
        let mut out = self.value(x).data().to_vec();
        let bv = self.value(b).data();
        for o in 0..outer {
            for (c, &bias) in bv.iter().enumerate() {
                let start = (o * len + c) * inner;
                out[start..start + inner].iter_mut().for_each(|v| *v += bias);
            }
        }
        let v = Tensor::from_parts(sx.to_vec(), out);
        Ok(self.push(v, Op::AddBias { x, b, axis }, &[x, b]))
    }
}

pub(super) fn backward(tape: &Tape, op: &Op, gout: &[f64], grads: &mut Grads<'_>) {
    match *op {
        Op::Matmul { a, b, m, k, n } => {
            let (va, vb) = (tape.value(a).data(), tape.value(b).data());
            grads.acc(a, |da| gemm(m, n, k, gout, false, vb, true, da, true));
            grads.acc(b, |db| gemm(k, m, n, va, true, gout, false, db, true));
        }
        Op::BatchMatmul {
            a,
            b,
            trans_b,
            batch,
            m,
            k,
            n,
        } => {
            let (va, vb) = (tape.value(a).data(), tape.value(b).data());
            grads.acc(a, |da| {
                for i in 0..batch {
                    let g = &gout[i * m * n..(i + 1) * m * n];
                    let bb = &vb[i * k * n..(i + 1) * k * n];
                    // trans_b: B is [n,k] and dA = dC·B; otherwise B is [k,n] and dA = dC·Bᵀ.
                    gemm(
                        m,
                        n,
                        k,
                        g,
                        false,
                        bb,
                        !trans_b,
                        &mut da[i * m * k..(i + 1) * m * k],
                        true,
                    );
                }
            });
            grads.acc(b, |db| {
                for i in 0..batch {
                    let g = &gout[i * m * n..(i + 1) * m * n];
                    let aa = &va[i * m * k..(i + 1) * m * k];
                    let dst = &mut db[i * k * n..(i + 1) * k * n];
                    if trans_b {
                        gemm(n, m, k, g, true, aa, false, dst, true);
                    } else {
                        gemm(k, m, n, aa, true, g, false, dst, true);
                    }
                }
            });
        }
        Op::Conv2d { x, w, geom, c_out } => {
            let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
            let wv = tape.value(w).data();
            if tape.requires_grad(w) {
                let xv = tape.value(x).data();
                let owned;
                let cols: &[f64] = if geom.is_pointwise() {
                    xv
                } else {
                    owned = im2col(xv, &geom);
                    &owned
                };
                grads.acc(w, |dw| gemm(c_out, cols_n, rows, gout, false, cols, true, dw, true));
            }
            grads.acc(x, |dx| {
                if geom.is_pointwise() {
                    gemm(rows, c_out, cols_n, wv, true, gout, false, dx, true);
                } else {
                    let mut dcols = vec![0.0; rows * cols_n];
                    gemm(rows, c_out, cols_n, wv, true, gout, false, &mut dcols, false);
                    col2im_add(&dcols, &geom, dx);
                }
            });
        }
        Op::ConvTranspose2d { x, w, geom, c_in } => {
            let rows = geom.col_rows();
            let hw = geom.col_cols();
            let dcols = im2col(gout, &geom);
            let (xv, wv) = (tape.value(x).data(), tape.value(w).data());
            grads.acc(x, |dx| gemm(c_in, rows, hw, wv, false, &dcols, false, dx, true));
            grads.acc(w, |dw| gemm(c_in, hw, rows, xv, false, &dcols, true, dw, true));
        }
        Op::AddBias { x, b, axis } => {
            grads.acc_slice(x, gout);
            let (outer, len, inner) = outer_inner(tape.shape(x), axis);
            grads.acc(b, |db| {
                for o in 0..outer {
                    for (c, d) in db.iter_mut().enumerate() {
                        let start = (o * len + c) * inner;
                        *d += gout[start..start + inner].iter().sum::<f64>();
                    }
                }
            });
        }
        _ => unreachable!("not a linear-algebra op"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_two_by_two() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn([3, 3], |i| (i as f64).sin()));
        let eye = tape.constant(Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let c = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(c), tape.value(a));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] by [2, 3]"), "{msg}");
    }

    #[test]
    fn conv2d_diagonal_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[5.0]);
    }

    #[test]
    fn conv2d_unit_pointwise_is_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn([1, 4, 5], |i| i as f64 * 0.5));
        let w = tape.constant(Tensor::ones([1, 1, 1, 1]));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn conv2d_patchify_shape() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([3, 64, 64]));
        let w = tape.constant(Tensor::zeros([5, 3, 8, 8]));
        let y = tape.conv2d(x, w, 8, 0).unwrap();
        assert_eq!(tape.shape(y), &[5, 8, 8]);
    }

    #[test]
    fn conv2d_kernel_too_large() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 2, 2]));
        let w = tape.constant(Tensor::zeros([1, 1, 3, 3]));
        assert!(matches!(tape.conv2d(x, w, 1, 0), Err(Error::Dimension { .. })));
        assert!(tape.conv2d(x, w, 1, 1).is_ok());
    }

    #[test]
    fn conv_transpose_spreads_single_value() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1], &[2.5]));
        let w = tape.constant(Tensor::ones([1, 1, 2, 2]));
        let y = tape.conv_transpose2d(x, w, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[2.5; 4]);
    }

    #[test]
    fn conv_transpose_inverts_conv_shape() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([2, 12, 8]));
        let w = tape.constant(Tensor::zeros([3, 2, 4, 4]));
        let y = tape.conv2d(x, w, 4, 0).unwrap();
        let wt = tape.constant(Tensor::zeros([3, 2, 4, 4]));
        let z = tape.conv_transpose2d(y, wt, 4).unwrap();
        assert_eq!(tape.shape(z), &[2, 12, 8]);
    }

    #[test]
    fn bias_along_channel_axis() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros([2, 2, 2]));
        let b = tape.param(t(&[2], &[1.0, -1.0]));
        let y = tape.add_bias(x, b, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0]);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[4.0, 4.0]);
    }
}
