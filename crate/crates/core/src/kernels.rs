//! Raw numeric kernels over flat row-major buffers.
//!
//! Everything here is single-threaded with a fixed reduction order, so the
//! same inputs always produce bit-identical outputs.

/// `c = a·b` (or `c += a·b` when `accumulate`), with optional transposition of
/// either operand. `a` is `m×k` after transposition, `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the length assertions above guarantee every strided access made by
    // dgemm for an m×k by k×n product lies inside `a`, `b` and `c`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution over a `[C, H, W]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// True when im2col would be a plain copy of the input.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds receptive fields into a `[C·kh·kw, Ho·Wo]` matrix (zero padding).
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let mut cols = vec![0.0; g.col_rows() * ho * wo];
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                let (lo, hi) = valid_span(g, kj, wo);
                for oi in 0..ho {
                    let Some(ii) = source_index(g, oi, ki, g.height) else {
                        continue;
                    };
                    let src_row = &plane[ii * g.width..(ii + 1) * g.width];
                    let dst_row = &mut dst[oi * wo..(oi + 1) * wo];
                    if g.stride == 1 {
                        let j0 = lo + kj - g.pad;
                        dst_row[lo..hi].copy_from_slice(&src_row[j0..j0 + hi - lo]);
                    } else {
                        for oj in lo..hi {
                            dst_row[oj] = src_row[oj * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Output columns `lo..hi` whose kernel tap `kj` lands inside the input row.
fn valid_span(g: &ConvGeom, kj: usize, wo: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride);
    let hi = if g.width + g.pad > kj {
        ((g.width + g.pad - kj - 1) / g.stride + 1).min(wo)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn source_index(g: &ConvGeom, o: usize, k: usize, extent: usize) -> Option<usize> {
    let i = (o * g.stride + k).checked_sub(g.pad)?;
    (i < extent).then_some(i)
}

/// Adjoint of [`im2col`]: scatters-adds a column matrix back onto `x`.
pub fn col2im_add(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                let (lo, hi) = valid_span(g, kj, wo);
                for oi in 0..ho {
                    let Some(ii) = source_index(g, oi, ki, g.height) else {
                        continue;
                    };
                    let dst_row = &mut plane[ii * g.width..(ii + 1) * g.width];
                    let src_row = &src[oi * wo..(oi + 1) * wo];
                    for oj in lo..hi {
                        dst_row[oj * g.stride + kj - g.pad] += src_row[oj];
                    }
                }
            }
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output shape of permuting `shape` by `axes` (`out.shape[i] = shape[axes[i]]`).
pub fn permuted_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    axes.iter().map(|&a| shape[a]).collect()
}

/// Permutes axes of a row-major buffer. When `accumulate` is set the result is
/// added into `out` instead of overwriting it.
pub fn permute_into(src: &[f64], shape: &[usize], axes: &[usize], out: &mut [f64], accumulate: bool) {
    let in_strides = strides(shape);
    let out_shape = permuted_shape(shape, axes);
    // Stride in the source buffer for each output axis.
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = out_shape.len();
    if rank == 0 {
        if accumulate {
            out[0] += src[0];
        } else {
            out[0] = src[0];
        }
        return;
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    let mut o = 0;
    let outer: usize = out_shape[..rank - 1].iter().product();
    for _ in 0..outer {
        let dst = &mut out[o..o + inner];
        if accumulate {
            for (j, d) in dst.iter_mut().enumerate() {
                *d += src[base + j * inner_stride];
            }
        } else {
            for (j, d) in dst.iter_mut().enumerate() {
                *d = src[base + j * inner_stride];
            }
        }
        o += inner;
        // Odometer increment over the outer axes.
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}
