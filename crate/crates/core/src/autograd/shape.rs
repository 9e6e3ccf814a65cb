//! Layout operations: reshape, permute, concat, nearest upsampling, crop.

use super::{Grads, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{inverse_permutation, permute_into, permuted_shape};
use crate::tensor::Tensor;

/// Axis-aligned spatial rectangle inside an `[C, H, W]` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Self {
            top,
            left,
            height,
            width,
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self::new(0, 0, height, width)
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top && row < self.top + self.height && col >= self.left && col < self.left + self.width
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.top + self.height <= height && self.left + self.width <= width
    }
}

fn crop_into(src: &[f64], shape: &[usize], r: Rect, out: &mut [f64], reverse: bool) {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    for ch in 0..c {
        for i in 0..r.height {
            let s = (ch * h + r.top + i) * w + r.left;
            let d = (ch * r.height + i) * r.width;
            if reverse {
                // `src` is the cropped gradient, `out` the full-size buffer.
                for j in 0..r.width {
                    out[s + j] += src[d + j];
                }
            } else {
                out[d..d + r.width].copy_from_slice(&src[s..s + r.width]);
            }
        }
    }
}

impl Tape {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(x)),
            ));
        }
        let v = Tensor::from_parts(shape.to_vec(), self.value(x).data().to_vec());
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = axes.len() == shape.len()
            && axes
                .iter()
                .all(|&a| a < shape.len() && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(Error::dim(
                "permute",
                format!("{axes:?} is not a permutation of the axes of {shape:?}"),
            ));
        }
        let mut out = vec![0.0; self.value(x).numel()];
        permute_into(self.value(x).data(), &shape, axes, &mut out, false);
        let v = Tensor::from_parts(permuted_shape(&shape, axes), out);
        Ok(self.push(v, Op::Permute { x, axes: axes.to_vec() }, &[x]))
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(
                    "concat",
                    format!("{s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let v = Tensor::from_parts(shape, out);
        Ok(self.push(
            v,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Nearest-neighbour upsampling of `[C,H,W]` by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || factor == 0 {
            return Err(Error::dim(
                "upsample_nearest",
                format!("need [C,H,W] and factor >= 1, got {s:?}"),
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for i in 0..oh {
                let src = &xv[(ch * h + i / factor) * w..(ch * h + i / factor + 1) * w];
                let dst = &mut out[(ch * oh + i) * ow..(ch * oh + i + 1) * ow];
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = src[j / factor];
                }
            }
        }
        let v = Tensor::from_parts(vec![c, oh, ow], out);
        Ok(self.push(v, Op::Upsample { x, factor }, &[x]))
    }

    /// Spatial crop of `[C,H,W]`.
    pub fn crop(&mut self, x: Var, rect: Rect) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || rect.area() == 0 || !rect.fits(s[1], s[2]) {
            return Err(Error::dim("crop", format!("{rect:?} does not fit inside {s:?}")));
        }
        let mut out = vec![0.0; s[0] * rect.area()];
        crop_into(self.value(x).data(), &s, rect, &mut out, false);
        let v = Tensor::from_parts(vec![s[0], rect.height, rect.width], out);
        Ok(self.push(v, Op::Crop { x, rect }, &[x]))
    }
}

pub(super) fn backward(tape: &Tape, op: &Op, gout: &[f64], grads: &mut Grads<'_>) {
    match op {
        &Op::Reshape(x) => grads.acc_slice(x, gout),
        Op::Permute { x, axes } => {
            let out_shape = permuted_shape(tape.shape(*x), axes);
            let inv = inverse_permutation(axes);
            grads.acc(*x, |dx| permute_into(gout, &out_shape, &inv, dx, true));
        }
        Op::Concat { inputs, axis } => {
            let base = tape.shape(inputs[0]);
            let outer: usize = base[..*axis].iter().product();
            let inner: usize = base[axis + 1..].iter().product();
            let total: usize = inputs.iter().map(|&v| tape.shape(v)[*axis]).sum();
            let mut offset = 0;
            for &v in inputs {
                let chunk = tape.shape(v)[*axis] * inner;
                grads.acc(v, |dv| {
                    for o in 0..outer {
                        let src = &gout[o * total * inner + offset..o * total * inner + offset + chunk];
                        for (d, g) in dv[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                            *d += g;
                        }
                    }
                });
                offset += chunk;
            }
        }
        &Op::Upsample { x, factor } => {
            let s = tape.shape(x);
            let (c, h, w) = (s[0], s[1], s[2]);
            let (oh, ow) = (h * factor, w * factor);
            grads.acc(x, |dx| {
                for ch in 0..c {
                    for i in 0..oh {
                        let g = &gout[(ch * oh + i) * ow..(ch * oh + i + 1) * ow];
                        let d = &mut dx[(ch * h + i / factor) * w..(ch * h + i / factor + 1) * w];
                        for (j, gv) in g.iter().enumerate() {
                            d[j / factor] += gv;
                        }
                    }
                }
            });
        }
        &Op::Crop { x, rect } => {
            let s = tape.shape(x).to_vec();
            grads.acc(x, |dx| crop_into(gout, &s, rect, dx, true));
        }
        _ => unreachable!("not a layout op"),
    }
}
