//! Softmax and layer normalization.

use super::{Grads, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

impl Tape {
    /// Softmax along `axis`, max-subtracted so large logits cannot overflow.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = outer_inner(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| xv[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (xv[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let v = Tensor::from_parts(shape, out);
        Ok(self.push(v, Op::Softmax { x, axis }, &[x]))
    }

    /// Normalizes over the last axis to zero mean and unit (biased) variance,
    /// then applies `gamma · x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::dim("layer_norm", "scalar input"))?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(p) != [d] {
                return Err(Error::dim(
                    "layer_norm",
                    format!("{name} shape {:?} does not match normalized axis {d}", self.shape(p)),
                ));
            }
        }
        let rows = self.value(x).numel() / d;
        let (xv, gv, bv) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = gv[j] * h + bv[j];
            }
        }
        let v = Tensor::from_parts(shape, out);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }
}

pub(super) fn backward(tape: &Tape, op: &Op, out: &Tensor, gout: &[f64], grads: &mut Grads<'_>) {
    match op {
        &Op::Softmax { x, axis } => {
            let (outer, len, inner) = outer_inner(out.shape(), axis);
            let y = out.data();
            grads.acc(x, |dx| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| gout[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            dx[at(j)] += y[at(j)] * (gout[at(j)] - dot);
                        }
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = tape.value(*gamma).numel();
            let rows = rstd.len();
            let gv = tape.value(*gamma).data();
            grads.acc(*gamma, |dg| {
                for r in 0..rows {
                    for j in 0..d {
                        dg[j] += gout[r * d + j] * xhat[r * d + j];
                    }
                }
            });
            grads.acc(*beta, |db| {
                for r in 0..rows {
                    for j in 0..d {
                        db[j] += gout[r * d + j];
                    }
                }
            });
            grads.acc(*x, |dx| {
                let n = d as f64;
                for r in 0..rows {
                    let base = r * d;
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for j in 0..d {
                        let gh = gout[base + j] * gv[j];
                        sum_g += gh;
                        sum_gx += gh * xhat[base + j];
                    }
                    for j in 0..d {
                        let gh = gout[base + j] * gv[j];
                        dx[base + j] += rstd[r] * (gh - sum_g / n - xhat[base + j] * sum_gx / n);
                    }
                }
            });
        }
        _ => unreachable!("not a normalization op"),
    }
}
