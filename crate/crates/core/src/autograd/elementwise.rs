//! Pointwise arithmetic, activations and full reductions.

use super::{Grads, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn unary(tape: &Tape, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
    tape.value(x).map(f)
}

fn binary(tape: &Tape, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (va, vb) = (tape.value(a), tape.value(b));
    let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(va.shape().to_vec(), data)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)` without overflow for large `|x|`.
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Tanh-approximated GELU and its derivative, sharing one `tanh`.
fn gelu_with_grad(x: f64) -> (f64, f64) {
    // tanh(u) as 1 − 2/(1 + e^{2u}); noticeably cheaper than libm tanh and
    // exact at both saturated ends.
    let t = 1.0 - 2.0 / (1.0 + (2.0 * GELU_C * (x + 0.044715 * x * x * x)).exp());
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    (0.5 * x * (1.0 + t), 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let v = binary(self, a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let v = binary(self, a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let v = binary(self, a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = unary(self, x, |a| a * s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let v = unary(self, x, |a| a + s);
        self.push(v, Op::AddScalar(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = unary(self, x, |a| a.max(0.0));
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = unary(self, x, |a| if a > 0.0 { a } else { slope * a });
        self.push(v, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = unary(self, x, sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = unary(self, x, f64::exp);
        self.push(v, Op::Exp(x), &[x])
    }

    /// Natural logarithm; every entry must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&a| !(a > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive entry {bad}"),
            });
        }
        let v = unary(self, x, f64::ln);
        Ok(self.push(v, Op::Log(x), &[x]))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = unary(self, x, |a| a * a);
        self.push(v, Op::Square(x), &[x])
    }

    /// Square root of non-negative entries. The derivative at exactly zero is
    /// taken as zero so that norms of identical operands stay differentiable.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|&&a| !(a >= 0.0)) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative entry {bad}"),
            });
        }
        let v = unary(self, x, f64::sqrt);
        Ok(self.push(v, Op::Sqrt(x), &[x]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let input = self.value(x);
        if !self.requires_grad(x) {
            let v = input.map(|a| gelu_with_grad(a).0);
            return self.push(v, Op::Leaf, &[x]);
        }
        let (v, d): (Vec<f64>, Vec<f64>) = input.data().iter().map(|&a| gelu_with_grad(a)).unzip();
        let v = Tensor::from_parts(input.shape().to_vec(), v);
        self.push(v, Op::Gelu { x, deriv: d }, &[x])
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let v = unary(self, x, log_sigmoid);
        self.push(v, Op::LogSigmoid(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }
}

fn pointwise(grads: &mut Grads<'_>, x: Var, input: &[f64], gout: &[f64], d: impl Fn(f64) -> f64) {
    grads.acc(x, |buf| {
        for ((b, &xi), g) in buf.iter_mut().zip(input).zip(gout) {
            *b += g * d(xi);
        }
    });
}

fn pointwise_out(grads: &mut Grads<'_>, x: Var, out: &[f64], gout: &[f64], d: impl Fn(f64) -> f64) {
    pointwise(grads, x, out, gout, d)
}

pub(super) fn backward(tape: &Tape, op: &Op, out: &Tensor, gout: &[f64], grads: &mut Grads<'_>) {
    match *op {
        Op::Add(a, b) => {
            grads.acc_slice(a, gout);
            grads.acc_slice(b, gout);
        }
        Op::Sub(a, b) => {
            grads.acc_slice(a, gout);
            grads.acc(b, |buf| buf.iter_mut().zip(gout).for_each(|(x, g)| *x -= g));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (tape.value(a).data(), tape.value(b).data());
            grads.acc(a, |buf| {
                for ((x, y), g) in buf.iter_mut().zip(vb).zip(gout) {
                    *x += g * y;
                }
            });
            grads.acc(b, |buf| {
                for ((x, y), g) in buf.iter_mut().zip(va).zip(gout) {
                    *x += g * y;
                }
            });
        }
        Op::Scale(x, s) => grads.acc(x, |buf| buf.iter_mut().zip(gout).for_each(|(b, g)| *b += s * g)),
        Op::AddScalar(x) => grads.acc_slice(x, gout),
        Op::Relu(x) => pointwise(
            grads,
            x,
            tape.value(x).data(),
            gout,
            |a| if a > 0.0 { 1.0 } else { 0.0 },
        ),
        Op::LeakyRelu(x, slope) => pointwise(
            grads,
            x,
            tape.value(x).data(),
            gout,
            |a| if a > 0.0 { 1.0 } else { slope },
        ),
        Op::Sigmoid(x) => pointwise_out(grads, x, out.data(), gout, |s| s * (1.0 - s)),
        Op::Exp(x) => pointwise_out(grads, x, out.data(), gout, |e| e),
        Op::Log(x) => pointwise(grads, x, tape.value(x).data(), gout, |a| 1.0 / a),
        Op::Square(x) => pointwise(grads, x, tape.value(x).data(), gout, |a| 2.0 * a),
        Op::Sqrt(x) => pointwise_out(grads, x, out.data(), gout, |r| if r > 0.0 { 0.5 / r } else { 0.0 }),
        Op::Gelu { x, ref deriv } => grads.acc(x, |buf| {
            for ((b, d), g) in buf.iter_mut().zip(deriv).zip(gout) {
                *b += g * d;
            }
        }),
        Op::LogSigmoid(x) => pointwise(grads, x, tape.value(x).data(), gout, |a| sigmoid(-a)),
        Op::Sum(x) => {
            let g = gout[0];
            grads.acc(x, |buf| buf.iter_mut().for_each(|b| *b += g));
        }
        Op::Mean(x) => {
            let g = gout[0] / tape.value(x).numel() as f64;
            grads.acc(x, |buf| buf.iter_mut().for_each(|b| *b += g));
        }
        _ => unreachable!("not an elementwise op"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_values() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new([3], vec![-2.0, 0.0, 3.0]).unwrap());
        let r = t.relu(x);
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 3.0]);
        let s = t.sigmoid(x);
        assert_eq!(t.value(s).data()[1], 0.5);
        let l = t.leaky_relu(x, 0.2);
        assert!((t.value(l).data()[0] + 0.4).abs() < 1e-15);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new([2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(t.log(x), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn binary_shape_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros([2, 3]));
        let b = t.constant(Tensor::zeros([3, 2]));
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
    }
}
