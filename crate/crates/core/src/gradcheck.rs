//! Central-difference gradient checking against tape gradients.
//!
//! Relative error per element is `|a - n| / max(|a|, |n|, 1e-8)` where `a` is
//! the tape gradient and `n` the central difference. Functions must be smooth
//! at the probe point: inputs of relu-style ops should sit at least `1e-3`
//! away from the kink.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Worst element found by a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Checks the gradient of a scalar function of several inputs at the given
/// `(input, element)` probes. An empty probe list checks every element.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], probes: &[(usize, usize)], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    drop(tape);

    let all: Vec<(usize, usize)>;
    let probes = if probes.is_empty() {
        all = inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
            .collect();
        &all
    } else {
        probes
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        input: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut work = inputs.to_vec();
    for &(i, j) in probes {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + h;
        let plus = eval(&f, &work)?;
        work[i].data_mut()[j] = orig - h;
        let minus = eval(&f, &work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[i][j];
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || err.is_nan() {
            report = GradCheckReport {
                max_rel_error: err,
                input: i,
                index: j,
                analytic: a,
                numeric,
            };
        }
    }
    Ok(report)
}

/// Maximum relative error between the tape gradient of `f` at `x` and its
/// central-difference estimate with step `h`, over every element of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_gradients(|t, v| f(t, v[0]), std::slice::from_ref(x), &[], h).map(|r| r.max_rel_error)
}
