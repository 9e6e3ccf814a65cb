//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation executed on it as a node holding the
//! output value and a backward rule. [`Var`] is a lightweight handle to a
//! node. Calling [`Tape::backward`] on a scalar node propagates adjoints in
//! reverse recording order and accumulates them into the gradient buffer of
//! every leaf created with `requires_grad`. Gradients accumulate across
//! repeated `backward` calls until [`Tape::zero_grad`] is called.
//!
//! Nodes whose inputs do not require gradients keep their value but drop the
//! backward rule, so constant sub-graphs cost nothing during backward.

pub(crate) mod elementwise;
mod linalg;
mod norm;
mod shape;

use std::fmt;

use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::tensor::Tensor;

pub use shape::Rect;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-supplied operation: given the input values, the
/// output value and the upstream gradient, return one gradient per input.
pub type CustomBackward = Box<dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Vec<f64>>>;

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Gelu {
        x: Var,
        deriv: Vec<f64>,
    },
    LogSigmoid(Var),
    Sum(Var),
    Mean(Var),
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatmul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        c_out: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        /// Geometry of the equivalent forward convolution over the output.
        geom: ConvGeom,
        c_in: usize,
    },
    AddBias {
        x: Var,
        b: Var,
        axis: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// Per-row normalized input and reciprocal std, saved for backward.
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Crop {
        x: Var,
        rect: Rect,
    },
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    grad: Option<Vec<f64>>,
}

/// Records differentiable operations. Confined to one thread; independent
/// tapes share nothing and may run concurrently.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

/// Adjoint buffers used during a single backward sweep.
pub(crate) struct Grads<'t> {
    tape: &'t Tape,
    bufs: Vec<Option<Vec<f64>>>,
}

impl Grads<'_> {
    fn wants(&self, v: Var) -> bool {
        self.tape.nodes[v.0].requires_grad
    }

    /// Hands the adjoint buffer of `v` to `f` for in-place accumulation, if
    /// `v` participates in differentiation.
    pub(crate) fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.wants(v) {
            return;
        }
        let n = self.tape.nodes[v.0].value.numel();
        let buf = self.bufs[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(buf);
    }

    pub(crate) fn acc_slice(&mut self, v: Var, g: &[f64]) {
        if !self.wants(v) {
            return;
        }
        let slot = &mut self.bufs[v.0];
        if slot.is_none() {
            *slot = Some(g.to_vec());
            return;
        }
        self.acc(v, |buf| {
            for (b, x) in buf.iter_mut().zip(g) {
                *b += x;
            }
        });
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. Leaves with `requires_grad` receive gradients on backward.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies the value of `x` into a new constant leaf; gradients stop here.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an operation whose forward result was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, backward: CustomBackward) -> Var {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            inputs,
        )
    }

    /// Propagates `∂loss/∂·` to every `requires_grad` leaf, adding into any
    /// gradient already accumulated there.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_scaled(loss, 1.0)
    }

    /// Like [`backward`](Self::backward) with the seed adjoint set to `seed`
    /// instead of 1, i.e. the gradients of `seed · loss`.
    pub fn backward_scaled(&mut self, loss: Var, seed: f64) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads = Grads {
            tape: self,
            bufs: (0..=loss.0).map(|_| None).collect(),
        };
        grads.bufs[loss.0] = Some(vec![seed]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads.bufs[i].take() else {
                continue;
            };
            self.backward_node(i, &gout, &mut grads);
        }
        let bufs = grads.bufs;
        for (node, buf) in self.nodes.iter_mut().zip(bufs) {
            if let (Op::Leaf, Some(g)) = (&node.op, buf) {
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, gout: &[f64], grads: &mut Grads<'_>) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(..)
            | Op::Sub(..)
            | Op::Mul(..)
            | Op::Scale(..)
            | Op::AddScalar(_)
            | Op::Relu(_)
            | Op::LeakyRelu(..)
            | Op::Sigmoid(_)
            | Op::Exp(_)
            | Op::Log(_)
            | Op::Square(_)
            | Op::Sqrt(_)
            | Op::Gelu { .. }
            | Op::LogSigmoid(_)
            | Op::Sum(_)
            | Op::Mean(_) => elementwise::backward(self, &node.op, out, gout, grads),
            Op::Matmul { .. }
            | Op::BatchMatmul { .. }
            | Op::Conv2d { .. }
            | Op::ConvTranspose2d { .. }
            | Op::AddBias { .. } => linalg::backward(self, &node.op, gout, grads),
            Op::Softmax { .. } | Op::LayerNorm { .. } => norm::backward(self, &node.op, out, gout, grads),
            Op::Reshape(_) | Op::Permute { .. } | Op::Concat { .. } | Op::Upsample { .. } | Op::Crop { .. } => {
                shape::backward(self, &node.op, gout, grads)
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let gin = backward(&values, out, gout);
                for (&v, g) in inputs.iter().zip(&gin) {
                    grads.acc_slice(v, g);
                }
            }
        }
    }

    pub(crate) fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("operand shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }
}
