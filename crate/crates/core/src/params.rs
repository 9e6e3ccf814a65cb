//! Named parameter storage and the small layers built on it.
//!
//! Model structs hold [`ParamId`] handles; the tensors themselves live in a
//! [`ParamStore`]. Before a forward pass the store is bound onto a tape,
//! producing a [`Bound`] table that maps each id to its tape variable.

use std::ops::Index;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect())
    }

    /// Replaces all values with those of `other`, which must have identical
    /// names and shapes in the same order.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.names != self.names {
            let missing = self
                .names
                .iter()
                .find(|n| !other.names.contains(n))
                .cloned()
                .unwrap_or_else(|| "<ordering>".into());
            return Err(Error::Config(format!("parameter set mismatch at `{missing}`")));
        }
        for ((name, mine), theirs) in self.names.iter().zip(&self.tensors).zip(&other.tensors) {
            if mine.shape() != theirs.shape() {
                return Err(Error::Config(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    theirs.shape(),
                    mine.shape()
                )));
            }
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Tape variables for every parameter of a store, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps variables listed in parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Collects the accumulated gradients of every bound parameter, zero-filled
    /// where backward did not reach.
    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.0
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .map_or_else(|| vec![0.0; tape.value(v).numel()], <[f64]>::to_vec)
            })
            .collect()
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Seeded parameter initializer.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in_uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.uniform(name, shape, bound)
    }

    pub fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> ParamId {
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| dist.sample(rng));
        self.store.add(name, t)
    }

    pub fn normal(&mut self, name: String, shape: &[usize], sigma: f64) -> ParamId {
        let dist = Normal::new(0.0, sigma).expect("positive sigma");
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| dist.sample(rng));
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn ones(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::ones(shape.to_vec()))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }
}

/// Fully connected layer `x·W + b` over rows of `[N, in]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(init: &mut Init<'_>, name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            w: init.fan_in_uniform(format!("{name}.w"), &[d_in, d_out], d_in),
            b: init.zeros(format!("{name}.b"), &[d_out]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.w])?;
        tape.add_bias(y, p[self.b], 1)
    }
}

/// 2-D convolution with per-channel bias.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(
        init: &mut Init<'_>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self {
            w: init.fan_in_uniform(format!("{name}.w"), &[c_out, c_in, k, k], c_in * k * k),
            b: init.zeros(format!("{name}.b"), &[c_out]),
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, p[self.w], self.stride, self.pad)?;
        tape.add_bias(y, p[self.b], 0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNormParams {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Self {
        Self {
            gamma: init.ones(format!("{name}.gamma"), &[dim]),
            beta: init.zeros(format!("{name}.beta"), &[dim]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gamma], p[self.beta], LAYER_NORM_EPS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn bind_and_collect_grads() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let lin = Linear::new(&mut init, "fc", 3, 2);
        assert_eq!(store.num_scalars(), 8);
        assert_eq!(store.name(lin.b), "fc.b");

        let mut tape = Tape::new();
        let p = store.bind(&mut tape, true);
        let x = tape.constant(Tensor::ones([4, 3]));
        let y = lin.forward(&mut tape, &p, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        let g = p.grads(&tape);
        assert_eq!(g[lin.b.index()], vec![4.0, 4.0]);
        assert_eq!(g[lin.w.index()], vec![4.0; 6]);
    }

    #[test]
    fn load_from_checks_layout() {
        let mut a = ParamStore::new();
        a.add("x", Tensor::zeros([2]));
        let mut b = ParamStore::new();
        b.add("x", Tensor::ones([3]));
        assert!(a.load_from(&b).is_err());
        let mut c = ParamStore::new();
        c.add("x", Tensor::ones([2]));
        a.load_from(&c).unwrap();
        assert_eq!(a.tensors()[0].data(), &[1.0, 1.0]);
    }
}
