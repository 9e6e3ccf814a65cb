//! Whole-image and random-patch discriminators.
//!
//! Both share one architecture: three stride-2 3×3 convolutions
//! (3→16→32→64) with leaky ReLU, global average pooling and a linear layer
//! to a single logit. Pooling makes the stack size-agnostic, so the local
//! instance scores patches with the same code path.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Rect, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Conv, Init, Linear, ParamStore};
use crate::tensor::Tensor;

pub const DISC_CHANNELS: [usize; 3] = [16, 32, 64];
pub const DISC_SLOPE: f64 = 0.2;
pub const DEFAULT_LOCAL_PATCHES: usize = 4;

#[derive(Debug, Clone)]
pub struct Discriminator {
    store: ParamStore,
    convs: Vec<Conv>,
    head: Linear,
}

impl Discriminator {
    pub fn init(seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let mut c_in = 3;
        let convs = DISC_CHANNELS
            .iter()
            .enumerate()
            .map(|(i, &c_out)| {
                let conv = Conv::new(&mut init, &format!("conv{i}"), c_in, c_out, 3, 2, 1);
                c_in = c_out;
                conv
            })
            .collect();
        let head = Linear::new(&mut init, "head", c_in, 1);
        Self { store, convs, head }
    }

    /// Rebuilds a discriminator around stored parameters.
    pub fn from_params(params: &ParamStore) -> Result<Self> {
        let mut d = Self::init(0);
        d.store.load_from(params)?;
        Ok(d)
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        self.store.bind(tape, trainable)
    }

    /// Scalar logit for a `[3,H,W]` image or patch.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        match tape.shape(x) {
            [3, h, w] if *h > 0 && *w > 0 => {}
            s => {
                return Err(Error::Config(format!(
                    "discriminator expects a [3,H,W] image, got {s:?}"
                )))
            }
        }
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(tape, p, h)?;
            h = tape.leaky_relu(h, DISC_SLOPE);
        }
        let [c, hh, ww] = tape.shape(h)[..] else {
            unreachable!("convolutions preserve rank")
        };
        // Global average pool as a matmul against a constant averaging column.
        let flat = tape.reshape(h, &[c, hh * ww])?;
        let avg = tape.constant(Tensor::full([hh * ww, 1], 1.0 / (hh * ww) as f64));
        let pooled = tape.matmul(flat, avg)?;
        let pooled = tape.reshape(pooled, &[1, c])?;
        let logit = self.head.forward(tape, p, pooled)?;
        tape.reshape(logit, &[])
    }

    /// Logit of a standalone image, without gradient tracking.
    pub fn score(&self, x: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &p, xv)?;
        Ok(tape.value(y).item())
    }
}

/// Patch geometry of the local discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    /// Side length; `None` means a quarter of the image height.
    pub size: Option<usize>,
    pub count: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            size: None,
            count: DEFAULT_LOCAL_PATCHES,
        }
    }
}

impl PatchSpec {
    pub fn side(&self, height: usize) -> usize {
        self.size.unwrap_or((height / 4).max(1))
    }
}

/// Square patches with offsets drawn uniformly from `[0, H−p] × [0, W−p]`.
pub fn sample_patches(rng: &mut impl Rng, height: usize, width: usize, spec: &PatchSpec) -> Result<Vec<Rect>> {
    let p = spec.side(height);
    if p == 0 || p > height || p > width {
        return Err(Error::Config(format!(
            "local patch size {p} does not fit a {height}x{width} image"
        )));
    }
    if spec.count == 0 {
        return Err(Error::Config("local discriminator needs at least one patch".into()));
    }
    Ok((0..spec.count)
        .map(|_| {
            let top = rng.random_range(0..=height - p);
            let left = rng.random_range(0..=width - p);
            Rect::new(top, left, p, p)
        })
        .collect())
}

/// Whole-image logit.
pub fn discriminate_global(d: &Discriminator, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
    d.forward(tape, p, x)
}

/// One logit per patch, stacked into a `[n_patches]` vector.
pub fn discriminate_local(d: &Discriminator, tape: &mut Tape, p: &Bound, x: Var, patches: &[Rect]) -> Result<Var> {
    let logits = patches
        .iter()
        .map(|&r| {
            let crop = tape.crop(x, r)?;
            let l = d.forward(tape, p, crop)?;
            tape.reshape(l, &[1])
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat(&logits, 0)
}
