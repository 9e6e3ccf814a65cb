//! The enhancement network: local and global branches stacked along the
//! channel axis, a small convolutional fusion head, and a sigmoid RGB output.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{global_branch, local_branch, GlobalBranchWeights, LocalBranchWeights};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Conv, Init, ParamStore};
use crate::tensor::Tensor;
use crate::window::PATCH_SIZE;

pub const FUSION_SLOPE: f64 = 0.2;

/// Which branches feed the fusion head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Variant {
    #[default]
    Full,
    LocalOnly,
    GlobalOnly,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::LocalOnly, Variant::GlobalOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::LocalOnly => "local-only",
            Variant::GlobalOnly => "global-only",
        }
    }

    pub fn has_local(self) -> bool {
        self != Variant::GlobalOnly
    }

    pub fn has_global(self) -> bool {
        self != Variant::LocalOnly
    }

    pub fn code(self) -> u32 {
        match self {
            Variant::Full => 0,
            Variant::LocalOnly => 1,
            Variant::GlobalOnly => 2,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.code() == code)
            .ok_or_else(|| Error::Config(format!("unknown generator variant code {code}")))
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown generator variant `{s}` (expected full, local-only or global-only)"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub local_dim: usize,
    pub global_embed_dim: usize,
    pub global_out_dim: usize,
    pub local_heads: usize,
    pub global_heads: usize,
    pub num_local_layers: usize,
    pub train_height: usize,
    pub train_width: usize,
    pub fusion_channels: usize,
    pub variant: Variant,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            local_dim: 16,
            global_embed_dim: 16,
            global_out_dim: 16,
            local_heads: 2,
            global_heads: 4,
            num_local_layers: 3,
            train_height: 64,
            train_width: 64,
            fusion_channels: 32,
            variant: Variant::Full,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let dims = [
            ("local_dim", self.local_dim),
            ("global_embed_dim", self.global_embed_dim),
            ("global_out_dim", self.global_out_dim),
            ("fusion_channels", self.fusion_channels),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return fail(format!("{name} must be positive"));
        }
        if self.num_local_layers == 0 {
            return fail("num_local_layers must be at least 1".into());
        }
        if self.num_local_layers > 16 {
            return fail(format!(
                "num_local_layers {} is unreasonably deep",
                self.num_local_layers
            ));
        }
        if self.local_heads == 0 || self.local_dim % self.local_heads != 0 {
            return fail(format!(
                "local_heads {} must divide local_dim {}",
                self.local_heads, self.local_dim
            ));
        }
        if self.global_heads == 0 || self.global_embed_dim % self.global_heads != 0 {
            return fail(format!(
                "global_heads {} must divide global_embed_dim {}",
                self.global_heads, self.global_embed_dim
            ));
        }
        let (h, w) = (self.train_height, self.train_width);
        if h == 0 || w == 0 || h % PATCH_SIZE != 0 || w % PATCH_SIZE != 0 {
            return fail(format!(
                "training resolution {h}x{w} must be a positive multiple of {PATCH_SIZE}"
            ));
        }
        let largest = 1usize << self.num_local_layers;
        if self.variant.has_local() && (h % largest != 0 || w % largest != 0) {
            return fail(format!(
                "training resolution {h}x{w} is not divisible by the largest window {largest}"
            ));
        }
        Ok(())
    }

    /// Layer window sizes of the local branch.
    pub fn window_sizes(&self) -> Vec<usize> {
        (1..=self.num_local_layers).map(|l| 1 << l).collect()
    }

    fn fusion_inputs(&self) -> usize {
        match self.variant {
            Variant::Full => self.local_dim + self.global_out_dim,
            Variant::LocalOnly => self.local_dim,
            Variant::GlobalOnly => self.global_out_dim,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorWeights {
    pub store: ParamStore,
    pub local: Option<LocalBranchWeights>,
    pub global: Option<GlobalBranchWeights>,
    pub fusion: [Conv; 3],
}

#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    weights: GeneratorWeights,
}

/// Anything that maps a `[3,H,W]` image in `[0,1]` to an enhanced image.
pub trait Enhancer {
    fn enhance(&self, x: &Tensor) -> Result<Tensor>;
}

impl<F> Enhancer for F
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    fn enhance(&self, x: &Tensor) -> Result<Tensor> {
        self(x)
    }
}

impl Generator {
    /// Deterministically initializes all weights from `seed`: fan-in uniform
    /// linear and convolution weights, zero biases, unit layer-norm gains and
    /// an N(0, 0.02²) positional table.
    pub fn init(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let c = &config;
        let local = c
            .variant
            .has_local()
            .then(|| LocalBranchWeights::new(&mut init, c.local_dim, c.local_heads, c.num_local_layers))
            .transpose()?;
        let global = c
            .variant
            .has_global()
            .then(|| {
                GlobalBranchWeights::new(
                    &mut init,
                    c.global_embed_dim,
                    c.global_out_dim,
                    c.global_heads,
                    c.train_height,
                    c.train_width,
                )
            })
            .transpose()?;
        let f = c.fusion_channels;
        let fusion = [
            Conv::new(&mut init, "fusion.conv0", c.fusion_inputs(), f, 3, 1, 1),
            Conv::new(&mut init, "fusion.conv1", f, f, 3, 1, 1),
            Conv::new(&mut init, "fusion.out", f, 3, 1, 1, 0),
        ];
        Ok(Self {
            config,
            weights: GeneratorWeights {
                store,
                local,
                global,
                fusion,
            },
        })
    }

    /// A freshly initialized generator of the given ablation kind.
    pub fn ablation_variant(kind: Variant, config: &GeneratorConfig, seed: u64) -> Result<Self> {
        Self::init(
            GeneratorConfig {
                variant: kind,
                ..config.clone()
            },
            seed,
        )
    }

    /// Rebuilds a generator around previously trained parameters.
    pub fn from_params(config: GeneratorConfig, params: &ParamStore) -> Result<Self> {
        let mut g = Self::init(config, 0)?;
        g.weights.store.load_from(params)?;
        Ok(g)
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn weights(&self) -> &GeneratorWeights {
        &self.weights
    }

    pub fn params(&self) -> &ParamStore {
        &self.weights.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.weights.store
    }

    pub fn num_params(&self) -> usize {
        self.weights.store.num_scalars()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        self.weights.store.bind(tape, trainable)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let want = [3, self.config.train_height, self.config.train_width];
        if x.shape() != want {
            return Err(Error::Config(format!(
                "generator input {:?} does not match configured resolution {want:?}",
                x.shape()
            )));
        }
        if !x.is_finite() {
            return Err(Error::Contract("generator input contains non-finite values".into()));
        }
        Ok(())
    }

    /// `[3,H,W] → [3,H,W]` with outputs in `(0,1)`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        self.check_input(tape.value(x))?;
        let w = &self.weights;
        let mut feats = Vec::with_capacity(2);
        if let Some(local) = &w.local {
            feats.push(local_branch(tape, p, local, x)?);
        }
        if let Some(global) = &w.global {
            feats.push(global_branch(tape, p, global, x)?);
        }
        let mut h = if feats.len() == 1 {
            feats[0]
        } else {
            tape.concat(&feats, 0)?
        };
        for conv in &w.fusion[..2] {
            h = conv.forward(tape, p, h)?;
            h = tape.leaky_relu(h, FUSION_SLOPE);
        }
        let h = w.fusion[2].forward(tape, p, h)?;
        Ok(tape.sigmoid(h))
    }
}

impl Enhancer for Generator {
    fn enhance(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &p, xv)?;
        Ok(tape.value(y).clone())
    }
}
