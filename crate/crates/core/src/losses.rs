//! Training objectives.
//!
//! Tape-level functions return scalar [`Var`]s ready for backward. The pure
//! helpers at the bottom ([`adversarial_losses`], [`total_generator_loss`])
//! work on plain numbers for logging and tests.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::autograd::elementwise::log_sigmoid;
use crate::autograd::{Rect, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Seed of the frozen feature extractor: the bytes of "MSATR".
pub const FEATURE_SEED: u64 = 0x4D_53_41_54_52;
pub const FEATURE_CHANNELS: [usize; 3] = [8, 16, 32];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub adv_global: f64,
    pub adv_local: f64,
    pub sfp: f64,
    pub identity: f64,
    pub luminance: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            adv_global: 1.0,
            adv_local: 1.0,
            sfp: 1.0,
            identity: 0.5,
            luminance: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.named() {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} = {w} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("adv_global", self.adv_global),
            ("adv_local", self.adv_local),
            ("sfp", self.sfp),
            ("identity", self.identity),
            ("luminance", self.luminance),
        ]
    }
}

/// Switches between the default loss readings and literal alternatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LossForms {
    /// Divide the luminance term by the mixing coefficient as well.
    pub alpha_weighted_luminance: bool,
    /// Generator minimizes `−log(1 − σ(fake))` instead of `−log σ(fake)`.
    pub printed_generator_adversarial: bool,
    /// Identity term as an RMS distance instead of a mean square.
    pub plain_l2_identity: bool,
}

/// Frozen random-weight convolution pyramid used as a perceptual feature map.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    weights: Vec<Tensor>,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl FeatureExtractor {
    pub const STRIDE: usize = 2;

    /// Weights uniform in `±sqrt(6 / fan_in)`, drawn from [`FEATURE_SEED`].
    pub fn new() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(FEATURE_SEED);
        let mut c_in = 3;
        let weights = FEATURE_CHANNELS
            .iter()
            .map(|&c_out| {
                let fan_in = c_in * 9;
                let bound = (6.0 / fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                let w = Tensor::from_fn([c_out, c_in, 3, 3], |_| dist.sample(&mut rng));
                c_in = c_out;
                w
            })
            .collect();
        Self { weights }
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    /// Feature maps after each of the three relu layers.
    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.weights.len());
        for w in &self.weights {
            let wv = tape.constant(w.clone());
            h = tape.conv2d(h, wv, Self::STRIDE, 1)?;
            h = tape.relu(h);
            out.push(h);
        }
        Ok(out)
    }
}

/// Region-restricted mean square between the second-pass image `i` and the
/// first-pass target `k`, normalized by `m·n·C`. With `alpha` set the result
/// is further divided by the mixing coefficient.
pub fn luminance_consistency_loss(tape: &mut Tape, i: Var, k: Var, region: Rect, alpha: Option<f64>) -> Result<Var> {
    tape.check_same_shape("luminance_consistency_loss", i, k)?;
    if region.area() == 0 {
        return Err(Error::Contract("luminance consistency region is empty".into()));
    }
    let ci = tape.crop(i, region)?;
    let ck = tape.crop(k, region)?;
    let d = tape.sub(ci, ck)?;
    let sq = tape.square(d);
    let m = tape.mean(sq);
    match alpha {
        None => Ok(m),
        Some(a) if a > 0.0 && a.is_finite() => Ok(tape.scale(m, 1.0 / a)),
        Some(a) => Err(Error::Domain {
            op: "luminance_consistency_loss",
            detail: format!("mixing coefficient {a} must be positive"),
        }),
    }
}

/// `−mean log σ(real) − mean log σ(−fake)` over vectors (or scalars) of logits.
pub fn discriminator_loss(tape: &mut Tape, real: Var, fake: Var) -> Var {
    let lr = tape.log_sigmoid(real);
    let lr = tape.mean(lr);
    let nf = tape.scale(fake, -1.0);
    let lf = tape.log_sigmoid(nf);
    let lf = tape.mean(lf);
    let s = tape.add(lr, lf).expect("scalar operands");
    tape.scale(s, -1.0)
}

/// Generator side of the adversarial game over a vector (or scalar) of fake
/// logits, averaged: `−log σ(f)`, or `−log(1 − σ(f)) = −log σ(−f)` in the
/// printed form.
pub fn generator_adversarial_loss(tape: &mut Tape, fake: Var, printed_form: bool) -> Var {
    let arg = if printed_form { tape.scale(fake, -1.0) } else { fake };
    let l = tape.log_sigmoid(arg);
    let l = tape.mean(l);
    tape.scale(l, -1.0)
}

/// Mean over the extractor layers of the RMS feature difference.
pub fn self_feature_preserving_loss(tape: &mut Tape, fe: &FeatureExtractor, x_low: Var, x_enh: Var) -> Result<Var> {
    tape.check_same_shape("self_feature_preserving_loss", x_low, x_enh)?;
    let fl = fe.features(tape, x_low)?;
    let fh = fe.features(tape, x_enh)?;
    let mut acc: Option<Var> = None;
    for (a, b) in fl.into_iter().zip(fh) {
        let d = tape.sub(b, a)?;
        let sq = tape.square(d);
        let m = tape.mean(sq);
        let rms = tape.sqrt(m)?;
        acc = Some(match acc {
            None => rms,
            Some(s) => tape.add(s, rms)?,
        });
    }
    let total = acc.expect("extractor has layers");
    Ok(tape.scale(total, 1.0 / FEATURE_CHANNELS.len() as f64))
}

/// Mean square distance between `G(x_r)` and `x_r`, or its square root when
/// `plain_l2` is set.
pub fn identity_invariant_loss(tape: &mut Tape, x_r: Var, g_out: Var, plain_l2: bool) -> Result<Var> {
    tape.check_same_shape("identity_invariant_loss", x_r, g_out)?;
    let d = tape.sub(g_out, x_r)?;
    let sq = tape.square(d);
    let m = tape.mean(sq);
    if plain_l2 {
        tape.sqrt(m)
    } else {
        Ok(m)
    }
}

/// `(d_loss, g_loss)` of the non-saturating game on plain logits, each
/// averaged over its slice.
pub fn adversarial_losses(real: &[f64], fake: &[f64]) -> (f64, f64) {
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&x| f(x)).sum::<f64>() / v.len() as f64;
    let d = -(mean(real, &log_sigmoid) + mean(fake, &|x| log_sigmoid(-x)));
    let g = -mean(fake, &log_sigmoid);
    (d, g)
}

/// Unweighted generator loss terms. `luminance` is absent when the loop pass
/// is disabled.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub adv_global: f64,
    pub adv_local: f64,
    pub sfp: f64,
    pub identity: f64,
    pub luminance: Option<f64>,
}

impl LossParts {
    fn named(&self) -> [(&'static str, Option<f64>); 5] {
        [
            ("adv_global", Some(self.adv_global)),
            ("adv_local", Some(self.adv_local)),
            ("sfp", Some(self.sfp)),
            ("identity", Some(self.identity)),
            ("luminance", self.luminance),
        ]
    }
}

/// Weighted terms and their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub parts: LossParts,
    pub weighted: [f64; 5],
    pub total: f64,
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "total {:.6}", self.total)?;
        for ((name, v), w) in self.parts.named().iter().zip(&self.weighted) {
            if v.is_some() {
                write!(f, " {name} {w:.6}")?;
            }
        }
        Ok(())
    }
}

/// Weighted sum of the generator terms. A non-finite term is reported as
/// divergence at `step`.
pub fn total_generator_loss(parts: &LossParts, w: &LossWeights, step: u64) -> Result<LossBreakdown> {
    let mut weighted = [0.0; 5];
    for (i, ((name, v), (_, wt))) in parts.named().into_iter().zip(w.named()).enumerate() {
        let Some(v) = v else { continue };
        if !v.is_finite() {
            return Err(Error::Divergence {
                step,
                term: name.into(),
            });
        }
        weighted[i] = wt * v;
    }
    Ok(LossBreakdown {
        parts: *parts,
        weighted,
        total: weighted.iter().sum(),
    })
}
