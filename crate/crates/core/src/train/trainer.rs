//! The adversarial training loop with the consistency (second) pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Rect, Tape, Var};
use crate::discriminator::{discriminate_global, discriminate_local, sample_patches, Discriminator};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::losses::{
    discriminator_loss, generator_adversarial_loss, identity_invariant_loss, luminance_consistency_loss,
    self_feature_preserving_loss, total_generator_loss, FeatureExtractor, LossBreakdown, LossParts,
};
use crate::params::Bound;
use crate::tensor::Tensor;

use super::adam::{adam_step, AdamState};
use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::data::{Batch, Dataset};
use super::mix::mix_images;
use super::state::{RngState, TrainState};

/// Seed offsets separating the three networks' initializations.
const D_GLOBAL_SEED: u64 = 0x9E37_79B9_7F4A_7C15;
const D_LOCAL_SEED: u64 = 0xC2B2_AE3D_27D4_EB4F;

/// What one optimization step produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// 1-based index of the completed step.
    pub step: u64,
    pub lr: f64,
    pub generator: LossBreakdown,
    pub d_global: f64,
    pub d_local: f64,
}

pub const LOG_HEADER: &str = "step\tlr\tadv_global\tadv_local\tsfp\tidentity\tluminance\td_global\td_local\ttotal";

impl StepRecord {
    /// One tab-separated log row matching [`LOG_HEADER`]. A disabled
    /// luminance term is written as `NA`.
    pub fn log_row(&self) -> String {
        let p = &self.generator.parts;
        let lum = p.luminance.map_or_else(|| "NA".to_owned(), |v| format!("{v:.8e}"));
        format!(
            "{}\t{:.8e}\t{:.8e}\t{:.8e}\t{:.8e}\t{:.8e}\t{lum}\t{:.8e}\t{:.8e}\t{:.8e}",
            self.step,
            self.lr,
            p.adv_global,
            p.adv_local,
            p.sfp,
            p.identity,
            self.d_global,
            self.d_local,
            self.generator.total
        )
    }
}

/// Per-image generator graph kept alive between the discriminator and
/// generator updates.
struct ImagePass {
    tape: Tape,
    params: Bound,
    enhanced: Var,
    sfp: Var,
    identity: Var,
    luminance: Option<Var>,
    fake_patches: Vec<Rect>,
}

pub struct Trainer {
    config: TrainConfig,
    generator: Generator,
    d_global: Discriminator,
    d_local: Discriminator,
    features: FeatureExtractor,
    dataset: Dataset,
    state: TrainState,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh networks and optimizer state, all derived from `config.seed`.
    pub fn new(gen_config: GeneratorConfig, config: TrainConfig, dataset: Dataset) -> Result<Self> {
        let seed = config.seed;
        let generator = Generator::init(gen_config, seed)?;
        let d_global = Discriminator::init(seed ^ D_GLOBAL_SEED);
        let d_local = Discriminator::init(seed ^ D_LOCAL_SEED);
        let rng = ChaCha8Rng::seed_from_u64(seed);
        let state = TrainState {
            step: 0,
            adam_g: AdamState::new(generator.params()),
            adam_d_global: AdamState::new(d_global.params()),
            adam_d_local: AdamState::new(d_local.params()),
            rng: RngState::capture(&rng),
            weights: config.weights,
            last_loss: None,
            best_loss: None,
        };
        Self::assemble(config, generator, d_global, d_local, dataset, state)
    }

    /// Continues from a checkpoint that carries a training state.
    pub fn resume(checkpoint: &Checkpoint, config: TrainConfig, dataset: Dataset) -> Result<Self> {
        let state = checkpoint
            .train_state
            .clone()
            .ok_or_else(|| Error::Config("checkpoint has no training state to resume from".into()))?;
        if state.weights != config.weights {
            return Err(Error::Config(format!(
                "checkpoint loss weights {:?} differ from the configured {:?}",
                state.weights, config.weights
            )));
        }
        let generator = Generator::from_params(checkpoint.config.clone(), &checkpoint.generator)?;
        let d_global = Discriminator::from_params(&checkpoint.d_global)?;
        let d_local = Discriminator::from_params(&checkpoint.d_local)?;
        Self::assemble(config, generator, d_global, d_local, dataset, state)
    }

    fn assemble(
        config: TrainConfig,
        generator: Generator,
        d_global: Discriminator,
        d_local: Discriminator,
        dataset: Dataset,
        state: TrainState,
    ) -> Result<Self> {
        config.validate()?;
        let g = generator.config();
        if (g.train_height, g.train_width) != (config.crop_size, config.crop_size) {
            return Err(Error::Config(format!(
                "crop_size {} does not match the generator resolution {}x{}",
                config.crop_size, g.train_height, g.train_width
            )));
        }
        if dataset.crop_size != config.crop_size {
            return Err(Error::Config(format!(
                "dataset crops are {} but crop_size is {}",
                dataset.crop_size, config.crop_size
            )));
        }
        let rng = state.rng.restore();
        Ok(Self {
            config,
            generator,
            d_global,
            d_local,
            features: FeatureExtractor::new(),
            dataset,
            state,
            rng,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn d_global(&self) -> &Discriminator {
        &self.d_global
    }

    pub fn d_local(&self) -> &Discriminator {
        &self.d_local
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.config.total_steps
    }

    /// Snapshot of all weights plus the training state.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut state = self.state.clone();
        state.rng = RngState::capture(&self.rng);
        Checkpoint {
            config: self.generator.config().clone(),
            generator: self.generator.params().clone(),
            d_global: self.d_global.params().clone(),
            d_local: self.d_local.params().clone(),
            train_state: Some(state),
        }
    }

    /// Samples a batch and performs one discriminator and one generator update.
    pub fn step(&mut self) -> Result<StepRecord> {
        let batch = self.dataset.sample_batch(&mut self.rng, self.config.batch_size)?;
        self.step_on(&batch)
    }

    /// Trains until `total_steps`, calling `on_step` after every step.
    pub fn run(&mut self, mut on_step: impl FnMut(&Self, &StepRecord) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            let rec = self.step()?;
            on_step(self, &rec)?;
        }
        Ok(())
    }

    /// One step on a given batch.
    pub fn step_on(&mut self, batch: &Batch) -> Result<StepRecord> {
        let n = batch.low.len();
        if n == 0 || batch.normal.len() != n {
            return Err(Error::Contract(format!(
                "batch needs equally many low and normal images, got {} and {}",
                n,
                batch.normal.len()
            )));
        }
        let step = self.state.step + 1;
        let lr = self.config.learning_rate(self.state.step);
        let inv = 1.0 / n as f64;

        let mut passes = batch
            .low
            .iter()
            .zip(&batch.normal)
            .map(|(low, normal)| self.generator_pass(low, normal))
            .collect::<Result<Vec<_>>>()?;

        let (d_global_loss, d_local_loss) = self.update_discriminators(&mut passes, &batch.normal, lr, inv, step)?;

        // Generator update against the freshly updated discriminators.
        let w = self.config.weights;
        let mut grads: Option<Vec<Vec<f64>>> = None;
        let mut sums = [0.0; 5];
        for mut pass in passes {
            let tape = &mut pass.tape;
            let pg = self.d_global.bind(tape, false);
            let pl = self.d_local.bind(tape, false);
            let fg = discriminate_global(&self.d_global, tape, &pg, pass.enhanced)?;
            let fl = discriminate_local(&self.d_local, tape, &pl, pass.enhanced, &pass.fake_patches)?;
            let printed = self.config.forms.printed_generator_adversarial;
            let adv_g = generator_adversarial_loss(tape, fg, printed);
            let adv_l = generator_adversarial_loss(tape, fl, printed);

            let mut terms = vec![
                (adv_g, w.adv_global),
                (adv_l, w.adv_local),
                (pass.sfp, w.sfp),
                (pass.identity, w.identity),
            ];
            if let Some(l) = pass.luminance {
                terms.push((l, w.luminance));
            }
            for (s, &(v, _)) in sums.iter_mut().zip(&terms) {
                *s += tape.value(v).item();
            }
            let mut total = tape.scale(terms[0].0, terms[0].1);
            for &(v, wt) in &terms[1..] {
                let scaled = tape.scale(v, wt);
                total = tape.add(total, scaled)?;
            }
            tape.backward_scaled(total, inv)?;
            accumulate(&mut grads, pass.params.grads(tape));
        }
        let parts = LossParts {
            adv_global: sums[0] * inv,
            adv_local: sums[1] * inv,
            sfp: sums[2] * inv,
            identity: sums[3] * inv,
            luminance: (w.luminance > 0.0).then(|| sums[4] * inv),
        };
        let breakdown = total_generator_loss(&parts, &w, step)?;
        let grads = grads.expect("non-empty batch");
        adam_step(
            self.generator.params_mut(),
            &grads,
            &mut self.state.adam_g,
            lr,
            &self.config.adam,
        )?;
        if !self.generator.params().all_finite() {
            return Err(Error::Divergence {
                step,
                term: "generator weights".into(),
            });
        }

        self.state.step = step;
        self.state.last_loss = Some(breakdown.total);
        self.state.best_loss = Some(self.state.best_loss.map_or(breakdown.total, |b| b.min(breakdown.total)));
        self.state.rng = RngState::capture(&self.rng);
        Ok(StepRecord {
            step,
            lr,
            generator: breakdown,
            d_global: d_global_loss,
            d_local: d_local_loss,
        })
    }

    /// First pass, optional mixing and second pass, sfp and identity terms.
    fn generator_pass(&mut self, low: &Tensor, normal: &Tensor) -> Result<ImagePass> {
        let mut tape = Tape::new();
        let params = self.generator.bind(&mut tape, true);
        let x = tape.constant(low.clone());
        let enhanced = self.generator.forward(&mut tape, &params, x)?;

        let luminance = if self.config.weights.luminance > 0.0 {
            let first = tape.value(enhanced).clone();
            let mix = mix_images(low, &first, &mut self.rng)?;
            let mixed = tape.constant(mix.image);
            let second = self.generator.forward(&mut tape, &params, mixed)?;
            let target = tape.constant(first);
            let alpha = self.config.forms.alpha_weighted_luminance.then_some(mix.alpha);
            Some(luminance_consistency_loss(
                &mut tape, second, target, mix.region, alpha,
            )?)
        } else {
            None
        };

        let sfp = self_feature_preserving_loss(&mut tape, &self.features, x, enhanced)?;
        let xr = tape.constant(normal.clone());
        let g_normal = self.generator.forward(&mut tape, &params, xr)?;
        let identity = identity_invariant_loss(&mut tape, xr, g_normal, self.config.forms.plain_l2_identity)?;
        Ok(ImagePass {
            tape,
            params,
            enhanced,
            sfp,
            identity,
            luminance,
            fake_patches: Vec::new(),
        })
    }

    /// Updates both discriminators on normal crops versus first-pass outputs
    /// and records the fake patch positions for the generator update.
    fn update_discriminators(
        &mut self,
        passes: &mut [ImagePass],
        normals: &[Tensor],
        lr: f64,
        inv: f64,
        step: u64,
    ) -> Result<(f64, f64)> {
        let (h, w) = (self.config.crop_size, self.config.crop_size);
        let mut grads_g: Option<Vec<Vec<f64>>> = None;
        let mut grads_l: Option<Vec<Vec<f64>>> = None;
        let (mut loss_g, mut loss_l) = (0.0, 0.0);
        for (pass, normal) in passes.iter_mut().zip(normals) {
            let mut tape = Tape::new();
            let pg = self.d_global.bind(&mut tape, true);
            let pl = self.d_local.bind(&mut tape, true);
            let real = tape.constant(normal.clone());
            let fake = tape.constant(pass.tape.value(pass.enhanced).clone());

            let rg = discriminate_global(&self.d_global, &mut tape, &pg, real)?;
            let fg = discriminate_global(&self.d_global, &mut tape, &pg, fake)?;
            let dg = discriminator_loss(&mut tape, rg, fg);

            let real_patches = sample_patches(&mut self.rng, h, w, &self.config.patches)?;
            pass.fake_patches = sample_patches(&mut self.rng, h, w, &self.config.patches)?;
            let rl = discriminate_local(&self.d_local, &mut tape, &pl, real, &real_patches)?;
            let fl = discriminate_local(&self.d_local, &mut tape, &pl, fake, &pass.fake_patches)?;
            let dl = discriminator_loss(&mut tape, rl, fl);

            loss_g += tape.value(dg).item() * inv;
            loss_l += tape.value(dl).item() * inv;
            let both = tape.add(dg, dl)?;
            tape.backward_scaled(both, inv)?;
            accumulate(&mut grads_g, pg.grads(&tape));
            accumulate(&mut grads_l, pl.grads(&tape));
        }
        for (term, v) in [("d_global", loss_g), ("d_local", loss_l)] {
            if !v.is_finite() {
                return Err(Error::Divergence {
                    step,
                    term: term.into(),
                });
            }
        }
        let hp = self.config.adam;
        adam_step(
            self.d_global.params_mut(),
            &grads_g.expect("non-empty batch"),
            &mut self.state.adam_d_global,
            lr,
            &hp,
        )?;
        adam_step(
            self.d_local.params_mut(),
            &grads_l.expect("non-empty batch"),
            &mut self.state.adam_d_local,
            lr,
            &hp,
        )?;
        Ok((loss_g, loss_l))
    }
}

fn accumulate(acc: &mut Option<Vec<Vec<f64>>>, grads: Vec<Vec<f64>>) {
    match acc {
        None => *acc = Some(grads),
        Some(a) => {
            for (x, g) in a.iter_mut().zip(grads) {
                for (x, g) in x.iter_mut().zip(g) {
                    *x += g;
                }
            }
        }
    }
}
