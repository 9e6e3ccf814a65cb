//! `key = value` run configuration covering training, generator and loss
//! settings. Blank lines and `#` comments are ignored.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use msatr_core::train::TrainConfig;
use msatr_core::{GeneratorConfig, Variant};

use crate::exit::UsageError;

pub const KEYS: &[&str] = &[
    "low_dir",
    "normal_dir",
    "seed",
    "total_steps",
    "batch_size",
    "crop_size",
    "lr_init",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "w_adv_global",
    "w_adv_local",
    "w_sfp",
    "w_identity",
    "w_luminance",
    "alpha_weighted_luminance",
    "printed_generator_adversarial",
    "plain_l2_identity",
    "patch_size",
    "patch_count",
    "variant",
    "local_dim",
    "local_heads",
    "num_local_layers",
    "global_embed_dim",
    "global_out_dim",
    "global_heads",
    "fusion_channels",
    "checkpoint_every",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    /// Write `step_NNNNNN.ckpt` every this many steps; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            generator: GeneratorConfig::default(),
            checkpoint_every: 250,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, UsageError> {
    value
        .parse()
        .map_err(|_| UsageError(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, UsageError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(UsageError(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, UsageError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| UsageError(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| UsageError(format!("line {}: {}", n + 1, e.0)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::Error::new(e).context(format!("reading config {}", path.display())))?;
        Self::parse(&text).map_err(|e| UsageError(format!("{}: {}", path.display(), e.0)).into())
    }

    /// Applies a `key=value` override as given on the command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), UsageError> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| UsageError(format!("override `{kv}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), UsageError> {
        let t = &mut self.train;
        let g = &mut self.generator;
        match key {
            "low_dir" => t.low_dir = PathBuf::from(value),
            "normal_dir" => t.normal_dir = PathBuf::from(value),
            "seed" => t.seed = parse(key, value)?,
            "total_steps" => t.total_steps = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "crop_size" => t.crop_size = parse(key, value)?,
            "lr_init" => t.lr_init = parse(key, value)?,
            "adam_beta1" => t.adam.beta1 = parse(key, value)?,
            "adam_beta2" => t.adam.beta2 = parse(key, value)?,
            "adam_eps" => t.adam.eps = parse(key, value)?,
            "w_adv_global" => t.weights.adv_global = parse(key, value)?,
            "w_adv_local" => t.weights.adv_local = parse(key, value)?,
            "w_sfp" => t.weights.sfp = parse(key, value)?,
            "w_identity" => t.weights.identity = parse(key, value)?,
            "w_luminance" => t.weights.luminance = parse(key, value)?,
            "alpha_weighted_luminance" => t.forms.alpha_weighted_luminance = parse_bool(key, value)?,
            "printed_generator_adversarial" => t.forms.printed_generator_adversarial = parse_bool(key, value)?,
            "plain_l2_identity" => t.forms.plain_l2_identity = parse_bool(key, value)?,
            "patch_size" => {
                t.patches.size = if value == "auto" {
                    None
                } else {
                    Some(parse(key, value)?)
                };
            }
            "patch_count" => t.patches.count = parse(key, value)?,
            "variant" => g.variant = Variant::from_str(value).map_err(|e| UsageError(e.to_string()))?,
            "local_dim" => g.local_dim = parse(key, value)?,
            "local_heads" => g.local_heads = parse(key, value)?,
            "num_local_layers" => g.num_local_layers = parse(key, value)?,
            "global_embed_dim" => g.global_embed_dim = parse(key, value)?,
            "global_out_dim" => g.global_out_dim = parse(key, value)?,
            "global_heads" => g.global_heads = parse(key, value)?,
            "fusion_channels" => g.fusion_channels = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            _ => {
                return Err(UsageError(format!(
                    "unknown config key `{key}`; known keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Generator settings with the training resolution taken from the crop.
    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            train_height: self.train.crop_size,
            train_width: self.train.crop_size,
            ..self.generator.clone()
        }
    }
}

impl fmt::Display for RunConfig {
    /// Every key with its resolved value, parseable by [`RunConfig::parse`].
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (t, g) = (&self.train, &self.generator);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("low_dir", t.low_dir.display().to_string());
        kv("normal_dir", t.normal_dir.display().to_string());
        kv("seed", t.seed.to_string());
        kv("total_steps", t.total_steps.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("crop_size", t.crop_size.to_string());
        kv("lr_init", t.lr_init.to_string());
        kv("adam_beta1", t.adam.beta1.to_string());
        kv("adam_beta2", t.adam.beta2.to_string());
        kv("adam_eps", t.adam.eps.to_string());
        kv("w_adv_global", t.weights.adv_global.to_string());
        kv("w_adv_local", t.weights.adv_local.to_string());
        kv("w_sfp", t.weights.sfp.to_string());
        kv("w_identity", t.weights.identity.to_string());
        kv("w_luminance", t.weights.luminance.to_string());
        kv("alpha_weighted_luminance", t.forms.alpha_weighted_luminance.to_string());
        kv(
            "printed_generator_adversarial",
            t.forms.printed_generator_adversarial.to_string(),
        );
        kv("plain_l2_identity", t.forms.plain_l2_identity.to_string());
        kv("patch_size", t.patches.size.map_or("auto".into(), |p| p.to_string()));
        kv("patch_count", t.patches.count.to_string());
        kv("variant", g.variant.to_string());
        kv("local_dim", g.local_dim.to_string());
        kv("local_heads", g.local_heads.to_string());
        kv("num_local_layers", g.num_local_layers.to_string());
        kv("global_embed_dim", g.global_embed_dim.to_string());
        kv("global_out_dim", g.global_out_dim.to_string());
        kv("global_heads", g.global_heads.to_string());
        kv("fusion_channels", g.fusion_channels.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        f.write_str(&s)
    }
}
