use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::{error, info, warn};
use msatr_core::image::{crop_tensor, reflect_pad_to_multiple, ImageBuffer};
use msatr_core::metrics::{evaluate, exposure_stability, EvalReport};
use msatr_core::selfcheck::{corrupted_backward_check, run_checks, standard_checks};
use msatr_core::train::data::list_files;
use msatr_core::train::{mix_images, Checkpoint, Dataset, Mix, Trainer, LOG_HEADER};
use msatr_core::window::PATCH_SIZE;
use msatr_core::{Enhancer, Error, Generator, Tensor};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::exit::{CheckFailure, UsageError};

pub const LOG_FILE: &str = "train.tsv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const CONFIG_FILE: &str = "config.txt";

/// Reflect-pads the input to a multiple of 8, enhances, and crops back to
/// the original size. The padded size must equal the checkpoint resolution.
pub struct Padded<'a>(pub &'a Generator);

impl Enhancer for Padded<'_> {
    fn enhance(&self, x: &Tensor) -> msatr_core::Result<Tensor> {
        let (padded, (top, left)) = reflect_pad_to_multiple(x, PATCH_SIZE)?;
        let cfg = self.0.config();
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let (ph, pw) = (padded.shape()[1], padded.shape()[2]);
        if (ph, pw) != (cfg.train_height, cfg.train_width) {
            return Err(Error::Contract(format!(
                "a {h}x{w} input pads to {ph}x{pw}, but the checkpoint was trained at {}x{}",
                cfg.train_height, cfg.train_width
            )));
        }
        crop_tensor(&self.0.enhance(&padded)?, top, left, h, w)
    }
}

pub fn load_generator(path: &Path) -> Result<Generator> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(Generator::from_params(ck.config, &ck.generator)?)
}

fn load_tensor(path: &Path) -> Result<Tensor> {
    Ok(ImageBuffer::load(path)?.to_tensor())
}

fn save_tensor(t: &Tensor, path: &Path) -> Result<()> {
    ImageBuffer::from_tensor(t)?.save_ppm(path)?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<PathBuf> {
    for dir in [&cfg.train.low_dir, &cfg.train.normal_dir] {
        if !dir.is_dir() {
            return Err(UsageError(format!("dataset directory {} does not exist", dir.display())).into());
        }
    }
    let dataset = Dataset::load(&cfg.train.low_dir, &cfg.train.normal_dir, cfg.train.crop_size)?;
    create_dir(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_string()).with_context(|| format!("writing {}", out.display()))?;

    let mut trainer = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            Trainer::resume(&ck, cfg.train.clone(), dataset)?
        }
        None => Trainer::new(cfg.generator_config(), cfg.train.clone(), dataset)?,
    };

    let log_path = out.join(LOG_FILE);
    let fresh = resume.is_none() || !log_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&log_path)
        .map_err(|e| io_err(&log_path, e))?;
    let mut log = BufWriter::new(file);
    if fresh {
        writeln!(log, "{LOG_HEADER}").map_err(|e| io_err(&log_path, e))?;
    }

    let total = cfg.train.total_steps;
    let every = cfg.checkpoint_every;
    info!("training {} steps from step {}", total, trainer.step_count());
    trainer.run(|t, rec| {
        writeln!(log, "{}", rec.log_row()).map_err(|e| io_err(&log_path, e))?;
        if rec.step % 10 == 0 || rec.step == total {
            info!("step {}/{total} total {:.5}", rec.step, rec.generator.total);
        }
        if every > 0 && rec.step % every == 0 && rec.step < total {
            log.flush().map_err(|e| io_err(&log_path, e))?;
            t.checkpoint().save(&out.join(format!("step_{:06}.ckpt", rec.step)))?;
        }
        Ok(())
    })?;
    log.flush().map_err(|e| io_err(&log_path, e))?;

    let path = out.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&path)?;
    Ok(path)
}

fn enhance_file(g: &Padded<'_>, input: &Path, out: &Path) -> Result<PathBuf> {
    let x = load_tensor(input)?;
    let y = g.enhance(&x)?;
    let stem = input
        .file_stem()
        .ok_or_else(|| UsageError(format!("{} has no file name", input.display())))?;
    let path = out.join(stem).with_extension("ppm");
    save_tensor(&y, &path)?;
    Ok(path)
}

/// Enhances each input into `out`. A failing input is reported and skipped;
/// the first failure is returned once every input has been tried.
pub fn enhance(ckpt: &Path, inputs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    let g = load_generator(ckpt)?;
    create_dir(out)?;
    let padded = Padded(&g);
    let mut written = Vec::new();
    let mut first_failure = None;
    let mut failed = 0;
    for input in inputs {
        match enhance_file(&padded, input, out) {
            Ok(p) => {
                println!("{} -> {}", input.display(), p.display());
                written.push(p);
            }
            Err(e) => {
                error!("{}: {e:#}", input.display());
                failed += 1;
                first_failure.get_or_insert(e);
            }
        }
    }
    match first_failure {
        Some(e) => Err(e.context(format!("{failed} of {} inputs failed", inputs.len()))),
        None => Ok(written),
    }
}

fn file_names(dir: &Path) -> Result<BTreeSet<String>> {
    Ok(list_files(dir)?
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect())
}

/// Scores enhanced `low/` images against same-named files in `reference/`.
/// Names present in only one directory are listed and skipped.
pub fn eval(ckpt: &Path, low: &Path, reference: &Path, out: &Path, passes: usize) -> Result<EvalReport> {
    let g = load_generator(ckpt)?;
    let (lows, refs) = (file_names(low)?, file_names(reference)?);
    for name in lows.difference(&refs) {
        warn!("{name} has no reference in {}, skipped", reference.display());
    }
    for name in refs.difference(&lows) {
        warn!("{name} has no low-light input in {}, skipped", low.display());
    }
    let names: Vec<&String> = lows.intersection(&refs).collect();
    if names.is_empty() {
        warn!(
            "no paired file names between {} and {}",
            low.display(),
            reference.display()
        );
    }
    let mut pairs = Vec::with_capacity(names.len());
    for name in names {
        pairs.push((
            name.clone(),
            load_tensor(&low.join(name))?,
            load_tensor(&reference.join(name))?,
        ));
    }
    let padded = Padded(&g);
    let mut report = evaluate(&padded, pairs.iter().map(|(n, l, r)| (n.as_str(), l, r)))?;
    if passes > 0 {
        for (name, l, _) in &pairs {
            report
                .drift
                .push((name.clone(), exposure_stability(&padded, l, passes)?));
        }
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(out, report.to_tsv()).map_err(|e| io_err(out, e))?;
    Ok(report)
}

pub fn mix(low: &Path, enhanced: &Path, seed: u64, out: &Path) -> Result<Mix> {
    let (lo, en) = (load_tensor(low)?, load_tensor(enhanced)?);
    if lo.shape() != en.shape() {
        return Err(UsageError(format!(
            "{} is {:?} but {} is {:?}",
            low.display(),
            lo.shape(),
            enhanced.display(),
            en.shape()
        ))
        .into());
    }
    let m = mix_images(&lo, &en, &mut ChaCha8Rng::seed_from_u64(seed))?;
    save_tensor(&m.image, out)?;
    Ok(m)
}

pub fn selfcheck(inject_fault: bool) -> Result<()> {
    let mut checks = standard_checks();
    if inject_fault {
        checks.push(corrupted_backward_check());
    }
    let report = run_checks(&checks);
    println!("{report}");
    if report.all_passed() {
        Ok(())
    } else {
        Err(CheckFailure(format!("failed checks: {}", report.failures().join(", "))).into())
    }
}
