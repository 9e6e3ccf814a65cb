//! One PASS/FAIL line per acceptance criterion. Runs as a plain binary
//! (`harness = false`) and exits non-zero if any criterion fails.

mod common;

use std::time::{Duration, Instant};

use common::{mhsa_reference, ssim_reference};
use msatr_core::attention::{mhsa, window_attention_block, MhsaWeights, TransformerBlock};
use msatr_core::losses::{adversarial_losses, identity_invariant_loss, luminance_consistency_loss, LossWeights};
use msatr_core::metrics::{evaluate, exposure_stability, mse, psnr, ssim, EvalReport};
use msatr_core::params::Init;
use msatr_core::selfcheck::{standard_checks, GRAD_TOLERANCE};
use msatr_core::synthetic::{bundled_dir, paired_set};
use msatr_core::train::{mix_images, mix_with, Checkpoint, Dataset, TrainConfig, Trainer};
use msatr_core::window::{window_partition, window_reverse};
use msatr_core::{Generator, GeneratorConfig, ParamStore, Rect, Tape, Tensor, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let results: Vec<_> = standard_checks()
        .iter()
        .filter(|c| c.name().starts_with("grad/"))
        .map(|c| c.run())
        .collect();
    let elapsed = start.elapsed();
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{} ({})", r.name, r.detail))
        .collect();
    let generator = results
        .iter()
        .find(|r| r.name == "grad/generator")
        .map(|r| r.detail.clone());
    let detail = format!(
        "{} checks, tolerance {GRAD_TOLERANCE:e}, generator: {}, {:.2}s",
        results.len(),
        generator.unwrap_or_else(|| "missing".into()),
        elapsed.as_secs_f64()
    );
    if !failed.is_empty() {
        return Err(format!("{detail}; failed: {}", failed.join(", ")));
    }
    ensure(
        elapsed < Duration::from_secs(120) && results.iter().any(|r| r.name == "grad/generator"),
        detail,
    )
}

fn attention_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for case in 0..50u64 {
        let heads = [1, 2, 4, 8][rng.random_range(0..4)];
        let d = heads * rng.random_range(1..=16 / heads);
        let l = rng.random_range(1..=8);
        let mut store = ParamStore::new();
        let mut init_rng = ChaCha8Rng::seed_from_u64(case);
        let w = MhsaWeights::new(
            &mut Init {
                store: &mut store,
                rng: &mut init_rng,
            },
            "a",
            d,
            heads,
        )
        .map_err(err)?;
        let x = rand_tensor(&[l, d], &mut rng, -1.0, 1.0);
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let xv = t.constant(x.clone());
        let y = mhsa(&mut t, &p, &w, xv).map_err(err)?;
        let r = mhsa_reference(
            &x,
            store.get(w.w_q),
            store.get(w.w_k),
            store.get(w.w_v),
            store.get(w.w_o),
            heads,
        );
        worst = worst.max(t.value(y).max_abs_diff(&r));
    }
    ensure(worst < 1e-10, format!("50 cases, max abs diff {worst:.2e}"))
}

fn window_bijection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for s in [2, 4, 8] {
        for _ in 0..200 {
            let c = rng.random_range(1..=4);
            let (h, w) = (s * rng.random_range(1..=4), s * rng.random_range(1..=4));
            let x = rand_tensor(&[c, h, w], &mut rng, -1.0, 1.0);
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let p = window_partition(&mut t, v, s).map_err(err)?;
            let back = window_reverse(&mut t, p, s, h, w).map_err(err)?;
            if t.value(back) != &x {
                return Err(format!("roundtrip differs at s={s}, shape {c}x{h}x{w}"));
            }
        }
    }

    let mut store = ParamStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(4);
    let block = TransformerBlock::new(
        &mut Init {
            store: &mut store,
            rng: &mut init_rng,
        },
        "b",
        8,
        2,
    )
    .map_err(err)?;
    let run = |x: &Tensor, s: usize| -> Result<Tensor, String> {
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let xv = t.constant(x.clone());
        let y = window_attention_block(&mut t, &p, &block, xv, s).map_err(err)?;
        Ok(t.value(y).clone())
    };
    let x = rand_tensor(&[8, 16, 16], &mut rng, -1.0, 1.0);
    for s in [2, 4, 8] {
        let base = run(&x, s)?;
        let (r, c) = (s + 1, s);
        let mut x2 = x.clone();
        x2.set(&[0, r, c], x.get(&[0, r, c]) + 1.0);
        let pert = run(&x2, s)?;
        let mut inside_changed = false;
        for ch in 0..8 {
            for rr in 0..16 {
                for cc in 0..16 {
                    let same = rr / s == r / s && cc / s == c / s;
                    let changed = base.get(&[ch, rr, cc]) != pert.get(&[ch, rr, cc]);
                    if changed && !same {
                        return Err(format!("s={s}: pixel ({rr},{cc}) outside the perturbed window changed"));
                    }
                    inside_changed |= changed && same;
                }
            }
        }
        if !inside_changed {
            return Err(format!("s={s}: perturbation had no effect inside its window"));
        }
    }
    Ok("600 roundtrips exact for s in {2,4,8}; perturbations stay inside their window".into())
}

fn loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(&[3, 16, 16], &mut rng, 0.0, 0.9);
    let region = Rect::new(3, 2, 7, 9);
    let lum = |x: &Tensor, y: &Tensor| -> Result<f64, String> {
        let mut t = Tape::new();
        let (i, k) = (t.constant(x.clone()), t.constant(y.clone()));
        let l = luminance_consistency_loss(&mut t, i, k, region, None).map_err(err)?;
        Ok(t.value(l).item())
    };
    let same = lum(&a, &a)?;
    let offset = lum(&a.map(|v| v + 0.1), &a)?;
    let (d, g) = adversarial_losses(&[0.0; 4], &[0.0; 4]);
    let ln2 = std::f64::consts::LN_2;
    let mut t = Tape::new();
    let (x, y) = (t.constant(a.clone()), t.constant(a.map(|v| v + 0.2)));
    let idl = identity_invariant_loss(&mut t, x, y, false).map_err(err)?;
    let id = t.value(idl).item();
    let errs = [
        same,
        (offset - 0.01).abs(),
        (d - 2.0 * ln2).abs(),
        (g - ln2).abs(),
        (id - 0.04).abs(),
    ];
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    ensure(
        same == 0.0 && worst < 1e-12,
        format!("lum(x,x)={same}, lum offset={offset:.15}, d={d:.15}, g={g:.15}, identity={id:.15}"),
    )
}

fn mixing_interval() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for draw in 0..1000 {
        let (h, w) = (rng.random_range(4..=32), rng.random_range(4..=32));
        let a = rand_tensor(&[3, h, w], &mut rng, 0.0, 1.0);
        let b = rand_tensor(&[3, h, w], &mut rng, 0.0, 1.0);
        let m = mix_images(&a, &b, &mut rng).map_err(err)?;
        for (i, &v) in m.image.data().iter().enumerate() {
            let (r, c) = (i / w % h, i % w);
            let (x, y) = (a.data()[i], b.data()[i]);
            let ok = if m.region.contains(r, c) {
                v >= x.min(y) && v <= x.max(y)
            } else {
                v == x
            };
            if !ok {
                return Err(format!(
                    "draw {draw}: pixel {i} = {v} outside bounds (region {:?})",
                    m.region
                ));
            }
        }
        if draw % 100 == 0 {
            let zero = mix_with(&a, &b, m.region, 0.0).map_err(err)?;
            let one = mix_with(&a, &b, m.region, 1.0).map_err(err)?;
            for (i, (&z, &o)) in zero.data().iter().zip(one.data()).enumerate() {
                let inside = m.region.contains(i / w % h, i % w);
                if z != a.data()[i] || o != if inside { b.data()[i] } else { a.data()[i] } {
                    return Err(format!("draw {draw}: alpha limit not exact at pixel {i}"));
                }
            }
        }
    }
    Ok("1000 draws inside the pointwise interval; alpha 0 and 1 exact".into())
}

fn bundled() -> Result<Dataset, String> {
    Dataset::load(&bundled_dir().join("low"), &bundled_dir().join("normal"), 64).map_err(err)
}

fn desk_config(steps: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        total_steps: steps,
        ..TrainConfig::default()
    }
}

/// Trains to completion, returning the trainer, every step's total loss and
/// the wall time.
fn train(gen: GeneratorConfig, cfg: TrainConfig) -> Result<(Trainer, Vec<f64>, Duration), String> {
    let start = Instant::now();
    let mut trainer = Trainer::new(gen, cfg, bundled()?).map_err(err)?;
    let mut totals = Vec::new();
    trainer
        .run(|_, rec| {
            totals.push(rec.generator.total);
            Ok(())
        })
        .map_err(err)?;
    Ok((trainer, totals, start.elapsed()))
}

fn trainability(totals: &[f64], elapsed: Duration) -> Outcome {
    let first = totals[0];
    let last = *totals.last().unwrap();
    let tail = &totals[totals.len() - 10..];
    let tail_mean = tail.iter().sum::<f64>() / tail.len() as f64;
    let drop = 1.0 - last / first;
    let finite = totals.iter().all(|v| v.is_finite());
    ensure(
        finite && drop >= 0.30 && elapsed < Duration::from_secs(30 * 60),
        format!(
            "{} steps: step 1 {first:.4}, step {} {last:.4} ({:.1}% lower), last-10 mean {tail_mean:.4} ({:.1}% lower), finite {finite}, {:.0}s",
            totals.len(),
            totals.len(),
            100.0 * drop,
            100.0 * (1.0 - tail_mean / first),
            elapsed.as_secs_f64()
        ),
    )
}

fn held_out() -> Vec<(String, Tensor, Tensor)> {
    paired_set(100, 8, 64)
        .into_iter()
        .enumerate()
        .map(|(k, (low, reference))| (format!("held{k:02}"), low, reference))
        .collect()
}

/// Means over the held-out scenes of (saturation growth, pass-1 saturation,
/// pass-3 saturation, pass-1 luminance, pass-3 luminance).
fn drift_summary(g: &Generator) -> Result<[f64; 5], String> {
    let set = held_out();
    let mut acc = [0.0; 5];
    for (_, low, _) in &set {
        let d = exposure_stability(g, low, 3).map_err(err)?;
        let v = [
            d.saturation_growth(),
            d.saturation[0],
            d.saturation[2],
            d.mean_luminance[0],
            d.mean_luminance[2],
        ];
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x / set.len() as f64;
        }
    }
    Ok(acc)
}

fn exposure_direction(full: &Generator, no_lum: &Generator) -> Outcome {
    let a = drift_summary(full)?;
    let b = drift_summary(no_lum)?;
    let fmt = |d: &[f64; 5]| {
        format!(
            "growth {:.6} (saturation {:.4} -> {:.4}, luminance {:.4} -> {:.4})",
            d[0], d[1], d[2], d[3], d[4]
        )
    };
    ensure(a[0] <= b[0], format!("full {}; w_luminance=0 {}", fmt(&a), fmt(&b)))
}

fn report(g: &Generator) -> Result<EvalReport, String> {
    let set = held_out();
    evaluate(g, set.iter().map(|(n, l, r)| (n.as_str(), l, r))).map_err(err)
}

fn ablation_grid(no_lum: &Generator) -> Outcome {
    let mut parts = Vec::new();
    let mut reports = Vec::new();
    for variant in [Variant::LocalOnly, Variant::GlobalOnly] {
        let gen = GeneratorConfig {
            variant,
            ..GeneratorConfig::default()
        };
        let (trainer, totals, elapsed) = train(gen, desk_config(200))?;
        if !totals.iter().all(|v| v.is_finite()) {
            return Err(format!("{} produced a non-finite loss", variant.as_str()));
        }
        reports.push((variant.as_str().to_string(), report(trainer.generator())?));
        parts.push(format!("{} {:.0}s", variant.as_str(), elapsed.as_secs_f64()));
    }
    reports.push(("no-consistency".into(), report(no_lum)?));
    let names: Vec<Vec<&str>> = reports
        .iter()
        .map(|(_, r)| r.rows.iter().map(|row| row.name.as_str()).collect())
        .collect();
    let comparable = names.windows(2).all(|w| w[0] == w[1]) && !names[0].is_empty();
    for (name, r) in &reports {
        let (p, s) = (r.mean_psnr().unwrap_or(f64::NAN), r.mean_ssim().unwrap_or(f64::NAN));
        if !p.is_finite() || !s.is_finite() {
            return Err(format!("{name}: non-finite report"));
        }
        parts.push(format!("{name} psnr {p:.3} ssim {s:.4}"));
    }
    ensure(comparable, parts.join("; "))
}

fn determinism() -> Outcome {
    let gen = GeneratorConfig {
        local_dim: 8,
        global_embed_dim: 8,
        global_out_dim: 8,
        global_heads: 2,
        num_local_layers: 2,
        train_height: 16,
        train_width: 16,
        fusion_channels: 8,
        ..GeneratorConfig::default()
    };
    let cfg = TrainConfig {
        crop_size: 16,
        batch_size: 2,
        total_steps: 20,
        seed: 9,
        ..TrainConfig::default()
    };
    let data = || Dataset::load(&bundled_dir().join("low"), &bundled_dir().join("normal"), 16).map_err(err);
    let dir = tempfile::tempdir().map_err(err)?;
    let full_run = |name: &str| -> Result<Vec<u8>, String> {
        let mut t = Trainer::new(gen.clone(), cfg.clone(), data()?).map_err(err)?;
        t.run(|_, _| Ok(())).map_err(err)?;
        let path = dir.path().join(name);
        t.checkpoint().save(&path).map_err(err)?;
        std::fs::read(&path).map_err(err)
    };
    let a = full_run("a.ckpt")?;
    let b = full_run("b.ckpt")?;

    let mut half = Trainer::new(gen.clone(), cfg.clone(), data()?).map_err(err)?;
    for _ in 0..10 {
        half.step().map_err(err)?;
    }
    let mid = dir.path().join("mid.ckpt");
    half.checkpoint().save(&mid).map_err(err)?;
    drop(half);
    let mut resumed = Trainer::resume(&Checkpoint::load(&mid).map_err(err)?, cfg, data()?).map_err(err)?;
    resumed.run(|_, _| Ok(())).map_err(err)?;
    let c = resumed.checkpoint().to_bytes();
    ensure(
        a == b && a == c,
        format!(
            "two 20-step runs identical: {}; resume at 10 identical: {}; {} bytes",
            a == b,
            a == c,
            a.len()
        ),
    )
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = rand_tensor(&[3, 32, 32], &mut rng, 0.1, 0.9);
    let b = Tensor::from_fn(a.shape().to_vec(), |i| {
        a.data()[i] + if i % 3 == 0 { 0.1 } else { -0.1 }
    });
    let m = mse(&a, &b).map_err(err)?;
    let p = psnr(&a, &b).map_err(err)?;
    let s_same = ssim(&a, &a).map_err(err)?;
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let x = rand_tensor(&[3, 24, 24], &mut rng, 0.0, 1.0);
        let y = x.map(|v| (0.6 * v + 0.3 * v * v + 0.05).min(1.0));
        worst = worst.max((ssim(&x, &y).map_err(err)? - ssim_reference(&x, &y)).abs());
    }
    ensure(
        (m - 0.01).abs() < 1e-12 && (p - 20.0).abs() < 1e-9 && s_same == 1.0 && worst < 1e-10,
        format!("mse {m:.12}, psnr {p:.12} dB, ssim(x,x) {s_same}, max ssim diff vs reference {worst:.2e}"),
    )
}

fn print(n: usize, name: &str, outcome: &Outcome) -> bool {
    let (tag, detail, ok) = match outcome {
        Ok(d) => ("PASS", d, true),
        Err(d) => ("FAIL", d, false),
    };
    println!("criterion {n:>2} {tag} {name}: {detail}");
    ok
}

fn main() {
    let mut ok = true;
    ok &= print(1, "gradient integrity", &gradient_integrity());
    ok &= print(2, "attention oracle", &attention_oracle());
    ok &= print(3, "window bijection", &window_bijection());
    ok &= print(4, "loss oracles", &loss_oracles());
    ok &= print(5, "mixing interval", &mixing_interval());

    let full = train(GeneratorConfig::default(), desk_config(500));
    let c6 = match &full {
        Ok((_, totals, elapsed)) => trainability(totals, *elapsed),
        Err(e) => Err(e.clone()),
    };
    ok &= print(6, "trainability", &c6);

    let no_lum_cfg = TrainConfig {
        weights: LossWeights {
            luminance: 0.0,
            ..LossWeights::default()
        },
        ..desk_config(500)
    };
    let no_lum = train(GeneratorConfig::default(), no_lum_cfg);
    let c7 = match (&full, &no_lum) {
        (Ok((f, ..)), Ok((n, ..))) => exposure_direction(f.generator(), n.generator()),
        (Err(e), _) | (_, Err(e)) => Err(e.clone()),
    };
    ok &= print(7, "exposure-stability direction", &c7);

    let c8 = match &no_lum {
        Ok((n, ..)) => ablation_grid(n.generator()),
        Err(e) => Err(e.clone()),
    };
    ok &= print(8, "ablation grid", &c8);
    ok &= print(9, "determinism and checkpointing", &determinism());
    ok &= print(10, "metric oracles", &metric_oracles());

    println!("acceptance: {}", if ok { "all criteria passed" } else { "FAILED" });
    if !ok {
        std::process::exit(1);
    }
}
