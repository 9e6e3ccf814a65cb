//! Named verification checks behind the `selfcheck` command: gradient checks
//! for every differentiable op and the full generator, window partition
//! roundtrips, an attention oracle, and loss and metric oracles.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{mhsa, MhsaWeights};
use crate::autograd::{Rect, Tape, Var};
use crate::error::Result;
use crate::generator::{Generator, GeneratorConfig};
use crate::gradcheck::check_gradients;
use crate::losses::{
    discriminator_loss, generator_adversarial_loss, identity_invariant_loss, luminance_consistency_loss,
};
use crate::metrics::{psnr, ssim};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::Tensor;
use crate::train::mix_images;
use crate::window::{window_partition, window_reverse};

/// Maximum relative error accepted by every gradient check.
pub const GRAD_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

type CheckFn = Box<dyn Fn() -> Result<Verdict>>;

/// Outcome of one check body: pass flag and a short measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    fn within(value: f64, tolerance: f64, what: &str) -> Self {
        Self {
            passed: value <= tolerance,
            detail: format!("{what} {value:.3e} (limit {tolerance:.0e})"),
        }
    }
}

pub struct Check {
    name: String,
    run: CheckFn,
}

impl Check {
    pub fn new(name: impl Into<String>, run: impl Fn() -> Result<Verdict> + 'static) -> Self {
        Self {
            name: name.into(),
            run: Box::new(run),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Runs the body. An error counts as a failure with the error as detail.
    pub fn run(&self) -> CheckResult {
        let start = Instant::now();
        let verdict = (self.run)().unwrap_or_else(|e| Verdict {
            passed: false,
            detail: format!("error: {e}"),
        });
        CheckResult {
            name: self.name.clone(),
            passed: verdict.passed,
            detail: verdict.detail,
            elapsed: start.elapsed(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

#[derive(Debug, Clone, Default)]
pub struct SelfCheckReport {
    pub results: Vec<CheckResult>,
}

impl SelfCheckReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.results
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.name.as_str())
            .collect()
    }
}

impl fmt::Display for SelfCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            writeln!(
                f,
                "{} {:<36} {} [{:.0?}]",
                if r.passed { "PASS" } else { "FAIL" },
                r.name,
                r.detail,
                r.elapsed
            )?;
        }
        let failed = self.failures().len();
        write!(f, "{} checks, {} failed", self.results.len(), failed)
    }
}

pub fn run_checks(checks: &[Check]) -> SelfCheckReport {
    SelfCheckReport {
        results: checks.iter().map(Check::run).collect(),
    }
}

pub fn run_all() -> SelfCheckReport {
    run_checks(&standard_checks())
}

/// Projects a non-scalar output onto fixed pseudo-random weights so every
/// output element contributes to the checked scalar.
fn project(tape: &mut Tape, y: Var) -> Result<Var> {
    if tape.value(y).is_scalar() {
        return Ok(y);
    }
    let w = Tensor::from_fn(tape.shape(y).to_vec(), |i| {
        ((i as f64 * 0.618_033_988_7).fract() - 0.5) * 2.0
    });
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Like [`random`] but bounded away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    random(shape, seed, -1.0, 1.0).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
}

/// Gradient check of `f` over every element of `inputs`.
pub fn grad_check(
    name: &str,
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Clone + 'static,
) -> Check {
    Check::new(format!("grad/{name}"), move || {
        let g = f.clone();
        let r = check_gradients(
            move |t, v| {
                let y = g(t, v)?;
                project(t, y)
            },
            &inputs,
            &[],
            STEP,
        )?;
        Ok(Verdict::within(r.max_rel_error, GRAD_TOLERANCE, "max rel err"))
    })
}

fn op_checks() -> Vec<Check> {
    let m = |s: &[usize], k| random(s, k, -1.0, 1.0);
    let pos = |s: &[usize], k| random(s, k, 0.2, 1.5);
    vec![
        grad_check("add", vec![m(&[3, 4], 1), m(&[3, 4], 2)], |t, v| t.add(v[0], v[1])),
        grad_check("sub", vec![m(&[3, 4], 3), m(&[3, 4], 4)], |t, v| t.sub(v[0], v[1])),
        grad_check("mul", vec![m(&[3, 4], 5), m(&[3, 4], 6)], |t, v| t.mul(v[0], v[1])),
        grad_check("scale", vec![m(&[5], 7)], |t, v| Ok(t.scale(v[0], -1.7))),
        grad_check("add_scalar", vec![m(&[5], 8)], |t, v| Ok(t.add_scalar(v[0], 0.3))),
        grad_check("relu", vec![away_from_zero(&[12], 9)], |t, v| Ok(t.relu(v[0]))),
        grad_check("leaky_relu", vec![away_from_zero(&[12], 10)], |t, v| {
            Ok(t.leaky_relu(v[0], 0.2))
        }),
        grad_check("sigmoid", vec![m(&[8], 11)], |t, v| Ok(t.sigmoid(v[0]))),
        grad_check("exp", vec![m(&[8], 12)], |t, v| Ok(t.exp(v[0]))),
        grad_check("log", vec![pos(&[8], 13)], |t, v| t.log(v[0])),
        grad_check("square", vec![m(&[8], 14)], |t, v| Ok(t.square(v[0]))),
        grad_check("sqrt", vec![pos(&[8], 15)], |t, v| t.sqrt(v[0])),
        grad_check("gelu", vec![m(&[3, 4], 16).map(|x| 3.0 * x)], |t, v| Ok(t.gelu(v[0]))),
        grad_check("log_sigmoid", vec![m(&[8], 17).map(|x| 4.0 * x)], |t, v| {
            Ok(t.log_sigmoid(v[0]))
        }),
        grad_check("sum", vec![m(&[2, 3], 18)], |t, v| {
            let s = t.square(v[0]);
            Ok(t.sum(s))
        }),
        grad_check("mean", vec![m(&[2, 3], 19)], |t, v| {
            let s = t.square(v[0]);
            Ok(t.mean(s))
        }),
        grad_check("matmul", vec![m(&[3, 4], 20), m(&[4, 5], 21)], |t, v| {
            t.matmul(v[0], v[1])
        }),
        grad_check("batch_matmul", vec![m(&[2, 3, 4], 22), m(&[2, 4, 5], 23)], |t, v| {
            t.batch_matmul(v[0], v[1], false)
        }),
        grad_check("batch_matmul_bt", vec![m(&[2, 3, 4], 24), m(&[2, 5, 4], 25)], |t, v| {
            t.batch_matmul(v[0], v[1], true)
        }),
        grad_check("conv2d", vec![m(&[2, 5, 5], 26), m(&[3, 2, 3, 3], 27)], |t, v| {
            t.conv2d(v[0], v[1], 1, 1)
        }),
        grad_check(
            "conv2d_stride2",
            vec![m(&[2, 6, 6], 28), m(&[3, 2, 3, 3], 29)],
            |t, v| t.conv2d(v[0], v[1], 2, 1),
        ),
        grad_check(
            "conv_transpose2d",
            vec![m(&[2, 3, 3], 30), m(&[2, 3, 2, 2], 31)],
            |t, v| t.conv_transpose2d(v[0], v[1], 2),
        ),
        grad_check("add_bias", vec![m(&[3, 2, 2], 32), m(&[3], 33)], |t, v| {
            t.add_bias(v[0], v[1], 0)
        }),
        grad_check("softmax", vec![m(&[3, 4], 34).map(|x| 2.0 * x)], |t, v| {
            t.softmax(v[0], 1)
        }),
        grad_check("softmax_axis0", vec![m(&[3, 4], 35)], |t, v| t.softmax(v[0], 0)),
        grad_check("layer_norm", vec![m(&[3, 5], 36), m(&[5], 37), m(&[5], 38)], |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        grad_check("reshape", vec![m(&[2, 6], 39)], |t, v| {
            let r = t.reshape(v[0], &[3, 4])?;
            Ok(t.square(r))
        }),
        grad_check("permute", vec![m(&[2, 3, 4], 40)], |t, v| {
            let r = t.permute(v[0], &[2, 0, 1])?;
            Ok(t.square(r))
        }),
        grad_check("concat", vec![m(&[2, 3], 41), m(&[1, 3], 42)], |t, v| {
            let c = t.concat(&[v[0], v[1]], 0)?;
            Ok(t.square(c))
        }),
        grad_check("upsample_nearest", vec![m(&[2, 3, 3], 43)], |t, v| {
            let u = t.upsample_nearest(v[0], 2)?;
            Ok(t.square(u))
        }),
        grad_check("crop", vec![m(&[2, 5, 5], 44)], |t, v| {
            let c = t.crop(v[0], Rect::new(1, 2, 3, 2))?;
            Ok(t.square(c))
        }),
        grad_check("window_partition", vec![m(&[2, 4, 4], 45)], |t, v| {
            let w = window_partition(t, v[0], 2)?;
            let s = t.square(w);
            window_reverse(t, s, 2, 4, 4)
        }),
        mhsa_grad_check(),
    ]
}

fn mhsa_grad_check() -> Check {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    let w = MhsaWeights::new(
        &mut Init {
            store: &mut store,
            rng: &mut rng,
        },
        "attn",
        8,
        2,
    )
    .expect("2 divides 8");
    let mut inputs = vec![random(&[5, 8], 47, -1.0, 1.0)];
    inputs.extend(store.tensors().iter().cloned());
    grad_check("mhsa", inputs, move |t, v| {
        let p = Bound::from_vars(v[1..].to_vec());
        mhsa(t, &p, &w, v[0])
    })
}

/// Gradient check of the full generator on a `3×16×16` input at 10 randomly
/// chosen parameter scalars.
pub fn generator_grad_check() -> Check {
    Check::new("grad/generator", || {
        let cfg = GeneratorConfig {
            train_height: 16,
            train_width: 16,
            ..GeneratorConfig::default()
        };
        let g = Generator::init(cfg, 7)?;
        let mut inputs = vec![random(&[3, 16, 16], 48, 0.0, 1.0)];
        inputs.extend(g.params().tensors().iter().cloned());
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let total = g.num_params();
        let probes: Vec<(usize, usize)> = (0..10)
            .map(|_| {
                let mut k = rng.random_range(0..total);
                let mut input = 1;
                while k >= inputs[input].numel() {
                    k -= inputs[input].numel();
                    input += 1;
                }
                (input, k)
            })
            .collect();
        let r = check_gradients(
            |t, v| {
                let p = Bound::from_vars(v[1..].to_vec());
                let y = g.forward(t, &p, v[0])?;
                project(t, y)
            },
            &inputs,
            &probes,
            STEP,
        )?;
        Ok(Verdict::within(r.max_rel_error, GRAD_TOLERANCE, "max rel err"))
    })
}

fn partition_roundtrip_check() -> Check {
    Check::new("window/partition-roundtrip", || {
        for (k, s) in [2usize, 4, 8].into_iter().enumerate() {
            let x = random(&[3, 2 * s, 3 * s], 50 + k as u64, -1.0, 1.0);
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let w = window_partition(&mut t, v, s)?;
            let back = window_reverse(&mut t, w, s, 2 * s, 3 * s)?;
            if t.value(back) != &x {
                return Ok(Verdict {
                    passed: false,
                    detail: format!("roundtrip differs at s={s}"),
                });
            }
        }
        Ok(Verdict {
            passed: true,
            detail: "exact for s in {2,4,8}".into(),
        })
    })
}

/// Explicit per-head loop over `[L, d]` tokens.
fn mhsa_loop(x: &Tensor, w: [&Tensor; 4], heads: usize) -> Tensor {
    let [l, d] = x.shape()[..] else { unreachable!() };
    let hd = d / heads;
    let lin = |w: &Tensor| {
        Tensor::from_fn([l, d], |i| {
            let (r, c) = (i / d, i % d);
            (0..d).map(|k| x.get(&[r, k]) * w.get(&[k, c])).sum()
        })
    };
    let (q, k, v) = (lin(w[0]), lin(w[1]), lin(w[2]));
    let mut concat = Tensor::zeros([l, d]);
    for h in 0..heads {
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|j| {
                    (0..hd)
                        .map(|c| q.get(&[i, h * hd + c]) * k.get(&[j, h * hd + c]))
                        .sum::<f64>()
                        / (hd as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..hd {
                let val = (0..l).map(|j| e[j] / z * v.get(&[j, h * hd + c])).sum();
                concat.set(&[i, h * hd + c], val);
            }
        }
    }
    Tensor::from_fn([l, d], |i| {
        let (r, c) = (i / d, i % d);
        (0..d).map(|k| concat.get(&[r, k]) * w[3].get(&[k, c])).sum()
    })
}

fn attention_oracle_check() -> Check {
    Check::new("attention/per-head-oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let heads = [1usize, 2, 4][rng.random_range(0..3)];
            let d = heads * rng.random_range(1..=16 / heads);
            let l = rng.random_range(1..=8);
            let mut store = ParamStore::new();
            let w = MhsaWeights::new(
                &mut Init {
                    store: &mut store,
                    rng: &mut rng,
                },
                "a",
                d,
                heads,
            )?;
            let x = Tensor::from_fn([l, d], |_| rng.random_range(-1.0..1.0));
            let mut t = Tape::new();
            let p = store.bind(&mut t, false);
            let xv = t.constant(x.clone());
            let y = mhsa(&mut t, &p, &w, xv)?;
            let ws = [w.w_q, w.w_k, w.w_v, w.w_o].map(|id| store.get(id));
            worst = worst.max(t.value(y).max_abs_diff(&mhsa_loop(&x, ws, heads)));
        }
        Ok(Verdict::within(worst, 1e-10, "max abs diff"))
    })
}

fn scalar_of(f: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f64> {
    let mut t = Tape::new();
    let v = f(&mut t)?;
    Ok(t.value(v).item())
}

fn loss_oracle_check() -> Check {
    Check::new("losses/closed-form", || {
        let a = random(&[3, 8, 8], 70, 0.0, 0.8);
        let region = Rect::new(1, 2, 4, 5);
        let lum_same = scalar_of(|t| {
            let (i, k) = (t.constant(a.clone()), t.constant(a.clone()));
            luminance_consistency_loss(t, i, k, region, None)
        })?;
        let lum_offset = scalar_of(|t| {
            let i = t.constant(a.map(|v| v + 0.1));
            let k = t.constant(a.clone());
            luminance_consistency_loss(t, i, k, region, None)
        })?;
        let zeros = Tensor::zeros([4]);
        let d0 = scalar_of(|t| {
            let (r, f) = (t.constant(zeros.clone()), t.constant(zeros.clone()));
            Ok(discriminator_loss(t, r, f))
        })?;
        let g0 = scalar_of(|t| {
            let f = t.constant(zeros.clone());
            Ok(generator_adversarial_loss(t, f, false))
        })?;
        let id = scalar_of(|t| {
            let x = t.constant(a.clone());
            let g = t.constant(a.map(|v| v + 0.2));
            identity_invariant_loss(t, x, g, false)
        })?;
        let ln2 = std::f64::consts::LN_2;
        let err = [
            lum_same.abs(),
            (lum_offset - 0.01).abs(),
            (d0 - 2.0 * ln2).abs(),
            (g0 - ln2).abs(),
            (id - 0.04).abs(),
        ]
        .into_iter()
        .fold(0.0, f64::max);
        Ok(Verdict::within(err, 1e-12, "max abs err"))
    })
}

fn mixing_check() -> Check {
    Check::new("mixing/interval", || {
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let i_in = random(&[3, 16, 16], 81, 0.0, 1.0);
        let i_out = random(&[3, 16, 16], 82, 0.0, 1.0);
        for _ in 0..100 {
            let m = mix_images(&i_in, &i_out, &mut rng)?;
            for (idx, &v) in m.image.data().iter().enumerate() {
                let (r, c) = (idx / 16 % 16, idx % 16);
                let (a, b) = (i_in.data()[idx], i_out.data()[idx]);
                let ok = if m.region.contains(r, c) {
                    v >= a.min(b) - 1e-15 && v <= a.max(b) + 1e-15
                } else {
                    v == a
                };
                if !ok {
                    return Ok(Verdict {
                        passed: false,
                        detail: format!("pixel {idx} out of range for region {:?}", m.region),
                    });
                }
            }
        }
        Ok(Verdict {
            passed: true,
            detail: "100 draws inside the pointwise interval".into(),
        })
    })
}

fn metric_oracle_check() -> Check {
    Check::new("metrics/psnr-ssim", || {
        let a = random(&[3, 16, 16], 90, 0.0, 0.9);
        let err = (psnr(&a, &a.map(|v| v + 0.1))? - 20.0)
            .abs()
            .max((ssim(&a, &a)? - 1.0).abs());
        Ok(Verdict::within(err, 1e-9, "max abs err"))
    })
}

pub fn standard_checks() -> Vec<Check> {
    let mut checks = op_checks();
    checks.push(generator_grad_check());
    checks.push(partition_roundtrip_check());
    checks.push(attention_oracle_check());
    checks.push(loss_oracle_check());
    checks.push(mixing_check());
    checks.push(metric_oracle_check());
    checks
}

/// Fault-injection fixture: a square op whose backward rule returns `3x`
/// instead of `2x`. Its gradient check must fail.
pub fn corrupted_backward_check() -> Check {
    grad_check("corrupted-square", vec![random(&[6], 99, -1.0, 1.0)], |t, v| {
        let x = t.value(v[0]).clone();
        let y = x.map(|a| a * a);
        Ok(t.custom(
            &[v[0]],
            y,
            Box::new(|inputs, _, g| vec![inputs[0].data().iter().zip(g).map(|(x, g)| 3.0 * x * g).collect()]),
        ))
    })
}
