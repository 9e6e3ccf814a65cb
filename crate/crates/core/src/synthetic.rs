//! Deterministic synthetic scenes for smoke training and paired evaluation.
//!
//! A scene is a smooth colored background with rectangles, disks and a
//! striped texture. Its low-light version multiplies by a non-uniform
//! illumination map (dim base plus one soft spotlight), applies a gamma and
//! adds light sensor noise.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::tensor::Tensor;

pub const BUNDLED_COUNT: usize = 8;
pub const BUNDLED_SIZE: usize = 64;

const SCENE_STREAM: u64 = 0x5CE7E;
const DARK_STREAM: u64 = 0xDA2C;

fn rng_for(stream: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(k);
    rng.set_stream(stream);
    rng
}

/// Well-exposed scene number `k`, `[3, size, size]` in `[0, 1]`.
pub fn scene(k: u64, size: usize) -> Tensor {
    let mut rng = rng_for(SCENE_STREAM, k);
    let s = size as f64;
    let (c0, c1) = (color(&mut rng, 0.35, 0.8), color(&mut rng, 0.35, 0.8));
    let mut img = Tensor::from_fn([3, size, size], |i| {
        let (c, r, col) = (i / (size * size), i / size % size, i % size);
        let t = (r as f64 + col as f64) / (2.0 * s);
        c0[c] * (1.0 - t) + c1[c] * t
    });
    let shapes = rng.random_range(3..6);
    for _ in 0..shapes {
        let col = color(&mut rng, 0.1, 0.95);
        let (cy, cx) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let (ry, rx) = (rng.random_range(s / 10.0..s / 3.0), rng.random_range(s / 10.0..s / 3.0));
        let disk = rng.random_bool(0.5);
        paint(
            &mut img,
            |r, c| {
                let (dy, dx) = ((r - cy) / ry, (c - cx) / rx);
                if disk {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                }
            },
            col,
        );
    }
    let (freq, angle, amp) = (
        rng.random_range(0.2..0.6),
        rng.random_range(0.0..std::f64::consts::PI),
        rng.random_range(0.03..0.08),
    );
    let (sa, ca) = angle.sin_cos();
    let data = img.data_mut();
    for (i, v) in data.iter_mut().enumerate() {
        let (r, c) = ((i / size % size) as f64, (i % size) as f64);
        *v = (*v + amp * (freq * (r * sa + c * ca)).sin()).clamp(0.0, 1.0);
    }
    img
}

fn color(rng: &mut impl Rng, lo: f64, hi: f64) -> [f64; 3] {
    std::array::from_fn(|_| rng.random_range(lo..hi))
}

fn paint(img: &mut Tensor, inside: impl Fn(f64, f64) -> bool, color: [f64; 3]) {
    let [_, h, w] = img.shape()[..] else { unreachable!() };
    let data = img.data_mut();
    for r in 0..h {
        for c in 0..w {
            if inside(r as f64 + 0.5, c as f64 + 0.5) {
                for (ch, &v) in color.iter().enumerate() {
                    data[(ch * h + r) * w + c] = v;
                }
            }
        }
    }
}

/// Low-light rendering of `img` with illumination drawn from `k`.
pub fn darken(img: &Tensor, k: u64) -> Tensor {
    let [_, h, w] = img.shape()[..] else {
        panic!("darken expects [3,H,W], got {:?}", img.shape());
    };
    let mut rng = rng_for(DARK_STREAM, k);
    let base = rng.random_range(0.08..0.18);
    let spot = rng.random_range(0.25..0.6);
    let (cy, cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
    let sigma = rng.random_range(0.15..0.35) * h.max(w) as f64;
    let gamma = rng.random_range(1.2..1.6);
    let noise = Normal::new(0.0, 0.008).expect("positive sigma");
    let src = img.data();
    Tensor::from_fn([3, h, w], |i| {
        let (r, c) = ((i / w % h) as f64, (i % w) as f64);
        let d2 = (r - cy).powi(2) + (c - cx).powi(2);
        let light = base + spot * (-d2 / (2.0 * sigma * sigma)).exp();
        ((src[i] * light).powf(gamma) + noise.sample(&mut rng)).clamp(0.0, 1.0)
    })
}

/// Scenes `0..n` darkened: the low-light half of the bundled set.
pub fn low_light_set(n: usize, size: usize) -> Vec<Tensor> {
    (0..n as u64).map(|k| darken(&scene(k, size), k)).collect()
}

/// Scenes `n..2n`, so normal-light images never show a low-light scene.
pub fn normal_light_set(n: usize, size: usize) -> Vec<Tensor> {
    (n as u64..2 * n as u64).map(|k| scene(k, size)).collect()
}

/// `(low, reference)` pairs of held-out scenes starting at `first`.
pub fn paired_set(first: u64, n: usize, size: usize) -> Vec<(Tensor, Tensor)> {
    (first..first + n as u64)
        .map(|k| {
            let reference = scene(k, size);
            (darken(&reference, k), reference)
        })
        .collect()
}

/// Quantizes to the 8-bit grid the images would have after a PPM roundtrip.
pub fn on_8bit_grid(t: &Tensor) -> Tensor {
    ImageBuffer::from_tensor(t).expect("finite image").to_tensor()
}

/// Directory holding the bundled `low/` and `normal/` PPM sets.
pub fn bundled_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("testdata").join("synthetic")
}

/// Writes `images` as `{prefix}{k:02}.ppm` into `dir`, creating it.
pub fn write_ppm_set(dir: &Path, prefix: &str, images: &[Tensor]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (k, t) in images.iter().enumerate() {
        ImageBuffer::from_tensor(t)?.save_ppm(&dir.join(format!("{prefix}{k:02}.ppm")))?;
    }
    Ok(())
}

/// Writes the bundled set layout (`low/`, `normal/`) under `root`.
pub fn write_bundled(root: &Path) -> Result<()> {
    write_ppm_set(&root.join("low"), "low", &low_light_set(BUNDLED_COUNT, BUNDLED_SIZE))?;
    write_ppm_set(
        &root.join("normal"),
        "normal",
        &normal_light_set(BUNDLED_COUNT, BUNDLED_SIZE),
    )
}
