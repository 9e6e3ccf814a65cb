//! PSNR, SSIM and the repeated-enhancement exposure protocol.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::generator::Enhancer;
use crate::tensor::Tensor;

/// Reported for identical images (and capped there otherwise).
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// A pixel counts as saturated when its brightest channel exceeds this.
pub const SATURATION_LEVEL: f64 = 0.95;

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("mse", a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.numel() as f64)
}

/// `10·log10(1/MSE)` for signals in `[0, 1]`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Valid-mode separable Gaussian filter of one `h×w` plane.
fn blur(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        let src = &plane[r * w..(r + 1) * w];
        for c in 0..ow {
            rows[r * ow + c] = k.iter().zip(&src[c..c + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = k.iter().enumerate().map(|(i, a)| a * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid 11×11 Gaussian windows, per channel, then
/// averaged over channels. Inputs are `[C, H, W]` with both sides ≥ 11.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let [c, h, w] = a.shape()[..] else {
        return Err(Error::Contract(format!("ssim expects [C,H,W], got {:?}", a.shape())));
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Contract(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let k = gaussian_taps();
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let x = &a.data()[ch * plane..(ch + 1) * plane];
        let y = &b.data()[ch * plane..(ch + 1) * plane];
        let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect() };
        let mx = blur(x, h, w, &k);
        let my = blur(y, h, w, &k);
        let mxx = blur(&prod(&|p, _| p * p), h, w, &k);
        let myy = blur(&prod(&|_, q| q * q), h, w, &k);
        let mxy = blur(&prod(&|p, q| p * q), h, w, &k);
        let mut s = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cov = mxy[i] - ux * uy;
            s += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += s / mx.len() as f64;
    }
    Ok(total / c as f64)
}

/// Rec. 601 luma of a `[3, H, W]` image, averaged over pixels.
pub fn mean_luminance(x: &Tensor) -> Result<f64> {
    let (r, g, b) = rgb_planes(x)?;
    let n = r.len() as f64;
    Ok(r.iter()
        .zip(g)
        .zip(b)
        .map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b)
        .sum::<f64>()
        / n)
}

/// Fraction of pixels whose brightest channel exceeds [`SATURATION_LEVEL`].
pub fn saturation_fraction(x: &Tensor) -> Result<f64> {
    let (r, g, b) = rgb_planes(x)?;
    let hot = r
        .iter()
        .zip(g)
        .zip(b)
        .filter(|((r, g), b)| r.max(**g).max(**b) > SATURATION_LEVEL)
        .count();
    Ok(hot as f64 / r.len() as f64)
}

fn rgb_planes(x: &Tensor) -> Result<(&[f64], &[f64], &[f64])> {
    let [3, h, w] = x.shape()[..] else {
        return Err(Error::Contract(format!(
            "expected a [3,H,W] image, got {:?}",
            x.shape()
        )));
    };
    let p = h * w;
    let d = x.data();
    Ok((&d[..p], &d[p..2 * p], &d[2 * p..]))
}

/// Statistics after each of `n` successive enhancements.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftSeries {
    pub mean_luminance: Vec<f64>,
    pub saturation: Vec<f64>,
}

impl DriftSeries {
    /// Saturation added by the repeated passes beyond the first.
    pub fn saturation_growth(&self) -> f64 {
        match (self.saturation.first(), self.saturation.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        }
    }
}

/// Feeds `x` through `g` `n` times, recording mean luminance and saturation
/// fraction after every pass.
pub fn exposure_stability(g: &impl Enhancer, x: &Tensor, n: usize) -> Result<DriftSeries> {
    if n == 0 {
        return Err(Error::Contract("exposure stability needs at least one pass".into()));
    }
    let mut series = DriftSeries {
        mean_luminance: Vec::with_capacity(n),
        saturation: Vec::with_capacity(n),
    };
    let mut cur = x.clone();
    for _ in 0..n {
        cur = g.enhance(&cur)?;
        series.mean_luminance.push(mean_luminance(&cur)?);
        series.saturation.push(saturation_fraction(&cur)?);
    }
    Ok(series)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Optional repeated-enhancement series per image.
    pub drift: Vec<(String, DriftSeries)>,
}

pub const REPORT_HEADER: &str = "name\tpsnr_db\tssim";

impl EvalReport {
    pub fn mean_psnr(&self) -> Option<f64> {
        mean(self.rows.iter().map(|r| r.psnr_db))
    }

    pub fn mean_ssim(&self) -> Option<f64> {
        mean(self.rows.iter().map(|r| r.ssim))
    }

    /// Header, one row per image, then a `# mean` summary line.
    pub fn to_tsv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{:.6}\t{:.6}", r.name, r.psnr_db, r.ssim);
        }
        let f = |v: Option<f64>| v.map_or_else(|| "NA".to_owned(), |v| format!("{v:.6}"));
        let _ = writeln!(
            s,
            "# mean\t{}\t{}\tn={}",
            f(self.mean_psnr()),
            f(self.mean_ssim()),
            self.rows.len()
        );
        for (name, d) in &self.drift {
            let join = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",");
            let _ = writeln!(
                s,
                "# drift\t{name}\tluminance={}\tsaturation={}",
                join(&d.mean_luminance),
                join(&d.saturation)
            );
        }
        s
    }
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Enhances each low image and scores it against its reference.
pub fn evaluate<'a>(
    g: &impl Enhancer,
    pairs: impl IntoIterator<Item = (&'a str, &'a Tensor, &'a Tensor)>,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for (name, low, reference) in pairs {
        let out = g.enhance(low)?;
        report.rows.push(EvalRow {
            name: name.to_owned(),
            psnr_db: psnr(&out, reference)?,
            ssim: ssim(&out, reference)?,
        });
    }
    Ok(report)
}
