//! Random-region mixing of an input image with its enhancement.

use rand::distr::Open01;
use rand::Rng;

use crate::autograd::Rect;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Mix {
    pub image: Tensor,
    pub region: Rect,
    pub alpha: f64,
}

/// Side lengths allowed for a mixing region over an axis of length `n`:
/// a quarter to three quarters of the axis, rounded inward.
pub fn side_range(n: usize) -> (usize, usize) {
    let lo = n.div_ceil(4).max(1);
    let hi = (3 * n / 4).max(lo).min(n);
    (lo.min(hi), hi)
}

/// Region with each side uniform over [`side_range`] and a uniform offset.
pub fn sample_region(rng: &mut impl Rng, height: usize, width: usize) -> Rect {
    let (hl, hh) = side_range(height);
    let (wl, wh) = side_range(width);
    let rh = rng.random_range(hl..=hh);
    let rw = rng.random_range(wl..=wh);
    let top = rng.random_range(0..=height - rh);
    let left = rng.random_range(0..=width - rw);
    Rect::new(top, left, rh, rw)
}

/// `α·I_out + (1−α)·I_in` inside `region`, `I_in` elsewhere, on `[C,H,W]`.
pub fn mix_with(i_in: &Tensor, i_out: &Tensor, region: Rect, alpha: f64) -> Result<Tensor> {
    if i_in.shape() != i_out.shape() {
        return Err(Error::Contract(format!(
            "cannot mix images of shapes {:?} and {:?}",
            i_in.shape(),
            i_out.shape()
        )));
    }
    let [_, h, w] = i_in.shape()[..] else {
        return Err(Error::Contract(format!(
            "expected [C,H,W] images, got {:?}",
            i_in.shape()
        )));
    };
    if !region.fits(h, w) {
        return Err(Error::Contract(format!("mixing region {region:?} exceeds {h}x{w}")));
    }
    let mut out = i_in.clone();
    let (src, dst) = (i_out.data(), out.data_mut());
    for (i, d) in dst.iter_mut().enumerate() {
        let (r, c) = (i / w % h, i % w);
        if region.contains(r, c) {
            *d = alpha * src[i] + (1.0 - alpha) * *d;
        }
    }
    Ok(out)
}

/// Draws a region, then `α ~ U(0, 1)` (open interval), and mixes.
pub fn mix_images(i_in: &Tensor, i_out: &Tensor, rng: &mut impl Rng) -> Result<Mix> {
    let [_, h, w] = i_in.shape()[..] else {
        return Err(Error::Contract(format!(
            "expected [C,H,W] images, got {:?}",
            i_in.shape()
        )));
    };
    let region = sample_region(rng, h, w);
    let alpha: f64 = rng.sample(Open01);
    let image = mix_with(i_in, i_out, region, alpha)?;
    Ok(Mix { image, region, alpha })
}
