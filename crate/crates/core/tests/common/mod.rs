//! Independent reference implementations shared by integration tests.
#![allow(dead_code)]

use msatr_core::Tensor;

/// Per-head loop: project, score every query-key pair, softmax by hand,
/// weight the values, concatenate and project.
pub fn mhsa_reference(x: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor, wo: &Tensor, heads: usize) -> Tensor {
    let (l, d) = (x.shape()[0], x.shape()[1]);
    let hd = d / heads;
    let proj = |w: &Tensor| -> Vec<Vec<f64>> {
        (0..l)
            .map(|i| {
                (0..d)
                    .map(|j| (0..d).map(|k| x.get(&[i, k]) * w.get(&[k, j])).sum())
                    .collect()
            })
            .collect()
    };
    let (q, k, v) = (proj(wq), proj(wk), proj(wv));
    let mut cat = vec![vec![0.0; d]; l];
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..l {
            let logits: Vec<f64> = (0..l)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let top = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|a| (a - top).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                cat[i][c] = (0..l).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    Tensor::from_fn([l, d], |idx| {
        let (i, j) = (idx / d, idx % d);
        (0..d).map(|k| cat[i][k] * wo.get(&[k, j])).sum()
    })
}

/// SSIM with full 2-D Gaussian weights evaluated per window, no separable
/// filtering.
pub fn ssim_reference(a: &Tensor, b: &Tensor) -> f64 {
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut g = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.0001, 0.0009);
    let mut acc = 0.0;
    for ch in 0..c {
        let mut sum = 0.0;
        let mut count = 0;
        for r in 0..=h - 11 {
            for col in 0..=w - 11 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = g[i][j] / total;
                        let x = a.get(&[ch, r + i, col + j]);
                        let y = b.get(&[ch, r + i, col + j]);
                        mx += wt * x;
                        my += wt * y;
                        sxx += wt * x * x;
                        syy += wt * y * y;
                        sxy += wt * x * y;
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        acc += sum / count as f64;
    }
    acc / c as f64
}
