//! Window partitioning, patch embedding, positional encoding and patch
//! recovery: the layout machinery shared by both attention branches.
//!
//! Windows are numbered row-major over the window grid, and the pixels of a
//! window are flattened row-major into its token sequence. Window `k` covers
//! the block starting at `(k / num_w · s, k % num_w · s)`.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Conv};

/// Side length of the square patches tokenized by the global branch.
pub const PATCH_SIZE: usize = 8;

/// Grid of `s×s` windows tiling a `[C, H, W]` feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLayout {
    pub window_size: usize,
    pub num_windows_h: usize,
    pub num_windows_w: usize,
    pub channels: usize,
}

impl WindowLayout {
    pub fn new(channels: usize, height: usize, width: usize, window_size: usize) -> Result<Self> {
        let partition_err = Error::Partition {
            window: window_size,
            height,
            width,
        };
        if window_size == 0 || height % window_size != 0 || width % window_size != 0 {
            return Err(partition_err);
        }
        Ok(Self {
            window_size,
            num_windows_h: height / window_size,
            num_windows_w: width / window_size,
            channels,
        })
    }

    pub fn num_windows(&self) -> usize {
        self.num_windows_h * self.num_windows_w
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window_size * self.window_size
    }

    pub fn height(&self) -> usize {
        self.num_windows_h * self.window_size
    }

    pub fn width(&self) -> usize {
        self.num_windows_w * self.window_size
    }

    /// Window index and in-window token index of pixel `(row, col)`.
    pub fn locate(&self, row: usize, col: usize) -> (usize, usize) {
        let s = self.window_size;
        ((row / s) * self.num_windows_w + col / s, (row % s) * s + col % s)
    }
}

fn chw(tape: &Tape, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match *tape.shape(x) {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::dim(op, format!("expected [C,H,W], got {s:?}"))),
    }
}

/// `[C,H,W] → [num_windows, s·s, C]`.
pub fn window_partition(tape: &mut Tape, x: Var, s: usize) -> Result<Var> {
    let (c, h, w) = chw(tape, x, "window_partition")?;
    let l = WindowLayout::new(c, h, w, s)?;
    let y = tape.reshape(x, &[c, l.num_windows_h, s, l.num_windows_w, s])?;
    let y = tape.permute(y, &[1, 3, 2, 4, 0])?;
    tape.reshape(y, &[l.num_windows(), s * s, c])
}

/// Exact inverse of [`window_partition`]: `[num_windows, s·s, C] → [C,H,W]`.
pub fn window_reverse(tape: &mut Tape, windows: Var, s: usize, height: usize, width: usize) -> Result<Var> {
    let shape = tape.shape(windows).to_vec();
    let mismatch = Error::Partition {
        window: s,
        height,
        width,
    };
    let [n, tokens, c] = shape[..] else {
        return Err(Error::dim(
            "window_reverse",
            format!("expected [N, s*s, C], got {shape:?}"),
        ));
    };
    let l = WindowLayout::new(c, height, width, s)?;
    if n != l.num_windows() || tokens != s * s {
        return Err(mismatch);
    }
    let y = tape.reshape(windows, &[l.num_windows_h, l.num_windows_w, s, s, c])?;
    let y = tape.permute(y, &[4, 0, 2, 1, 3])?;
    tape.reshape(y, &[c, height, width])
}

/// Tokenizes `[3,H,W]` into `[(H/8)·(W/8), d]` with an 8×8, stride-8
/// convolution (`conv.w: [d,3,8,8]`).
pub fn patch_embed(tape: &mut Tape, p: &Bound, conv: &Conv, x: Var) -> Result<Var> {
    let (_, h, w) = chw(tape, x, "patch_embed")?;
    if h % PATCH_SIZE != 0 || w % PATCH_SIZE != 0 {
        return Err(Error::dim(
            "patch_embed",
            format!("{h}x{w} is not divisible into {PATCH_SIZE}x{PATCH_SIZE} patches"),
        ));
    }
    let y = conv.forward(tape, p, x)?;
    let d = tape.shape(y)[0];
    let y = tape.reshape(y, &[d, (h / PATCH_SIZE) * (w / PATCH_SIZE)])?;
    tape.permute(y, &[1, 0])
}

/// Adds a learnable per-token offset. The table is sized for one sequence
/// length, so inputs of another resolution are rejected.
pub fn add_positional_encoding(tape: &mut Tape, z: Var, pos: Var) -> Result<Var> {
    if tape.shape(z) != tape.shape(pos) {
        return Err(Error::Config(format!(
            "token sequence {:?} does not match positional table {:?}; inference resolution must equal the training resolution",
            tape.shape(z),
            tape.shape(pos)
        )));
    }
    tape.add(z, pos)
}

pub const RECOVER_SLOPE: f64 = 0.2;

/// Maps `[L, d]` tokens back to a `[C, H, W]` feature map on an
/// `grid_h × grid_w` patch grid: three rounds of ×2 nearest upsampling,
/// 3×3 convolution and leaky ReLU.
pub fn patch_recover(tape: &mut Tape, p: &Bound, stages: &[Conv], z: Var, grid_h: usize, grid_w: usize) -> Result<Var> {
    let [l, d] = tape.shape(z)[..] else {
        return Err(Error::dim(
            "patch_recover",
            format!("expected [L, d], got {:?}", tape.shape(z)),
        ));
    };
    if l != grid_h * grid_w {
        return Err(Error::Config(format!(
            "{l} tokens cannot be arranged on the configured {grid_h}x{grid_w} patch grid"
        )));
    }
    let y = tape.permute(z, &[1, 0])?;
    let mut y = tape.reshape(y, &[d, grid_h, grid_w])?;
    for stage in stages {
        y = tape.upsample_nearest(y, 2)?;
        y = stage.forward(tape, p, y)?;
        y = tape.leaky_relu(y, RECOVER_SLOPE);
    }
    Ok(y)
}
