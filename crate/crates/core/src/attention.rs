//! Multi-head self-attention, pre-norm transformer blocks, and the two
//! feature branches of the generator.
//!
//! The local branch embeds pixels with a 1×1 convolution and runs one window
//! attention block per scale, window sizes `2, 4, 8, ...` (no shifting); its
//! output is the running sum of every layer's output. The global branch
//! tokenizes 8×8 patches, adds a learned positional table, runs two serial
//! transformer blocks over the whole sequence and upsamples back to full
//! resolution.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Conv, Init, LayerNormParams, Linear, ParamId};
use crate::window::{
    add_positional_encoding, patch_embed, patch_recover, window_partition, window_reverse, PATCH_SIZE,
};

#[derive(Debug, Clone, Copy)]
pub struct MhsaWeights {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub num_heads: usize,
    pub dim: usize,
}

impl MhsaWeights {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, num_heads: usize) -> Result<Self> {
        if num_heads == 0 || dim % num_heads != 0 {
            return Err(Error::Config(format!(
                "{num_heads} heads do not divide dimension {dim}"
            )));
        }
        let mut proj = |n: &str| init.fan_in_uniform(format!("{name}.{n}"), &[dim, dim], dim);
        Ok(Self {
            w_q: proj("w_q"),
            w_k: proj("w_k"),
            w_v: proj("w_v"),
            w_o: proj("w_o"),
            num_heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }
}

/// Attention output together with the per-head attention weights
/// (`[batch·heads, L, L]`, each row summing to one).
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub output: Var,
    pub weights: Var,
}

/// Multi-head self-attention over `batch` independent sequences stored as
/// `[batch·L, d]` rows. Per head: `softmax(Q_h K_hᵀ / sqrt(d_h)) V_h`; heads
/// are concatenated and projected by `W_o`.
pub fn multi_head_attention(
    tape: &mut Tape,
    p: &Bound,
    w: &MhsaWeights,
    tokens: Var,
    batch: usize,
) -> Result<Attention> {
    let [rows, d] = tape.shape(tokens)[..] else {
        return Err(Error::Config(format!(
            "attention expects [N, d] tokens, got {:?}",
            tape.shape(tokens)
        )));
    };
    if d != w.dim || batch == 0 || rows % batch != 0 {
        return Err(Error::Config(format!(
            "attention over {rows}x{d} tokens in {batch} sequences does not match weights of dimension {}",
            w.dim
        )));
    }
    let (len, heads, hd) = (rows / batch, w.num_heads, w.head_dim());
    let split = |tape: &mut Tape, x: Var| -> Result<Var> {
        let x = tape.reshape(x, &[batch, len, heads, hd])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[batch * heads, len, hd])
    };
    let q = tape.matmul(tokens, p[w.w_q])?;
    let q = split(tape, q)?;
    let k = tape.matmul(tokens, p[w.w_k])?;
    let k = split(tape, k)?;
    let v = tape.matmul(tokens, p[w.w_v])?;
    let v = split(tape, v)?;

    let scores = tape.batch_matmul(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (hd as f64).sqrt());
    let weights = tape.softmax(scores, 2)?;
    let out = tape.batch_matmul(weights, v, false)?;
    let out = tape.reshape(out, &[batch, heads, len, hd])?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    let out = tape.reshape(out, &[rows, d])?;
    let output = tape.matmul(out, p[w.w_o])?;
    Ok(Attention { output, weights })
}

/// Self-attention over a single `[L, d]` sequence.
pub fn mhsa(tape: &mut Tape, p: &Bound, w: &MhsaWeights, z: Var) -> Result<Var> {
    multi_head_attention(tape, p, w, z, 1).map(|a| a.output)
}

#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub const MLP_RATIO: usize = 4;

/// Pre-norm transformer block: `x + MSA(LN(x))`, then `x + MLP(LN(x))`, with a
/// `d → 4d → d` GELU MLP. Used both inside windows and over global tokens.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: LayerNormParams,
    pub attn: MhsaWeights,
    pub norm2: LayerNormParams,
    pub mlp: Mlp,
}

pub type WindowBlockWeights = TransformerBlock;

impl TransformerBlock {
    pub fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNormParams::new(init, &format!("{name}.norm1"), dim),
            attn: MhsaWeights::new(init, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNormParams::new(init, &format!("{name}.norm2"), dim),
            mlp: Mlp {
                fc1: Linear::new(init, &format!("{name}.mlp.fc1"), dim, MLP_RATIO * dim),
                fc2: Linear::new(init, &format!("{name}.mlp.fc2"), MLP_RATIO * dim, dim),
            },
        })
    }

    /// Applies the block to `batch` sequences stored as `[batch·L, d]` rows.
    pub fn forward_tokens(&self, tape: &mut Tape, p: &Bound, x: Var, batch: usize) -> Result<Var> {
        let h = self.norm1.forward(tape, p, x)?;
        let a = multi_head_attention(tape, p, &self.attn, h, batch)?.output;
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, p, x)?;
        let h = self.mlp.fc1.forward(tape, p, h)?;
        let h = tape.gelu(h);
        let h = self.mlp.fc2.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

/// Window attention on `[C,H,W]`: every `s×s` window attends only to itself.
pub fn window_attention_block(tape: &mut Tape, p: &Bound, w: &TransformerBlock, x: Var, s: usize) -> Result<Var> {
    let [c, h, wd] = tape.shape(x)[..] else {
        return Err(Error::dim(
            "window_attention_block",
            format!("expected [C,H,W], got {:?}", tape.shape(x)),
        ));
    };
    let windows = window_partition(tape, x, s)?;
    let n = tape.shape(windows)[0];
    let tokens = tape.reshape(windows, &[n * s * s, c])?;
    let y = w.forward_tokens(tape, p, tokens, n)?;
    let y = tape.reshape(y, &[n, s * s, c])?;
    window_reverse(tape, y, s, h, wd)
}

#[derive(Debug, Clone)]
pub struct LocalBranchWeights {
    pub embed: Conv,
    pub blocks: Vec<TransformerBlock>,
    pub window_sizes: Vec<usize>,
}

impl LocalBranchWeights {
    pub fn new(init: &mut Init<'_>, dim: usize, heads: usize, layers: usize) -> Result<Self> {
        let embed = Conv::new(init, "local.embed", 3, dim, 1, 1, 0);
        let window_sizes: Vec<usize> = (1..=layers).map(|l| 1 << l).collect();
        let blocks = (0..layers)
            .map(|i| TransformerBlock::new(init, &format!("local.block{i}"), dim, heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            embed,
            blocks,
            window_sizes,
        })
    }
}

/// `[3,H,W] → [C_l,H,W]`: 1×1 embedding, then window blocks at sizes
/// `2, 4, 8, ...` in sequence, returning the sum of all block outputs.
pub fn local_branch(tape: &mut Tape, p: &Bound, w: &LocalBranchWeights, x: Var) -> Result<Var> {
    let mut feat = w.embed.forward(tape, p, x)?;
    let mut acc: Option<Var> = None;
    for (block, &s) in w.blocks.iter().zip(&w.window_sizes) {
        feat = window_attention_block(tape, p, block, feat, s)?;
        acc = Some(match acc {
            None => feat,
            Some(a) => tape.add(a, feat)?,
        });
    }
    acc.ok_or_else(|| Error::Config("local branch has no layers".into()))
}

pub const GLOBAL_BLOCKS: usize = 2;
pub const RECOVER_STAGES: usize = 3;

#[derive(Debug, Clone)]
pub struct GlobalBranchWeights {
    pub patch: Conv,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub recover: Vec<Conv>,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl GlobalBranchWeights {
    pub fn new(
        init: &mut Init<'_>,
        embed_dim: usize,
        out_dim: usize,
        heads: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if height % PATCH_SIZE != 0 || width % PATCH_SIZE != 0 {
            return Err(Error::Config(format!(
                "{height}x{width} is not a multiple of {PATCH_SIZE}"
            )));
        }
        let (grid_h, grid_w) = (height / PATCH_SIZE, width / PATCH_SIZE);
        let patch = Conv::new(init, "global.patch", 3, embed_dim, PATCH_SIZE, PATCH_SIZE, 0);
        let pos = init.normal("global.pos".into(), &[grid_h * grid_w, embed_dim], 0.02);
        let blocks = (0..GLOBAL_BLOCKS)
            .map(|i| TransformerBlock::new(init, &format!("global.block{i}"), embed_dim, heads))
            .collect::<Result<_>>()?;
        let recover = (0..RECOVER_STAGES)
            .map(|i| {
                let c_in = if i == 0 { embed_dim } else { out_dim };
                Conv::new(init, &format!("global.recover{i}"), c_in, out_dim, 3, 1, 1)
            })
            .collect();
        Ok(Self {
            patch,
            pos,
            blocks,
            recover,
            grid_h,
            grid_w,
        })
    }
}

/// `[3,H,W] → [C_g,H,W]` through patch tokens with a global receptive field.
pub fn global_branch(tape: &mut Tape, p: &Bound, w: &GlobalBranchWeights, x: Var) -> Result<Var> {
    let z = patch_embed(tape, p, &w.patch, x)?;
    let mut z = add_positional_encoding(tape, z, p[w.pos])?;
    for block in &w.blocks {
        z = block.forward_tokens(tape, p, z, 1)?;
    }
    patch_recover(tape, p, &w.recover, z, w.grid_h, w.grid_w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(dim: usize, heads: usize) -> (ParamStore, TransformerBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = TransformerBlock::new(
            &mut Init {
                store: &mut store,
                rng: &mut rng,
            },
            "b",
            dim,
            heads,
        )
        .unwrap();
        (store, b)
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        assert!(matches!(MhsaWeights::new(&mut init, "a", 6, 4), Err(Error::Config(_))));
    }

    #[test]
    fn single_token_attends_to_itself() {
        let (store, b) = block(4, 2);
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let z = t.constant(Tensor::from_fn([1, 4], |i| i as f64 - 1.5));
        let a = multi_head_attention(&mut t, &p, &b.attn, z, 1).unwrap();
        assert!(t.value(a.weights).data().iter().all(|&w| w == 1.0));
        // Output is the value projection followed by W_o.
        let v = t.matmul(z, p[b.attn.w_v]).unwrap();
        let want = t.matmul(v, p[b.attn.w_o]).unwrap();
        assert!(t.value(a.output).max_abs_diff(t.value(want)) < 1e-14);
    }

    #[test]
    fn zeroed_output_projections_make_block_identity() {
        let (mut store, b) = block(4, 2);
        *store.get_mut(b.attn.w_o) = Tensor::zeros([4, 4]);
        *store.get_mut(b.mlp.fc2.w) = Tensor::zeros([16, 4]);
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let x = t.constant(Tensor::from_fn([4, 8, 8], |i| (i as f64 * 0.3).sin()));
        for s in [2, 4, 8] {
            let y = window_attention_block(&mut t, &p, &b, x, s).unwrap();
            assert_eq!(t.value(y), t.value(x));
        }
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let (store, b) = block(4, 2);
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let z = t.constant(Tensor::zeros([3, 6]));
        assert!(matches!(mhsa(&mut t, &p, &b.attn, z), Err(Error::Config(_))));
    }
}
