mod common;

use common::mhsa_reference;
use msatr_core::attention::{
    global_branch, local_branch, mhsa, multi_head_attention, window_attention_block, GlobalBranchWeights,
    LocalBranchWeights, MhsaWeights, TransformerBlock,
};
use msatr_core::params::{Conv, Init};
use msatr_core::window::{
    add_positional_encoding, patch_embed, patch_recover, window_partition, window_reverse, WindowLayout,
};
use msatr_core::{Error, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn with_init<T>(seed: u64, f: impl FnOnce(&mut Init<'_>) -> T) -> (ParamStore, T) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = f(&mut Init {
        store: &mut store,
        rng: &mut rng,
    });
    (store, t)
}

fn partition(x: &Tensor, s: usize) -> Tensor {
    let mut t = Tape::new();
    let v = t.constant(x.clone());
    let w = window_partition(&mut t, v, s).unwrap();
    t.value(w).clone()
}

fn reverse(w: &Tensor, s: usize, h: usize, wd: usize) -> Tensor {
    let mut t = Tape::new();
    let v = t.constant(w.clone());
    let y = window_reverse(&mut t, v, s, h, wd).unwrap();
    t.value(y).clone()
}

#[test]
fn first_window_holds_top_left_block() {
    let x = Tensor::from_fn([1, 4, 4], |i| i as f64);
    let w = partition(&x, 2);
    assert_eq!(w.shape(), &[4, 4, 1]);
    assert_eq!(&w.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
    assert_eq!(WindowLayout::new(3, 256, 256, 8).unwrap().num_windows(), 1024);
}

#[test]
fn reverse_zero_and_adversarial() {
    let z = Tensor::zeros([16, 4, 3]);
    assert!(reverse(&z, 2, 8, 8).data().iter().all(|&v| v == 0.0));

    let x = rand_tensor(&[3, 16, 16], 1);
    let w = partition(&x, 4);
    // Swap the first two windows before reversing.
    let per = 16 * 3;
    let mut d = w.data().to_vec();
    let (a, b) = d.split_at_mut(per);
    a.swap_with_slice(&mut b[..per]);
    let swapped = Tensor::new(w.shape().to_vec(), d).unwrap();
    assert_ne!(reverse(&swapped, 4, 16, 16), x);
}

#[test]
fn partition_rejects_non_dividing_window() {
    let mut t = Tape::new();
    let v = t.constant(Tensor::zeros([1, 12, 12]));
    assert!(matches!(window_partition(&mut t, v, 8), Err(Error::Partition { .. })));
}

#[test]
fn every_pixel_lands_in_exactly_one_window_slot() {
    for s in [2, 4, 8] {
        let l = WindowLayout::new(1, 16, 24, s).unwrap();
        let mut seen = vec![false; 16 * 24];
        for r in 0..16 {
            for c in 0..24 {
                let (w, k) = l.locate(r, c);
                let slot = w * s * s + k;
                assert!(!seen[slot]);
                seen[slot] = true;
            }
        }
        assert!(seen.iter().all(|&b| b));
        // The index map agrees with the tensor op.
        let x = Tensor::from_fn([1, 16, 24], |i| i as f64);
        let w = partition(&x, s);
        let (win, k) = l.locate(5, 13);
        assert_eq!(w.get(&[win, k, 0]), x.get(&[0, 5, 13]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn partition_reverse_roundtrip(si in 0usize..3, c in 1usize..4, gh in 1usize..4, gw in 1usize..4, seed in any::<u64>()) {
        let s = [2, 4, 8][si];
        let (h, w) = (gh * s, gw * s);
        let x = rand_tensor(&[c, h, w], seed);
        prop_assert_eq!(reverse(&partition(&x, s), s, h, w), x);
    }
}

#[test]
fn patch_embed_examples() {
    let (store, conv) = with_init(2, |i| Conv::new(i, "p", 3, 16, 8, 8, 0));
    let x = rand_tensor(&[3, 64, 64], 3);
    let mut t = Tape::new();
    let p = store.bind(&mut t, false);
    let xv = t.constant(x.clone());
    let z = patch_embed(&mut t, &p, &conv, xv).unwrap();
    assert_eq!(t.shape(z), &[64, 16]);

    // Flatten each patch and multiply by the flattened kernel.
    let w = store.get(conv.w);
    let b = store.get(conv.b);
    let mut worst: f64 = 0.0;
    for pr in 0..8 {
        for pc in 0..8 {
            for d in 0..16 {
                let mut s = b.data()[d];
                for c in 0..3 {
                    for a in 0..8 {
                        for e in 0..8 {
                            s += x.get(&[c, pr * 8 + a, pc * 8 + e]) * w.get(&[d, c, a, e]);
                        }
                    }
                }
                worst = worst.max((t.value(z).get(&[pr * 8 + pc, d]) - s).abs());
            }
        }
    }
    assert!(worst < 1e-12);

    let (mut ones, conv) = with_init(4, |i| Conv::new(i, "p", 3, 16, 8, 8, 0));
    *ones.get_mut(conv.w) = Tensor::ones([16, 3, 8, 8]);
    let mut t = Tape::new();
    let p = ones.bind(&mut t, false);
    let xv = t.constant(Tensor::zeros([3, 16, 16]));
    let z = patch_embed(&mut t, &p, &conv, xv).unwrap();
    assert!(t.value(z).data().iter().all(|&v| v == 0.0));
}

#[test]
fn positional_encoding_examples() {
    let z = rand_tensor(&[4, 8], 5);
    let mut t = Tape::new();
    let zv = t.param(z.clone());
    let pv = t.param(Tensor::zeros([4, 8]));
    let y = add_positional_encoding(&mut t, zv, pv).unwrap();
    assert_eq!(t.value(y), &z);
    let w = t.constant(rand_tensor(&[4, 8], 6));
    let l = t.mul(y, w).unwrap();
    let l = t.sum(l);
    t.backward(l).unwrap();
    assert_eq!(t.grad(zv), t.grad(pv));

    let pos = rand_tensor(&[4, 8], 7);
    let mut t = Tape::new();
    let zv = t.constant(Tensor::zeros([4, 8]));
    let pv = t.constant(pos);
    let y = add_positional_encoding(&mut t, zv, pv).unwrap();
    let rows: Vec<&[f64]> = t.value(y).data().chunks(8).collect();
    for i in 0..4 {
        for j in i + 1..4 {
            assert_ne!(rows[i], rows[j]);
        }
    }
    let wrong = t.constant(Tensor::zeros([5, 8]));
    assert!(matches!(
        add_positional_encoding(&mut t, wrong, pv),
        Err(Error::Config(_))
    ));
}

#[test]
fn patch_recover_examples() {
    let (store, stages) = with_init(8, |i| {
        (0..3)
            .map(|k| Conv::new(i, &format!("r{k}"), 16, 16, 3, 1, 1))
            .collect::<Vec<_>>()
    });
    let mut t = Tape::new();
    let p = store.bind(&mut t, false);
    let z = t.constant(rand_tensor(&[64, 16], 9));
    let y = patch_recover(&mut t, &p, &stages, z, 8, 8).unwrap();
    assert_eq!(t.shape(y), &[16, 64, 64]);
    let z0 = t.constant(Tensor::zeros([64, 16]));
    let y0 = patch_recover(&mut t, &p, &stages, z0, 8, 8).unwrap();
    assert!(t.value(y0).data().iter().all(|&v| v == 0.0));
}

#[test]
fn mhsa_matches_per_head_loop_on_50_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for case in 0..50 {
        let heads = [1, 2, 4, 8][rng.random_range(0..4)];
        let d = heads * rng.random_range(1..=16 / heads);
        let l = rng.random_range(1..=8);
        let (store, w) = with_init(case, |i| MhsaWeights::new(i, "a", d, heads).unwrap());
        let x = rand_tensor(&[l, d], 1000 + case);
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let xv = t.constant(x.clone());
        let y = mhsa(&mut t, &p, &w, xv).unwrap();
        let r = mhsa_reference(
            &x,
            store.get(w.w_q),
            store.get(w.w_k),
            store.get(w.w_v),
            store.get(w.w_o),
            heads,
        );
        let diff = t.value(y).max_abs_diff(&r);
        assert!(diff < 1e-10, "case {case}: L={l} d={d} heads={heads} diff {diff}");
    }
}

#[test]
fn mhsa_degenerate_cases() {
    let (store, w) = with_init(11, |i| MhsaWeights::new(i, "a", 4, 2).unwrap());
    let mut t = Tape::new();
    let p = store.bind(&mut t, false);

    // One token: output is the value projection passed through W_o.
    let x = rand_tensor(&[1, 4], 12);
    let xv = t.constant(x.clone());
    let y = mhsa(&mut t, &p, &w, xv).unwrap();
    let v = t.matmul(xv, p[w.w_v]).unwrap();
    let expect = t.matmul(v, p[w.w_o]).unwrap();
    assert!(t.value(y).max_abs_diff(t.value(expect)) < 1e-15);

    // Identical keys: zero the key projection so every score ties.
    let (mut store, w) = with_init(13, |i| MhsaWeights::new(i, "a", 4, 2).unwrap());
    *store.get_mut(w.w_k) = Tensor::zeros([4, 4]);
    *store.get_mut(w.w_o) = Tensor::from_fn([4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    let mut t = Tape::new();
    let p = store.bind(&mut t, false);
    let xv = t.constant(rand_tensor(&[2, 4], 14));
    let y = mhsa(&mut t, &p, &w, xv).unwrap();
    let v = t.matmul(xv, p[w.w_v]).unwrap();
    let (yv, vv) = (t.value(y), t.value(v));
    for row in 0..2 {
        for c in 0..4 {
            let mean = 0.5 * (vv.get(&[0, c]) + vv.get(&[1, c]));
            assert!((yv.get(&[row, c]) - mean).abs() < 1e-15);
        }
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let (store, w) = with_init(15, |i| MhsaWeights::new(i, "a", 8, 2).unwrap());
    let mut t = Tape::new();
    let p = store.bind(&mut t, false);
    let xv = t.constant(rand_tensor(&[12, 8], 16));
    let a = multi_head_attention(&mut t, &p, &w, xv, 3).unwrap();
    let wts = t.value(a.weights);
    assert_eq!(wts.shape(), &[6, 4, 4]);
    for row in wts.data().chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }
}

fn block_out(store: &ParamStore, b: &TransformerBlock, x: &Tensor, s: usize) -> Tensor {
    let mut t = Tape::new();
    let p = store.bind(&mut t, false);
    let xv = t.constant(x.clone());
    let y = window_attention_block(&mut t, &p, b, xv, s).unwrap();
    t.value(y).clone()
}

#[test]
fn window_block_shape_identity_and_locality() {
    let (mut store, b) = with_init(17, |i| TransformerBlock::new(i, "b", 8, 2).unwrap());
    let x = rand_tensor(&[8, 16, 16], 18);
    for s in [2, 4, 8] {
        assert_eq!(block_out(&store, &b, &x, s).shape(), x.shape());
    }

    for s in [2, 4, 8] {
        let base = block_out(&store, &b, &x, s);
        let mut x2 = x.clone();
        let (r, c) = (s + 1, 2 * s - 1);
        x2.set(&[3, r, c], x.get(&[3, r, c]) + 0.5);
        let pert = block_out(&store, &b, &x2, s);
        for rr in 0..16 {
            for cc in 0..16 {
                let same_window = rr / s == r / s && cc / s == c / s;
                for ch in 0..8 {
                    let changed = base.get(&[ch, rr, cc]) != pert.get(&[ch, rr, cc]);
                    if !same_window {
                        assert!(!changed, "s={s}: ({rr},{cc}) changed outside the window");
                    }
                }
            }
        }
    }

    *store.get_mut(b.attn.w_o) = Tensor::zeros([8, 8]);
    *store.get_mut(b.mlp.fc2.w) = Tensor::zeros([32, 8]);
    assert_eq!(block_out(&store, &b, &x, 4), x);
}

#[test]
fn local_branch_shape_and_zeroed_reduction() {
    let (mut store, w) = with_init(19, |i| LocalBranchWeights::new(i, 16, 2, 3).unwrap());
    assert_eq!(w.window_sizes, vec![2, 4, 8]);
    let x = rand_tensor(&[3, 64, 64], 20).map(|v| v.abs());
    let run = |store: &ParamStore, w: &LocalBranchWeights| {
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let xv = t.constant(x.clone());
        let y = local_branch(&mut t, &p, w, xv).unwrap();
        let e = w.embed.forward(&mut t, &p, xv).unwrap();
        (t.value(y).clone(), t.value(e).clone())
    };
    let (y, _) = run(&store, &w);
    assert_eq!(y.shape(), &[16, 64, 64]);
    assert!(y.is_finite());

    for b in &w.blocks {
        *store.get_mut(b.attn.w_o) = Tensor::zeros([16, 16]);
        *store.get_mut(b.mlp.fc2.w) = Tensor::zeros([64, 16]);
    }
    let (y, e) = run(&store, &w);
    assert!(y.max_abs_diff(&e.map(|v| 3.0 * v)) < 1e-14);

    let (store1, w1) = with_init(21, |i| LocalBranchWeights::new(i, 8, 2, 1).unwrap());
    assert_eq!(w1.window_sizes, vec![2]);
    let mut t = Tape::new();
    let p = store1.bind(&mut t, false);
    let xv = t.constant(x.clone());
    let y = local_branch(&mut t, &p, &w1, xv).unwrap();
    let e = w1.embed.forward(&mut t, &p, xv).unwrap();
    let expect = window_attention_block(&mut t, &p, &w1.blocks[0], e, 2).unwrap();
    assert_eq!(t.value(y), t.value(expect));
}

#[test]
fn global_branch_shape_and_receptive_field() {
    let (store, w) = with_init(22, |i| GlobalBranchWeights::new(i, 16, 16, 4, 64, 64).unwrap());
    let x = rand_tensor(&[3, 64, 64], 23).map(|v| v.abs());
    let run = |x: &Tensor| {
        let mut t = Tape::new();
        let p = store.bind(&mut t, false);
        let xv = t.constant(x.clone());
        let y = global_branch(&mut t, &p, &w, xv).unwrap();
        t.value(y).clone()
    };
    let base = run(&x);
    assert_eq!(base.shape(), &[16, 64, 64]);
    let mut x2 = x.clone();
    x2.set(&[1, 3, 60], x.get(&[1, 3, 60]) + 0.3);
    let pert = run(&x2);
    let unchanged = base.data().iter().zip(pert.data()).filter(|(a, b)| a == b).count();
    assert_eq!(unchanged, 0, "a single pixel should reach every output");
}
