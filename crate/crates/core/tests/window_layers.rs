use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sct_core::autograd::Tape;
use sct_core::nn::Weights;
use sct_core::params::ParamStore;
use sct_core::window::{partition, window_merge, FeedForwardKind, TokenLayout, TransformerLayer, WindowAttention};
use sct_core::Tensor;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Loss `sum(out * r)` of a layer, for finite differences.
fn weighted_sum(layer: &TransformerLayer, store: &ParamStore, x: &Tensor, r: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = layer.forward(&mut tape, Weights::frozen(store), xv).unwrap();
    tape.value(out).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

// Key biases have structurally zero gradients (softmax ignores a per-row
// shift), so tiny values are compared in absolute terms.
fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

fn check_layer_gradients(layout: TokenLayout, dim: usize, heads: usize, kind: FeedForwardKind) {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut store = ParamStore::new();
    let layer = TransformerLayer::new(&mut store, &mut rng, "l", layout, dim, heads, kind, 2).unwrap();
    // random non-degenerate values everywhere, bias table included
    let names: Vec<String> = store.iter().map(|(_, n, _)| n.to_owned()).collect();
    for n in &names {
        let shape = store.by_name(n).unwrap().shape().to_vec();
        store.set(n, random_tensor(&mut rng, &shape)).unwrap();
    }
    let x = random_tensor(&mut rng, &[layout.num_tokens(), dim]);
    let r = random_tensor(&mut rng, &[layout.num_tokens(), dim]);

    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let out = layer.forward(&mut tape, Weights::trainable(&store), xv).unwrap();
    let rv = tape.constant(r.clone());
    let prod = tape.mul(out, rv).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();
    let pgrads = tape.param_grads(&grads, store.len());

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let gx = grads.wrt(xv).unwrap().clone();
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let n = (weighted_sum(&layer, &store, &xp, &r) - weighted_sum(&layer, &store, &xm, &r)) / (2.0 * h);
        worst = worst.max(rel(gx.data()[i], n));
    }
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let name = store.name(id).to_owned();
        let base = store.get(id).clone();
        let g = pgrads[k].clone().unwrap_or_else(|| Tensor::zeros(base.shape()));
        for i in 0..base.len() {
            let mut p = store.clone();
            let mut t = base.clone();
            t.data_mut()[i] += h;
            p.set(&name, t.clone()).unwrap();
            let up = weighted_sum(&layer, &p, &x, &r);
            t.data_mut()[i] -= 2.0 * h;
            p.set(&name, t).unwrap();
            let down = weighted_sum(&layer, &p, &x, &r);
            let e = rel(g.data()[i], (up - down) / (2.0 * h));
            assert!(e < 1e-4, "{name}[{i}]: relative error {e:e}");
            worst = worst.max(e);
        }
    }
    assert!(worst < 1e-4, "input gradient relative error {worst:e}");
}

#[test]
fn spatial_layer_gradients_match_finite_differences() {
    let layout = TokenLayout::Grid {
        height: 2,
        width: 2,
        window: 2,
    };
    check_layer_gradients(layout, 4, 2, FeedForwardKind::Residual);
    check_layer_gradients(layout, 4, 1, FeedForwardKind::Mlp);
}

#[test]
fn channel_layer_gradients_match_finite_differences() {
    let layout = TokenLayout::Groups { tokens: 4, group: 2 };
    check_layer_gradients(layout, 4, 2, FeedForwardKind::Residual);
}

fn zero_bias_attention(
    rng: &mut ChaCha8Rng,
    layout: TokenLayout,
    dim: usize,
    heads: usize,
) -> (ParamStore, WindowAttention) {
    let mut store = ParamStore::new();
    let attn = WindowAttention::new(&mut store, rng, "a", layout, dim, heads).unwrap();
    let zeros = Tensor::zeros(store.get(attn.rel_bias).shape());
    store.set("a.rel_bias", zeros).unwrap();
    (store, attn)
}

fn attend(store: &ParamStore, attn: &WindowAttention, x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = attn.forward(&mut tape, Weights::frozen(store), xv).unwrap();
    tape.value(out).clone()
}

#[test]
fn attention_is_permutation_equivariant_without_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let layout = TokenLayout::Groups { tokens: 9, group: 9 };
    let (store, attn) = zero_bias_attention(&mut rng, layout, 6, 3);
    let x = random_tensor(&mut rng, &[9, 6]);
    let base = attend(&store, &attn, &x);
    for _ in 0..10 {
        let mut perm: Vec<usize> = (0..9).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let px = Tensor::from_fn(&[9, 6], |i| x.data()[perm[i / 6] * 6 + i % 6]);
        let out = attend(&store, &attn, &px);
        for (i, v) in out.data().iter().enumerate() {
            let expect = base.data()[perm[i / 6] * 6 + i % 6];
            assert!((v - expect).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn channel_group_roundtrip(groups in 1usize..6, m in 1usize..4, dim in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = TokenLayout::Groups { tokens: groups * m * m, group: m * m };
        let f = random_tensor(&mut rng, &[groups * m * m, dim]);
        let w = partition(&f, layout).unwrap();
        prop_assert_eq!(w.windows.shape(), &[groups, m * m, dim]);
        prop_assert_eq!(window_merge(&w).unwrap(), f);
    }

    #[test]
    fn rectangular_grid_roundtrip(hw in 1usize..4, ww in 1usize..4, m in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = TokenLayout::Grid { height: hw * m, width: ww * m, window: m };
        let f = random_tensor(&mut rng, &[hw * ww * m * m, 3]);
        let w = partition(&f, layout).unwrap();
        prop_assert_eq!(w.windows.shape()[0], hw * ww);
        prop_assert_eq!(window_merge(&w).unwrap(), f);
    }

    #[test]
    fn attention_rows_sum_to_one_for_any_bias(seed in any::<u64>(), scale in 0.0f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = TokenLayout::Grid { height: 4, width: 4, window: 2 };
        let mut store = ParamStore::new();
        let attn = WindowAttention::new(&mut store, &mut rng, "a", layout, 4, 2).unwrap();
        let table = Tensor::from_fn(store.get(attn.rel_bias).shape(), |_| scale * (rng.random::<f64>() - 0.5));
        store.set("a.rel_bias", table).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(random_tensor(&mut rng, &[16, 4]));
        let (_, w) = attn.forward_with_weights(&mut tape, Weights::frozen(&store), x).unwrap();
        for row in tape.value(w).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
