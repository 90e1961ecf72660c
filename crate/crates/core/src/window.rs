//! Window partitioning, windowed multi-head self-attention with relative
//! position bias, and the pre-norm Transformer layer with a convolutional
//! feed-forward block.
//!
//! Two token layouts are supported. In the spatial layout every position of an
//! `H x W` grid is a token and windows are `M x M` squares. In the channel
//! layout every feature channel is a token (its embedding is the flattened
//! spatial map) and windows are runs of `M * M` consecutive channels.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, LayerNorm, Linear, Weights, LEAKY_SLOPE};
use crate::params::{init, ParamId, ParamStore};
use crate::tensor::Tensor;

/// How the tokens of a layer are grouped into attention windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenLayout {
    /// Tokens on a row-major `height x width` grid, split into `window x window` squares.
    Grid { height: usize, width: usize, window: usize },
    /// A sequence of `tokens`, split into consecutive runs of `group`.
    Groups { tokens: usize, group: usize },
}

impl TokenLayout {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TokenLayout::Grid { height, width, window } => {
                if window == 0 || height == 0 || width == 0 {
                    return Err(Error::shape("window grid with a zero side"));
                }
                if height % window != 0 || width % window != 0 {
                    return Err(Error::shape(format!(
                        "grid {height}x{width} is not divisible by window {window}"
                    )));
                }
            }
            TokenLayout::Groups { tokens, group } => {
                if group == 0 || tokens == 0 || tokens % group != 0 {
                    return Err(Error::shape(format!(
                        "{tokens} tokens cannot be split into groups of {group}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_tokens(&self) -> usize {
        match *self {
            TokenLayout::Grid { height, width, .. } => height * width,
            TokenLayout::Groups { tokens, .. } => tokens,
        }
    }

    pub fn tokens_per_window(&self) -> usize {
        match *self {
            TokenLayout::Grid { window, .. } => window * window,
            TokenLayout::Groups { group, .. } => group,
        }
    }

    pub fn num_windows(&self) -> usize {
        self.num_tokens() / self.tokens_per_window()
    }

    /// Source token of every window slot, window-major.
    pub fn token_order(&self) -> Vec<usize> {
        match *self {
            TokenLayout::Grid { width, window: m, .. } => {
                let per_row = width / m;
                (0..self.num_tokens())
                    .map(|slot| {
                        let (j, t) = (slot / (m * m), slot % (m * m));
                        let (wr, wc) = (j / per_row, j % per_row);
                        let (lr, lc) = (t / m, t % m);
                        (wr * m + lr) * width + wc * m + lc
                    })
                    .collect()
            }
            TokenLayout::Groups { tokens, .. } => (0..tokens).collect(),
        }
    }

    /// Size of the learnable bias table for one head.
    pub fn bias_table_len(&self) -> usize {
        match *self {
            TokenLayout::Grid { window, .. } => (2 * window - 1) * (2 * window - 1),
            TokenLayout::Groups { group, .. } => 2 * group - 1,
        }
    }

    /// Table entry for every `(query, key)` pair inside a window, row-major `t x t`.
    pub fn relative_index(&self) -> Vec<usize> {
        let t = self.tokens_per_window();
        match *self {
            TokenLayout::Grid { window: m, .. } => (0..t * t)
                .map(|p| {
                    let (i, j) = (p / t, p % t);
                    let dr = (i / m) as isize - (j / m) as isize + m as isize - 1;
                    let dc = (i % m) as isize - (j % m) as isize + m as isize - 1;
                    dr as usize * (2 * m - 1) + dc as usize
                })
                .collect(),
            TokenLayout::Groups { group, .. } => (0..t * t)
                .map(|p| {
                    let (i, j) = (p / t, p % t);
                    (i as isize - j as isize + group as isize - 1) as usize
                })
                .collect(),
        }
    }
}

/// Element-level gather map turning `tokens x dim` into window-major order.
fn partition_index(layout: &TokenLayout, dim: usize) -> Vec<usize> {
    let order = layout.token_order();
    let mut idx = Vec::with_capacity(order.len() * dim);
    for tok in order {
        idx.extend(tok * dim..(tok + 1) * dim);
    }
    idx
}

fn merge_index(layout: &TokenLayout, dim: usize) -> Vec<usize> {
    let fwd = partition_index(layout, dim);
    let mut inv = vec![0; fwd.len()];
    for (dst, &src) in fwd.iter().enumerate() {
        inv[src] = dst;
    }
    inv
}

/// Windows of tokens together with the layout needed to undo the partition.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenWindows {
    /// `num_windows x tokens_per_window x dim`
    pub windows: Tensor,
    pub origin: TokenLayout,
}

fn check_tokens(feature: &Tensor, layout: &TokenLayout) -> Result<usize> {
    layout.validate()?;
    let (n, dim) = feature.dims2()?;
    if n != layout.num_tokens() {
        return Err(Error::shape(format!(
            "{n} tokens do not match layout with {}",
            layout.num_tokens()
        )));
    }
    Ok(dim)
}

/// Splits a `tokens x dim` feature on an `height x width` grid into `window x window` windows.
/// No padding is applied.
pub fn window_partition(feature: &Tensor, height: usize, width: usize, window: usize) -> Result<TokenWindows> {
    partition(feature, TokenLayout::Grid { height, width, window })
}

pub fn partition(feature: &Tensor, layout: TokenLayout) -> Result<TokenWindows> {
    let dim = check_tokens(feature, &layout)?;
    let src = feature.data();
    let data = partition_index(&layout, dim).into_iter().map(|i| src[i]).collect();
    Ok(TokenWindows {
        windows: Tensor::new(vec![layout.num_windows(), layout.tokens_per_window(), dim], data)?,
        origin: layout,
    })
}

/// Exact inverse of [`partition`].
pub fn window_merge(w: &TokenWindows) -> Result<Tensor> {
    w.origin.validate()?;
    let shape = w.windows.shape();
    if shape.len() != 3 || shape[0] != w.origin.num_windows() || shape[1] != w.origin.tokens_per_window() {
        return Err(Error::shape(format!(
            "windows {shape:?} inconsistent with {:?}",
            w.origin
        )));
    }
    let dim = shape[2];
    let src = w.windows.data();
    let data = merge_index(&w.origin, dim).into_iter().map(|i| src[i]).collect();
    Tensor::new(vec![w.origin.num_tokens(), dim], data)
}

/// Windowed multi-head self-attention with a learned relative position bias.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    /// `bias_table_len x num_heads`
    pub rel_bias: ParamId,
    pub num_heads: usize,
    pub head_dim: usize,
    layout: TokenLayout,
    bias_index: Arc<[usize]>,
}

impl WindowAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        layout: TokenLayout,
        dim: usize,
        num_heads: usize,
    ) -> Result<Self> {
        layout.validate()?;
        if num_heads == 0 || !dim.is_multiple_of(num_heads) {
            return Err(Error::config(format!(
                "embedding dim {dim} is not divisible by {num_heads} heads"
            )));
        }
        let qkv = Linear::new(store, rng, &format!("{name}.qkv"), dim, 3 * dim);
        let rel_bias = store.add(
            format!("{name}.rel_bias"),
            init::truncated_normal(rng, &[layout.bias_table_len(), num_heads], 0.02),
        );
        let proj = Linear::new(store, rng, &format!("{name}.proj"), dim, dim);
        let rel = layout.relative_index();
        let t = layout.tokens_per_window();
        let bias_index = (0..num_heads * t * t)
            .map(|p| {
                let (h, ij) = (p / (t * t), p % (t * t));
                rel[ij] * num_heads + h
            })
            .collect();
        Ok(Self {
            qkv,
            proj,
            rel_bias,
            num_heads,
            head_dim: dim / num_heads,
            layout,
            bias_index,
        })
    }

    pub fn dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn layout(&self) -> TokenLayout {
        self.layout
    }

    /// Materialized bias `B`, `num_heads x t x t`.
    pub fn bias_matrix(&self, store: &ParamStore) -> Tensor {
        let table = store.get(self.rel_bias).data();
        let t = self.layout.tokens_per_window();
        Tensor::from_fn(&[self.num_heads, t, t], |p| table[self.bias_index[p]])
    }

    /// Attention over window-major tokens (`num_windows * t x dim`).
    /// Returns the projected output and the attention weights (`num_windows * heads x t x t`).
    pub fn forward_with_weights<'a>(&self, tape: &mut Tape<'a>, w: Weights<'a>, x: Var) -> Result<(Var, Var)> {
        let (rows, dim) = tape.value(x).dims2()?;
        let t = self.layout.tokens_per_window();
        if dim != self.dim() || rows % t != 0 {
            return Err(Error::shape(format!(
                "attention input {rows}x{dim}, expected windows of {t} tokens of width {}",
                self.dim()
            )));
        }
        let nw = rows / t;
        let (heads, d) = (self.num_heads, self.head_dim);
        let qkv = self.qkv.forward(tape, w, x)?;
        let split = |part: usize| -> Arc<[usize]> {
            (0..nw * heads * t * d)
                .map(|p| {
                    let e = p % d;
                    let i = (p / d) % t;
                    let h = (p / (d * t)) % heads;
                    let win = p / (d * t * heads);
                    (win * t + i) * 3 * dim + part * dim + h * d + e
                })
                .collect()
        };
        let shape = [nw * heads, t, d];
        let q = tape.gather(qkv, split(0), &shape)?;
        let k = tape.gather(qkv, split(1), &shape)?;
        let v = tape.gather(qkv, split(2), &shape)?;
        let q = tape.scale(q, 1.0 / (d as f64).sqrt());
        let logits = tape.bmm(q, k, true)?;
        let table = w.bind(tape, self.rel_bias);
        let bias = tape.gather(table, self.bias_index.clone(), &[heads, t, t])?;
        let logits = tape.add_tiled(logits, bias)?;
        let attn = tape.softmax(logits)?;
        let ctx = tape.bmm(attn, v, false)?;
        let merge: Arc<[usize]> = (0..rows * dim)
            .map(|p| {
                let (row, col) = (p / dim, p % dim);
                let (win, i) = (row / t, row % t);
                let (h, e) = (col / d, col % d);
                ((win * heads + h) * t + i) * d + e
            })
            .collect();
        let ctx = tape.gather(ctx, merge, &[rows, dim])?;
        let out = self.proj.forward(tape, w, ctx)?;
        Ok((out, attn))
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, w: Weights<'a>, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(tape, w, x)?.0)
    }
}

/// Side length of a square token grid, rejecting non-square counts.
pub fn square_side(n: usize) -> Result<usize> {
    let s = (n as f64).sqrt().round() as usize;
    if s * s != n || n == 0 {
        return Err(Error::shape(format!("{n} tokens cannot be laid out on a square grid")));
    }
    Ok(s)
}

/// Linear, then a residual `Conv -> LReLU -> DWConv` branch on the 2-d token grid, then linear.
#[derive(Clone, Debug)]
pub struct ResFfn {
    pub fc1: Linear,
    pub conv: Conv2d,
    pub dwconv: Conv2d,
    pub fc2: Linear,
    pub grid: (usize, usize),
}

impl ResFfn {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        hidden: usize,
        grid: (usize, usize),
    ) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden),
            conv: Conv2d::same3(store, rng, &format!("{name}.conv"), hidden, hidden),
            dwconv: Conv2d::new(store, rng, &format!("{name}.dwconv"), hidden, hidden, 3, 1, 1, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, dim),
            grid,
        }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, w: Weights<'a>, x: Var) -> Result<Var> {
        let (n, _) = tape.value(x).dims2()?;
        let (gh, gw) = self.grid;
        if n != gh * gw {
            return Err(Error::shape(format!("{n} tokens do not fill the {gh}x{gw} grid")));
        }
        let z = self.fc1.forward(tape, w, x)?;
        let hidden = self.fc1.out_dim;
        let to_map: Arc<[usize]> = (0..n * hidden).map(|p| (p % n) * hidden + p / n).collect();
        let z2 = tape.gather(z, to_map, &[hidden, gh, gw])?;
        let r = self.conv.forward(tape, w, z2)?;
        let r = tape.leaky_relu(r, LEAKY_SLOPE);
        let r = self.dwconv.forward(tape, w, r)?;
        let y = tape.add(z2, r)?;
        let to_tokens: Arc<[usize]> = (0..n * hidden).map(|p| (p % hidden) * n + p / hidden).collect();
        let y = tape.gather(y, to_tokens, &[n, hidden])?;
        self.fc2.forward(tape, w, y)
    }
}

/// Token-wise two-layer perceptron.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, dim),
        }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, w: Weights<'a>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, w, x)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        self.fc2.forward(tape, w, h)
    }
}

#[derive(Clone, Debug)]
pub enum FeedForward {
    Residual(ResFfn),
    Mlp(Mlp),
}

impl FeedForward {
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, w: Weights<'a>, x: Var) -> Result<Var> {
        match self {
            FeedForward::Residual(f) => f.forward(tape, w, x),
            FeedForward::Mlp(f) => f.forward(tape, w, x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeedForwardKind {
    Residual,
    Mlp,
}

/// `F' = W-MSA(LN(F)) + F`, then `FFN(LN(F')) + F'`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    layout: TokenLayout,
    dim: usize,
}

impl TransformerLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        layout: TokenLayout,
        dim: usize,
        num_heads: usize,
        ffn: FeedForwardKind,
        expansion: usize,
    ) -> Result<Self> {
        layout.validate()?;
        let hidden = dim * expansion.max(1);
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), dim);
        let attn = WindowAttention::new(store, rng, &format!("{name}.attn"), layout, dim, num_heads)?;
        let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), dim);
        let ffn = match ffn {
            FeedForwardKind::Residual => {
                let grid = match layout {
                    TokenLayout::Grid { height, width, .. } => (height, width),
                    TokenLayout::Groups { tokens, .. } => {
                        let s = square_side(tokens)?;
                        (s, s)
                    }
                };
                FeedForward::Residual(ResFfn::new(store, rng, &format!("{name}.ffn"), dim, hidden, grid))
            }
            FeedForwardKind::Mlp => FeedForward::Mlp(Mlp::new(store, rng, &format!("{name}.ffn"), dim, hidden)),
        };
        Ok(Self {
            norm1,
            attn,
            norm2,
            ffn,
            layout,
            dim,
        })
    }

    pub fn layout(&self) -> TokenLayout {
        self.layout
    }

    /// `tokens x dim` in natural token order.
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, w: Weights<'a>, f: Var) -> Result<Var> {
        let (n, dim) = tape.value(f).dims2()?;
        if n != self.layout.num_tokens() || dim != self.dim {
            return Err(Error::shape(format!(
                "transformer layer expects {}x{}, got {n}x{dim}",
                self.layout.num_tokens(),
                self.dim
            )));
        }
        let normed = self.norm1.forward(tape, w, f)?;
        let windows = tape.gather(normed, partition_index(&self.layout, dim).into(), &[n, dim])?;
        let attended = self.attn.forward(tape, w, windows)?;
        let merged = tape.gather(attended, merge_index(&self.layout, dim).into(), &[n, dim])?;
        let f_hat = tape.add(merged, f)?;
        let normed = self.norm2.forward(tape, w, f_hat)?;
        let fed = self.ffn.forward(tape, w, normed)?;
        tape.add(fed, f_hat)
    }

    /// Inference on a plain tensor.
    pub fn apply(&self, store: &ParamStore, f: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(f.clone());
        let y = self.forward(&mut tape, Weights::frozen(store), x)?;
        Ok(tape.value(y).clone())
    }
}
