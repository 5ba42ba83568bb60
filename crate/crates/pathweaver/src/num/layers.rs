//! Transformer building blocks: linear projections, affine layer norm,
//! multi-head attention, feed-forward sublayers, and pre-norm encoder /
//! decoder layers.
//!
//! Each block comes as a pair of functions: `init_*` registers parameters in
//! a [`ParamStore`] under a dotted prefix, and the forward function binds
//! those names through a [`GraphCtx`]. Attention returns its per-head
//! post-softmax weight matrices so tests and diagnostics can inspect where a
//! query attended.

use crate::num::params::{GraphCtx, ParamStore, Tensor};
use crate::num::rng::SeedRng;
use crate::num::scalar::Scalar;
use crate::num::tape::{Id, NumError, Tape};

type Result<T> = std::result::Result<T, NumError>;

/// Dropout source. `off` (or rate zero) makes every `apply` the identity, so
/// inference paths carry no randomness.
pub struct Dropper {
    p: f64,
    rng: Option<SeedRng>,
}

impl Dropper {
    pub fn off() -> Self {
        Dropper { p: 0.0, rng: None }
    }

    pub fn new(p: f64, rng: SeedRng) -> Self {
        assert!((0.0..1.0).contains(&p), "dropout rate must be in [0, 1)");
        Dropper { p, rng: Some(rng) }
    }

    pub fn apply<T: Scalar>(&mut self, tape: &mut Tape<T>, x: Id) -> Result<Id> {
        match &mut self.rng {
            Some(rng) if self.p > 0.0 => {
                let (r, c) = tape.shape(x);
                let keep: Vec<bool> = (0..r * c).map(|_| !rng.chance(self.p)).collect();
                tape.dropout(x, keep, self.p)
            }
            _ => Ok(x),
        }
    }
}

pub fn init_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut SeedRng,
) {
    store.insert(format!("{prefix}.w"), Tensor::xavier(fan_in, fan_out, rng));
    store.insert(format!("{prefix}.b"), Tensor::zeros(1, fan_out));
}

/// `y = x W + b` with `W` at `{prefix}.w` (`fan_in × fan_out`) and `b` at
/// `{prefix}.b`.
pub fn linear<T: Scalar>(ctx: &mut GraphCtx<'_, T>, x: Id, prefix: &str) -> Result<Id> {
    let w = ctx.param(&format!("{prefix}.w"))?;
    let b = ctx.param(&format!("{prefix}.b"))?;
    let xw = ctx.tape.matmul(x, w)?;
    ctx.tape.add_bias(xw, b)
}

pub fn init_layer_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.g"), Tensor::from_vec(1, dim, vec![T::one(); dim]));
    store.insert(format!("{prefix}.b"), Tensor::zeros(1, dim));
}

/// Affine layer norm: normalize each row, then scale by `{prefix}.g` and
/// shift by `{prefix}.b`.
pub fn layer_norm<T: Scalar>(ctx: &mut GraphCtx<'_, T>, x: Id, prefix: &str, eps: T) -> Result<Id> {
    let normed = ctx.tape.layer_norm_rows(x, eps);
    let g = ctx.param(&format!("{prefix}.g"))?;
    let b = ctx.param(&format!("{prefix}.b"))?;
    let scaled = ctx.tape.row_mul(normed, g)?;
    ctx.tape.add_bias(scaled, b)
}

pub fn init_attention<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    dim: usize,
    rng: &mut SeedRng,
) {
    for proj in ["wq", "wk", "wv", "wo"] {
        init_linear(store, &format!("{prefix}.{proj}"), dim, dim, rng);
    }
}

/// Multi-head attention output plus the per-head post-softmax weight
/// matrices (`q_len × kv_len` each), in head order.
pub struct Attention {
    pub out: Id,
    pub head_weights: Vec<Id>,
}

/// Scaled dot-product attention of `q_in` (`q_len × d`) over `kv_in`
/// (`kv_len × d`). `mask`, when present, is a flat `q_len × kv_len` additive
/// matrix of zeros and `-inf`.
pub fn attention<T: Scalar>(
    ctx: &mut GraphCtx<'_, T>,
    q_in: Id,
    kv_in: Id,
    prefix: &str,
    n_heads: usize,
    mask: Option<&[T]>,
) -> Result<Attention> {
    let (q_len, d) = ctx.tape.shape(q_in);
    let (kv_len, d_kv) = ctx.tape.shape(kv_in);
    if d != d_kv {
        return Err(NumError::ShapeMismatch { op: "attention", lhs: (q_len, d), rhs: (kv_len, d_kv) });
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(NumError::InvalidShape {
            op: "attention",
            detail: format!("{n_heads} heads do not divide model dim {d}"),
        });
    }
    if let Some(m) = mask {
        if m.len() != q_len * kv_len {
            return Err(NumError::InvalidShape {
                op: "attention",
                detail: format!("mask has {} elements for {q_len}x{kv_len}", m.len()),
            });
        }
    }
    let head_dim = d / n_heads;
    let scale = T::of(1.0 / (head_dim as f64).sqrt());

    let q = linear(ctx, q_in, &format!("{prefix}.wq"))?;
    let k = linear(ctx, kv_in, &format!("{prefix}.wk"))?;
    let v = linear(ctx, kv_in, &format!("{prefix}.wv"))?;

    let mut heads = Vec::with_capacity(n_heads);
    let mut head_weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = ctx.tape.slice_cols(q, h * head_dim, head_dim)?;
        let kh = ctx.tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = ctx.tape.slice_cols(v, h * head_dim, head_dim)?;
        let kt = ctx.tape.transpose(kh);
        let scores = ctx.tape.matmul(qh, kt)?;
        let scaled = ctx.tape.scale(scores, scale);
        let masked = match mask {
            Some(m) => ctx.tape.add_const_mask(scaled, m)?,
            None => scaled,
        };
        let weights = ctx.tape.softmax_rows(masked);
        head_weights.push(weights);
        heads.push(ctx.tape.matmul(weights, vh)?);
    }
    let concat = ctx.tape.concat_cols(&heads)?;
    let out = linear(ctx, concat, &format!("{prefix}.wo"))?;
    Ok(Attention { out, head_weights })
}

pub fn init_ffn<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    dim: usize,
    ffn_dim: usize,
    rng: &mut SeedRng,
) {
    init_linear(store, &format!("{prefix}.ffn1"), dim, ffn_dim, rng);
    init_linear(store, &format!("{prefix}.ffn2"), ffn_dim, dim, rng);
}

/// Position-wise feed-forward: `linear → relu → linear`.
pub fn ffn<T: Scalar>(ctx: &mut GraphCtx<'_, T>, x: Id, prefix: &str) -> Result<Id> {
    let hidden = linear(ctx, x, &format!("{prefix}.ffn1"))?;
    let act = ctx.tape.relu(hidden);
    linear(ctx, act, &format!("{prefix}.ffn2"))
}

/// Additive causal mask for self-attention: position `i` may attend to
/// positions `0..=i`.
pub fn causal_mask<T: Scalar>(n: usize) -> Vec<T> {
    let mut mask = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            mask[i * n + j] = T::neg_infinity();
        }
    }
    mask
}

pub fn init_encoder_layer<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    dim: usize,
    ffn_dim: usize,
    rng: &mut SeedRng,
) {
    init_layer_norm(store, &format!("{prefix}.ln1"), dim);
    init_attention(store, &format!("{prefix}.attn"), dim, rng);
    init_layer_norm(store, &format!("{prefix}.ln2"), dim);
    init_ffn(store, prefix, dim, ffn_dim, rng);
}

pub struct EncoderLayerOut {
    pub x: Id,
    pub self_attn: Vec<Id>,
}

/// Pre-norm encoder layer: `x + Attn(LN1(x))`, then `x + FFN(LN2(x))`.
pub fn encoder_layer<T: Scalar>(
    ctx: &mut GraphCtx<'_, T>,
    x: Id,
    prefix: &str,
    n_heads: usize,
    eps: T,
    drop: &mut Dropper,
) -> Result<EncoderLayerOut> {
    let normed = layer_norm(ctx, x, &format!("{prefix}.ln1"), eps)?;
    let attn = attention(ctx, normed, normed, &format!("{prefix}.attn"), n_heads, None)?;
    let attn_dropped = drop.apply(&mut ctx.tape, attn.out)?;
    let x = ctx.tape.add(x, attn_dropped)?;

    let normed2 = layer_norm(ctx, x, &format!("{prefix}.ln2"), eps)?;
    let ff = ffn(ctx, normed2, prefix)?;
    let ff_dropped = drop.apply(&mut ctx.tape, ff)?;
    let x = ctx.tape.add(x, ff_dropped)?;
    Ok(EncoderLayerOut { x, self_attn: attn.head_weights })
}

pub fn init_decoder_layer<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    dim: usize,
    ffn_dim: usize,
    rng: &mut SeedRng,
) {
    init_layer_norm(store, &format!("{prefix}.ln1"), dim);
    init_attention(store, &format!("{prefix}.self"), dim, rng);
    init_layer_norm(store, &format!("{prefix}.ln2"), dim);
    init_attention(store, &format!("{prefix}.cross"), dim, rng);
    init_layer_norm(store, &format!("{prefix}.ln3"), dim);
    init_ffn(store, prefix, dim, ffn_dim, rng);
}

pub struct DecoderLayerOut {
    pub x: Id,
    pub self_attn: Vec<Id>,
    pub cross_attn: Vec<Id>,
}

/// Pre-norm decoder layer: causal self-attention, cross-attention over the
/// memory, feed-forward — each behind its own layer norm with a residual.
/// `cross_mask`, when present, is an additive `x_len × memory_len` matrix
/// hiding unattendable memory positions.
pub fn decoder_layer<T: Scalar>(
    ctx: &mut GraphCtx<'_, T>,
    x: Id,
    memory: Id,
    cross_mask: Option<&[T]>,
    prefix: &str,
    n_heads: usize,
    eps: T,
    drop: &mut Dropper,
) -> Result<DecoderLayerOut> {
    let (n, _) = ctx.tape.shape(x);
    let mask = causal_mask::<T>(n);

    let normed = layer_norm(ctx, x, &format!("{prefix}.ln1"), eps)?;
    let self_attn =
        attention(ctx, normed, normed, &format!("{prefix}.self"), n_heads, Some(&mask))?;
    let sa_dropped = drop.apply(&mut ctx.tape, self_attn.out)?;
    let x = ctx.tape.add(x, sa_dropped)?;

    let normed2 = layer_norm(ctx, x, &format!("{prefix}.ln2"), eps)?;
    let cross = attention(ctx, normed2, memory, &format!("{prefix}.cross"), n_heads, cross_mask)?;
    let ca_dropped = drop.apply(&mut ctx.tape, cross.out)?;
    let x = ctx.tape.add(x, ca_dropped)?;

    let normed3 = layer_norm(ctx, x, &format!("{prefix}.ln3"), eps)?;
    let ff = ffn(ctx, normed3, prefix)?;
    let ff_dropped = drop.apply(&mut ctx.tape, ff)?;
    let x = ctx.tape.add(x, ff_dropped)?;
    Ok(DecoderLayerOut { x, self_attn: self_attn.head_weights, cross_attn: cross.head_weights })
}
