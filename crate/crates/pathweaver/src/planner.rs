//! The bidirectional pseudo-siamese planner: two transformer decoders with
//! identical shapes and independent weights (forward and backward over the
//! path), backward-state alignment, the forward-focused fusion module, and
//! the vocabulary projection heads.
//!
//! Fusion combines the two streams per position. With gate
//! `F_weight = sigmoid(gate_linear(F_f))`, the convex merge is
//! `F' = F_f ⊙ F_weight + F_b ⊙ (1 − F_weight)`; the MLP merge is
//! `F'' = MLP([F_f ; F_b])`; and the output gates between them:
//! `O_f = sigmoid(F'') ⊙ F'' + (1 − sigmoid(F'')) ⊙ F'`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::slice::PlanningExample;
use crate::corpus::types::CorpusError;
use crate::corpus::vocab::{path_to_tokens, tokens_to_path, Vocabulary};
use crate::encoder::{
    encode_example, init_encoder, EncodeDiagnostics, EncoderConfig, Memory, LN_EPS,
};
use crate::num::layers::{
    decoder_layer, init_decoder_layer, init_layer_norm, init_linear, layer_norm, linear, Dropper,
};
use crate::num::tape::Result as NumResult;
use crate::num::{GraphCtx, Id, NumError, ParamStore, Scalar, SeedRng, Tensor};

/// Which fusion the model uses. `Ff` is the full forward-focused module;
/// the others are its ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Forward-focused fusion of both streams.
    Ff,
    /// Forward stream only.
    Of,
    /// Backward stream only.
    Ob,
    /// Backward-focused: fusion roles swapped, output in backward order.
    Bf,
    /// MLP merge without the gating (no forward focus).
    NoFf,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Ff, Variant::Of, Variant::Ob, Variant::Bf, Variant::NoFf];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Ff => "ff",
            Variant::Of => "of",
            Variant::Ob => "ob",
            Variant::Bf => "bf",
            Variant::NoFf => "no-ff",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "ff" => Ok(Variant::Ff),
            "of" => Ok(Variant::Of),
            "ob" => Ok(Variant::Ob),
            "bf" => Ok(Variant::Bf),
            "no-ff" | "no_ff" | "noff" => Ok(Variant::NoFf),
            other => Err(format!("unknown variant {other:?}; expected ff|of|ob|bf|no-ff")),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub hidden_dim: usize,
    pub n_decoder_layers: usize,
    pub n_heads: usize,
    pub variant: Variant,
    pub max_pairs: usize,
    pub tie_output_embeddings: bool,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            hidden_dim: 64,
            n_decoder_layers: 2,
            n_heads: 4,
            variant: Variant::Ff,
            max_pairs: 4,
            tie_output_embeddings: false,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.hidden_dim == 0 {
            return Err("planner.hidden_dim must be positive".into());
        }
        if self.n_decoder_layers == 0 {
            return Err("planner.n_decoder_layers must be at least 1".into());
        }
        if self.n_heads == 0 || self.hidden_dim % self.n_heads != 0 {
            return Err(format!(
                "planner.n_heads ({}) must be positive and divide hidden_dim ({})",
                self.n_heads, self.hidden_dim
            ));
        }
        if self.max_pairs == 0 {
            return Err("planner.max_pairs must be at least 1".into());
        }
        Ok(())
    }

    /// Longest decoder input: BOS plus four tokens per pair plus EOS.
    pub fn max_decode_len(&self) -> usize {
        4 * self.max_pairs + 2
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// The full parameter set plus everything needed to run it: both configs and
/// the vocabulary the embeddings were built over.
#[derive(Debug, Clone)]
pub struct PlannerModel<T: Scalar> {
    pub store: ParamStore<T>,
    pub encoder: EncoderConfig,
    pub planner: PlannerConfig,
    pub vocab: Vocabulary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathDirection {
    Forward,
    Backward,
}

impl PathDirection {
    fn prefix(self) -> &'static str {
        match self {
            PathDirection::Forward => "dec.fwd",
            PathDirection::Backward => "dec.bwd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Forward,
    Backward,
    Fusion,
}

impl Head {
    fn prefix(self) -> &'static str {
        match self {
            Head::Forward => "head.fwd",
            Head::Backward => "head.bwd",
            Head::Fusion => "head.fuse",
        }
    }
}

impl<T: Scalar> PlannerModel<T> {
    /// Build a freshly initialized model. All parameters are registered in a
    /// fixed order so checkpoints have a stable manifest.
    pub fn init(
        encoder: EncoderConfig,
        planner: PlannerConfig,
        vocab: Vocabulary,
        seed: u64,
    ) -> std::result::Result<Self, ModelError> {
        encoder.validate().map_err(ModelError::Config)?;
        planner.validate().map_err(ModelError::Config)?;
        if encoder.hidden_dim != planner.hidden_dim {
            return Err(ModelError::Config(format!(
                "encoder.hidden_dim ({}) must equal planner.hidden_dim ({})",
                encoder.hidden_dim, planner.hidden_dim
            )));
        }
        if vocab.len() <= 6 {
            return Err(ModelError::Config(
                "vocabulary holds only special tokens; build it over a corpus first".into(),
            ));
        }
        let mut rng = SeedRng::new(seed);
        let mut store = ParamStore::new();
        init_encoder(&mut store, &encoder, vocab.len(), &mut rng);
        let h = planner.hidden_dim;
        store.insert("embed.pos_dec", Tensor::xavier(planner.max_decode_len(), h, &mut rng));
        for dir in [PathDirection::Forward, PathDirection::Backward] {
            let stack = dir.prefix();
            for l in 0..planner.n_decoder_layers {
                init_decoder_layer(&mut store, &format!("{stack}.l{l}"), h, 4 * h, &mut rng);
            }
            init_layer_norm(&mut store, &format!("{stack}.ln_f"), h);
        }
        init_linear(&mut store, "fuse.gate", h, h, &mut rng);
        init_linear(&mut store, "fuse.mlp1", 2 * h, 2 * h, &mut rng);
        init_linear(&mut store, "fuse.mlp2", 2 * h, h, &mut rng);
        for head in [Head::Forward, Head::Backward, Head::Fusion] {
            if planner.tie_output_embeddings {
                store.insert(format!("{}.b", head.prefix()), Tensor::zeros(1, vocab.len()));
            } else {
                init_linear(&mut store, head.prefix(), h, vocab.len(), &mut rng);
            }
        }
        Ok(PlannerModel { store, encoder, planner, vocab })
    }
}

/// Teacher-forced (or incrementally grown) decoder pass: embed the
/// BOS-prefixed input tokens, run the chosen decoder stack over the memory,
/// and return per-position hidden states.
pub fn decode_states<T: Scalar>(
    ctx: &mut GraphCtx<'_, T>,
    cfg: &PlannerConfig,
    dir: PathDirection,
    memory: &Memory,
    input_tokens: &[usize],
    drop: &mut Dropper,
) -> NumResult<Id> {
    let tok_table = ctx.param("embed.tok")?;
    let tok = ctx.tape.embed(tok_table, input_tokens)?;
    let pos_table = ctx.param("embed.pos_dec")?;
    let positions: Vec<usize> = (0..input_tokens.len()).collect();
    let pos = ctx.tape.embed(pos_table, &positions)?;
    let mut x = ctx.tape.add(tok, pos)?;
    let cross = memory.cross_mask::<T>(input_tokens.len());
    let eps = T::of(LN_EPS);
    let stack = dir.prefix();
    for l in 0..cfg.n_decoder_layers {
        x = decoder_layer(
            ctx,
            x,
            memory.states,
            cross.as_deref(),
            &format!("{stack}.l{l}"),
            cfg.n_heads,
            eps,
            drop,
        )?
        .x;
    }
    layer_norm(ctx, x, &format!("{stack}.ln_f"), eps)
}

/// Project decoder (or fused) states to vocabulary logits. In tied mode the
/// head weight is the transposed shared embedding table plus a trained bias.
pub fn project_logits<T: Scalar>(
    ctx: &mut GraphCtx<'_, T>,
    cfg: &PlannerConfig,
    states: Id,
    head: Head,
) -> NumResult<Id> {
    if cfg.tie_output_embeddings {
        let table = ctx.param("embed.tok")?;
        let wt = ctx.tape.transpose(table);
        let logits = ctx.tape.matmul(states, wt)?;
        let bias = ctx.param(&format!("{}.b", head.prefix()))?;
        ctx.tape.add_bias(logits, bias)
    } else {
        linear(ctx, states, head.prefix())
    }
}

/// Row permutation taking a grammar-valid token sequence from one path
/// direction to the other: four-token pair blocks are reversed as units and
/// the EOS position stays last. Unparseable sequences fall back to whole
/// -sequence reversal, flagged via `parsed == false`.
pub struct Alignment {
    pub perm: Vec<usize>,
    pub parsed: bool,
}

pub fn block_reversal(tokens: &[usize], vocab: &Vocabulary) -> Alignment {
    match tokens_to_path(tokens, vocab) {
        Ok(path) => {
            let n = path.len();
            let mut perm = Vec::with_capacity(4 * n + 1);
            for j in 0..n {
                let src = 4 * (n - 1 - j);
                perm.extend([src, src + 1, src + 2, src + 3]);
            }
            perm.push(4 * n);
            Alignment { perm, parsed: true }
        }
        Err(_) => Alignment { perm: (0..tokens.len()).rev().collect(), parsed: false },
    }
}

pub struct AlignedBackward {
    pub states: Id,
    /// False when the backward tokens did not parse and token reversal was
    /// used instead of block reversal.
    pub parsed: bool,
}

/// Reorder backward decoder states into forward order and fit them to
/// `forward_len` rows (zero-padding or truncating the tail).
pub fn align_backward<T: Scalar>(
    ctx: &mut GraphCtx<'_, T>,
    f_b_states: Id,
    backward_tokens: &[usize],
    vocab: &Vocabulary,
    forward_len: usize,
) -> NumResult<AlignedBackward> {
    let alignment = block_reversal(backward_tokens, vocab);
    let mut states = ctx.tape.permute_rows(f_b_states, &alignment.perm)?;
    let (rows, cols) = ctx.tape.shape(states);
    if rows > forward_len {
        states = ctx.tape.slice_rows(states, 0, forward_len)?;
    } else if rows < forward_len {
        let pad = ctx.tape.constant(forward_len - rows, cols, vec![T::zero(); (forward_len - rows) * cols])?;
        states = ctx.tape.concat_rows(&[states, pad])?;
    }
    Ok(AlignedBackward { states, parsed: alignment.parsed })
}

/// Intermediate fusion quantities, exposed for probes and tests.
pub struct FusionOut {
    /// O_f, the gated blend of the MLP merge and the convex merge.
    pub out: Id,
    /// F', the convex combination of the two streams.
    pub f_prime: Id,
    /// F'', the MLP merge of the concatenated streams.
    pub f_pp: Id,
    /// F_weight, the sigmoid gate computed from the primary stream.
    pub f_weight: Id,
}

/// The forward-focused fusion equations on two equal-shaped state blocks.
/// The first argument is the primary stream (the one driving the gate).
pub fn fuse_forward_focused<T: Scalar>(
    ctx: &mut GraphCtx<'_, T>,
    f_f: Id,
    f_b: Id,
) -> NumResult<FusionOut> {
    let a = ctx.tape.shape(f_f);
    let b = ctx.tape.shape(f_b);
    if a != b {
        return Err(NumError::ShapeMismatch { op: "fuse_forward_focused", lhs: a, rhs: b });
    }
    let gate_pre = linear(ctx, f_f, "fuse.gate")?;
    let f_weight = ctx.tape.sigmoid(gate_pre);
    // F' = F_b + w ⊙ (F_f − F_b): algebraically the gated convex mix, but
    // this arrangement makes equal streams pass through bit-exactly.
    let diff = ctx.tape.sub(f_f, f_b)?;
    let w_diff = ctx.tape.mul(diff, f_weight)?;
    let f_prime = ctx.tape.add(f_b, w_diff)?;

    let cat = ctx.tape.concat_cols(&[f_f, f_b])?;
    let m1 = linear(ctx, cat, "fuse.mlp1")?;
    let act = ctx.tape.relu(m1);
    let f_pp = linear(ctx, act, "fuse.mlp2")?;

    let g = ctx.tape.sigmoid(f_pp);
    let one_minus_g = ctx.tape.one_minus(g);
    let gated_pp = ctx.tape.mul(g, f_pp)?;
    let gated_prime = ctx.tape.mul(one_minus_g, f_prime)?;
    let out = ctx.tape.add(gated_pp, gated_prime)?;
    Ok(FusionOut { out, f_prime, f_pp, f_weight })
}

/// The MLP merge alone (no gating) — the `no-ff` ablation.
pub fn fuse_mlp_only<T: Scalar>(ctx: &mut GraphCtx<'_, T>, f_f: Id, f_b: Id) -> NumResult<Id> {
    let a = ctx.tape.shape(f_f);
    let b = ctx.tape.shape(f_b);
    if a != b {
        return Err(NumError::ShapeMismatch { op: "fuse_mlp_only", lhs: a, rhs: b });
    }
    let cat = ctx.tape.concat_cols(&[f_f, f_b])?;
    let m1 = linear(ctx, cat, "fuse.mlp1")?;
    let act = ctx.tape.relu(m1);
    linear(ctx, act, "fuse.mlp2")
}

/// Variant dispatch over aligned state blocks (both in the same position
/// order). `Bf` runs the forward-focused equations with the stream roles
/// swapped, so its gate comes from the backward stream.
pub fn fuse_variant<T: Scalar>(
    ctx: &mut GraphCtx<'_, T>,
    variant: Variant,
    f_f: Id,
    f_b_aligned: Id,
) -> NumResult<Id> {
    match variant {
        Variant::Ff => Ok(fuse_forward_focused(ctx, f_f, f_b_aligned)?.out),
        Variant::Of => Ok(f_f),
        Variant::Ob => Ok(f_b_aligned),
        Variant::Bf => Ok(fuse_forward_focused(ctx, f_b_aligned, f_f)?.out),
        Variant::NoFf => fuse_mlp_only(ctx, f_f, f_b_aligned),
    }
}

/// Everything produced by one teacher-forced pass over an example.
pub struct TeacherForced {
    pub memory: Memory,
    pub diagnostics: EncodeDiagnostics,
    /// Gold forward output tokens (`([A] a [T] t)+ EOS`).
    pub forward_gold: Vec<usize>,
    /// Gold backward output tokens (reversed pair order).
    pub backward_gold: Vec<usize>,
    pub f_f: Id,
    pub f_b: Id,
    pub f_b_aligned: Id,
    pub fused: Id,
    pub forward_logits: Id,
    pub backward_logits: Id,
    pub fusion_logits: Id,
}

/// Run the full teacher-forced model on one planning example: encode the
/// memory, decode both directions on gold inputs, align, fuse, and project
/// all three heads.
pub fn forward_example<T: Scalar>(
    ctx: &mut GraphCtx<'_, T>,
    encoder_cfg: &EncoderConfig,
    planner_cfg: &PlannerConfig,
    vocab: &Vocabulary,
    example: &PlanningExample,
    drop: &mut Dropper,
) -> std::result::Result<TeacherForced, ModelError> {
    let forward_gold = path_to_tokens(&example.remaining_path, vocab)?;
    let backward_gold = path_to_tokens(&example.remaining_path.reversed(), vocab)?;
    let (memory, diagnostics) = encode_example(
        ctx,
        encoder_cfg,
        vocab,
        &example.knowledge,
        &example.profile,
        &example.history,
        &example.target,
        drop,
    )?;
    let fwd_input: Vec<usize> =
        std::iter::once(vocab.bos).chain(forward_gold[..forward_gold.len() - 1].iter().copied()).collect();
    let bwd_input: Vec<usize> =
        std::iter::once(vocab.bos).chain(backward_gold[..backward_gold.len() - 1].iter().copied()).collect();
    let f_f = decode_states(ctx, planner_cfg, PathDirection::Forward, &memory, &fwd_input, drop)?;
    let f_b = decode_states(ctx, planner_cfg, PathDirection::Backward, &memory, &bwd_input, drop)?;
    let aligned = align_backward(ctx, f_b, &backward_gold, vocab, forward_gold.len())?;
    let fused = fuse_variant(ctx, planner_cfg.variant, f_f, aligned.states)?;
    let forward_logits = project_logits(ctx, planner_cfg, f_f, Head::Forward)?;
    let backward_logits = project_logits(ctx, planner_cfg, f_b, Head::Backward)?;
    let fusion_logits = project_logits(ctx, planner_cfg, fused, Head::Fusion)?;
    Ok(TeacherForced {
        memory,
        diagnostics,
        forward_gold,
        backward_gold,
        f_f,
        f_b,
        f_b_aligned: aligned.states,
        fused,
        forward_logits,
        backward_logits,
        fusion_logits,
    })
}
