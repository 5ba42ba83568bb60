//! Input encoders and the shared decoder memory.
//!
//! Four inputs are encoded per example: the knowledge triples `K` (as
//! relation/entity token pairs ordered by hop distance from the target
//! topic), the user profile `P`, the dialogue history `C`, and the target
//! pair. Knowledge and target then exchange information through a symmetric
//! pair of cross-attention blocks (knowledge–target mutual attention), and
//! everything is concatenated — with segment embeddings and an attention
//! mask — into the [`Memory`] both path decoders attend over.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::corpus::types::{KnowledgeTriple, PathStep, Utterance};
use crate::corpus::vocab::{atomize, Vocabulary, SYSTEM_WORD, USER_WORD};
use crate::num::layers::{
    attention, encoder_layer, init_attention, init_encoder_layer, init_layer_norm, layer_norm,
    Dropper,
};
use crate::num::tape::Result;
use crate::num::{GraphCtx, Id, ParamStore, Scalar, SeedRng, Tensor};

/// Layer-norm epsilon used across the model.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_hops: usize,
    pub max_knowledge_items: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden_dim: 64,
            n_layers: 2,
            n_heads: 4,
            max_hops: 3,
            max_knowledge_items: 16,
            max_seq_len: 48,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        for (name, v) in [
            ("hidden_dim", self.hidden_dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_hops", self.max_hops),
            ("max_knowledge_items", self.max_knowledge_items),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(format!("encoder.{name} must be positive"));
            }
        }
        if self.hidden_dim % self.n_heads != 0 {
            return Err(format!(
                "encoder.hidden_dim ({}) must be divisible by encoder.n_heads ({})",
                self.hidden_dim, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("encoder.dropout ({}) must lie in [0, 1)", self.dropout));
        }
        Ok(())
    }

    fn ffn_dim(&self) -> usize {
        4 * self.hidden_dim
    }

    /// Rows of the shared positional table: long enough for any sequence
    /// input and for the serialized knowledge pairs.
    fn max_positions(&self) -> usize {
        self.max_seq_len.max(2 * self.max_knowledge_items)
    }
}

/// Which input a memory position came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemorySegment {
    Knowledge,
    Profile,
    History,
    Target,
}

impl MemorySegment {
    fn index(self) -> usize {
        match self {
            MemorySegment::Knowledge => 0,
            MemorySegment::Profile => 1,
            MemorySegment::History => 2,
            MemorySegment::Target => 3,
        }
    }
}

/// The concatenated encoder output the decoders cross-attend over.
pub struct Memory {
    /// `len × hidden` states on the tape.
    pub states: Id,
    /// One segment id per position.
    pub segments: Vec<MemorySegment>,
    /// False for placeholder positions that downstream attention must skip.
    pub attendable: Vec<bool>,
}

impl Memory {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Additive cross-attention mask for `q_len` query rows, or `None` when
    /// every position is attendable.
    pub fn cross_mask<T: Scalar>(&self, q_len: usize) -> Option<Vec<T>> {
        if self.attendable.iter().all(|&a| a) {
            return None;
        }
        let n = self.len();
        let mut mask = vec![T::zero(); q_len * n];
        for (j, &ok) in self.attendable.iter().enumerate() {
            if !ok {
                for i in 0..q_len {
                    mask[i * n + j] = T::neg_infinity();
                }
            }
        }
        Some(mask)
    }
}

/// Metadata from knowledge encoding, kept for diagnostics and tests.
#[derive(Debug, Clone)]
pub struct KnowledgeEncoding {
    pub states: Id,
    pub n_positions: usize,
    /// True when there were no (usable) triples and a masked PAD placeholder
    /// stands in.
    pub placeholder: bool,
    /// False when the target topic does not occur in the triples, so hop
    /// ordering was impossible and input order was kept.
    pub hop_ordered: bool,
    /// `(input index, hop)` of each kept triple, in serialized order.
    pub kept: Vec<(usize, usize)>,
}

/// Register all encoder-side parameters (shared embeddings, the two encoder
/// stacks, and the knowledge–target attention pair).
pub fn init_encoder<T: Scalar>(
    store: &mut ParamStore<T>,
    cfg: &EncoderConfig,
    vocab_size: usize,
    rng: &mut SeedRng,
) {
    let h = cfg.hidden_dim;
    store.insert("embed.tok", Tensor::xavier(vocab_size, h, rng));
    store.insert("embed.pos_enc", Tensor::xavier(cfg.max_positions(), h, rng));
    store.insert("embed.hop", Tensor::xavier(cfg.max_hops + 1, h, rng));
    store.insert("embed.seg", Tensor::xavier(4, h, rng));
    for stack in ["enc.knowledge", "enc.seq"] {
        for l in 0..cfg.n_layers {
            init_encoder_layer(store, &format!("{stack}.l{l}"), h, cfg.ffn_dim(), rng);
        }
        init_layer_norm(store, &format!("{stack}.ln_f"), h);
    }
    for side in ["kt.k", "kt.t"] {
        init_layer_norm(store, &format!("{side}.ln"), h);
        init_attention(store, &format!("{side}.attn"), h, rng);
    }
}

/// Token + positional embedding for a sequence of ids.
fn embed_input<T: Scalar>(ctx: &mut GraphCtx<'_, T>, ids: &[usize]) -> Result<Id> {
    let tok_table = ctx.param("embed.tok")?;
    let tok = ctx.tape.embed(tok_table, ids)?;
    let pos_table = ctx.param("embed.pos_enc")?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pos = ctx.tape.embed(pos_table, &positions)?;
    ctx.tape.add(tok, pos)
}

fn run_stack<T: Scalar>(
    ctx: &mut GraphCtx<'_, T>,
    stack: &str,
    n_layers: usize,
    n_heads: usize,
    mut x: Id,
    drop: &mut Dropper,
) -> Result<Id> {
    let eps = T::of(LN_EPS);
    for l in 0..n_layers {
        x = encoder_layer(ctx, x, &format!("{stack}.l{l}"), n_heads, eps, drop)?.x;
    }
    layer_norm(ctx, x, &format!("{stack}.ln_f"), eps)
}

/// Encode a flat token sequence (profile, history, or the target pair) with
/// the shared sequence encoder. Overlong input keeps the most recent
/// `max_seq_len` tokens; empty input becomes a single BOS position.
pub fn encode_sequence<T: Scalar>(
    ctx: &mut GraphCtx<'_, T>,
    cfg: &EncoderConfig,
    vocab: &Vocabulary,
    tokens: &[usize],
    drop: &mut Dropper,
) -> Result<Id> {
    let ids: Vec<usize> = if tokens.is_empty() {
        vec![vocab.bos]
    } else {
        tokens[tokens.len().saturating_sub(cfg.max_seq_len)..].to_vec()
    };
    let x = embed_input(ctx, &ids)?;
    run_stack(ctx, "enc.seq", cfg.n_layers, cfg.n_heads, x, drop)
}

/// Serialize dialogue history for the encoder: each utterance becomes its
/// speaker tag followed by its words.
pub fn history_tokens(vocab: &Vocabulary, history: &[Utterance]) -> Vec<usize> {
    let mut out = Vec::new();
    for u in history {
        let tag = match u.speaker {
            crate::corpus::types::Speaker::User => USER_WORD,
            crate::corpus::types::Speaker::System => SYSTEM_WORD,
        };
        out.push(vocab.get(tag).unwrap_or(vocab.unk));
        out.extend(vocab.encode_text(&u.text));
    }
    out
}

/// Serialize profile key/value pairs as plain words.
pub fn profile_tokens(vocab: &Vocabulary, profile: &[(String, String)]) -> Vec<usize> {
    let mut out = Vec::new();
    for (k, v) in profile {
        out.extend(vocab.encode_text(k));
        out.extend(vocab.encode_text(v));
    }
    out
}

/// The target pair as two atomic tokens: action then topic.
pub fn target_tokens(vocab: &Vocabulary, target: &PathStep) -> Vec<usize> {
    vec![
        vocab.get_atomic(&target.action).unwrap_or(vocab.unk),
        vocab.get_atomic(&target.topic).unwrap_or(vocab.unk),
    ]
}

/// Hop distance of every entity from the target topic, over the undirected
/// graph induced by the triples. Entities are compared atomized.
fn hop_distances(knowledge: &[KnowledgeTriple], target: &str) -> HashMap<String, usize> {
    let mut adjacency: HashMap<String, Vec<String>> = HashMap::new();
    for t in knowledge {
        let s = atomize(&t.subject);
        let o = atomize(&t.object);
        adjacency.entry(s.clone()).or_default().push(o.clone());
        adjacency.entry(o).or_default().push(s);
    }
    let mut dist = HashMap::new();
    if !adjacency.contains_key(target) {
        return dist;
    }
    dist.insert(target.to_string(), 0usize);
    let mut queue = VecDeque::from([target.to_string()]);
    while let Some(u) = queue.pop_front() {
        let du = dist[&u];
        for v in adjacency.get(&u).cloned().unwrap_or_default() {
            dist.entry(v.clone()).or_insert_with(|| {
                queue.push_back(v);
                du + 1
            });
        }
    }
    dist
}

/// Order triples for serialization: by hop distance from the target topic
/// (nondecreasing, ties keep input order), dropping triples beyond
/// `max_hops` and truncating at `max_knowledge_items`. When the target topic
/// is absent from the triples, input order is kept and the result is flagged
/// unordered.
fn order_knowledge(
    cfg: &EncoderConfig,
    knowledge: &[KnowledgeTriple],
    target_topic: &str,
) -> (Vec<(usize, usize)>, bool) {
    let target = atomize(target_topic);
    let dist = hop_distances(knowledge, &target);
    if dist.is_empty() {
        let kept = knowledge
            .iter()
            .enumerate()
            .take(cfg.max_knowledge_items)
            .map(|(i, _)| (i, 0))
            .collect();
        return (kept, false);
    }
    let hop_of = |t: &KnowledgeTriple| -> Option<usize> {
        let ds = dist.get(&atomize(&t.subject));
        let d_o = dist.get(&atomize(&t.object));
        match (ds, d_o) {
            (Some(&a), Some(&b)) => Some(a.min(b)),
            (Some(&a), None) => Some(a),
            (None, Some(&b)) => Some(b),
            (None, None) => None,
        }
    };
    let mut kept: Vec<(usize, usize)> = knowledge
        .iter()
        .enumerate()
        .filter_map(|(i, t)| hop_of(t).filter(|&h| h <= cfg.max_hops).map(|h| (i, h)))
        .collect();
    kept.sort_by_key(|&(_, h)| h);
    kept.truncate(cfg.max_knowledge_items);
    (kept, true)
}

/// Encode the knowledge set as hop-ordered relation/entity token pairs with
/// hop-index embeddings. Degenerate input yields a single PAD placeholder
/// position which the memory mask hides.
pub fn encode_knowledge<T: Scalar>(
    ctx: &mut GraphCtx<'_, T>,
    cfg: &EncoderConfig,
    vocab: &Vocabulary,
    knowledge: &[KnowledgeTriple],
    target_topic: &str,
    drop: &mut Dropper,
) -> Result<KnowledgeEncoding> {
    let (kept, hop_ordered) = order_knowledge(cfg, knowledge, target_topic);
    if kept.is_empty() {
        let x = embed_input(ctx, &[vocab.pad])?;
        let states = run_stack(ctx, "enc.knowledge", cfg.n_layers, cfg.n_heads, x, drop)?;
        return Ok(KnowledgeEncoding {
            states,
            n_positions: 1,
            placeholder: true,
            hop_ordered,
            kept,
        });
    }
    let mut ids = Vec::with_capacity(kept.len() * 2);
    let mut hops = Vec::with_capacity(kept.len() * 2);
    for &(i, hop) in &kept {
        let t = &knowledge[i];
        ids.push(vocab.get(&atomize(&t.relation)).unwrap_or(vocab.unk));
        ids.push(vocab.get(&atomize(&t.object)).unwrap_or(vocab.unk));
        let clamped = hop.min(cfg.max_hops);
        hops.push(clamped);
        hops.push(clamped);
    }
    let base = embed_input(ctx, &ids)?;
    let hop_table = ctx.param("embed.hop")?;
    let hop_emb = ctx.tape.embed(hop_table, &hops)?;
    let x = ctx.tape.add(base, hop_emb)?;
    let states = run_stack(ctx, "enc.knowledge", cfg.n_layers, cfg.n_heads, x, drop)?;
    Ok(KnowledgeEncoding {
        states,
        n_positions: ids.len(),
        placeholder: false,
        hop_ordered,
        kept,
    })
}

/// Output of the knowledge–target mutual attention pair.
pub struct KtOut {
    pub k: Id,
    pub t: Id,
    pub k_attn: Vec<Id>,
    pub t_attn: Vec<Id>,
}

/// One multi-head cross-attention block each way with residuals: knowledge
/// states query the target states and vice versa. Shapes are preserved.
pub fn kt_mutual_attention<T: Scalar>(
    ctx: &mut GraphCtx<'_, T>,
    cfg: &EncoderConfig,
    k_states: Id,
    t_states: Id,
    drop: &mut Dropper,
) -> Result<KtOut> {
    let eps = T::of(LN_EPS);
    let kq = layer_norm(ctx, k_states, "kt.k.ln", eps)?;
    let ka = attention(ctx, kq, t_states, "kt.k.attn", cfg.n_heads, None)?;
    let ka_drop = drop.apply(&mut ctx.tape, ka.out)?;
    let k = ctx.tape.add(k_states, ka_drop)?;

    let tq = layer_norm(ctx, t_states, "kt.t.ln", eps)?;
    let ta = attention(ctx, tq, k_states, "kt.t.attn", cfg.n_heads, None)?;
    let ta_drop = drop.apply(&mut ctx.tape, ta.out)?;
    let t = ctx.tape.add(t_states, ta_drop)?;

    Ok(KtOut { k, t, k_attn: ka.head_weights, t_attn: ta.head_weights })
}

/// Concatenate the four encodings, add segment embeddings, and record the
/// attention mask. Hidden-dimension mismatches surface as shape errors.
pub fn assemble_memory<T: Scalar>(
    ctx: &mut GraphCtx<'_, T>,
    k_states: Id,
    k_placeholder: bool,
    p_states: Id,
    c_states: Id,
    t_states: Id,
) -> Result<Memory> {
    let mut segments = Vec::new();
    let mut attendable = Vec::new();
    for (states, seg) in [
        (k_states, MemorySegment::Knowledge),
        (p_states, MemorySegment::Profile),
        (c_states, MemorySegment::History),
        (t_states, MemorySegment::Target),
    ] {
        let (rows, _) = ctx.tape.shape(states);
        let ok = !(seg == MemorySegment::Knowledge && k_placeholder);
        segments.extend(std::iter::repeat(seg).take(rows));
        attendable.extend(std::iter::repeat(ok).take(rows));
    }
    let states = ctx.tape.concat_rows(&[k_states, p_states, c_states, t_states])?;
    let seg_table = ctx.param("embed.seg")?;
    let seg_ids: Vec<usize> = segments.iter().map(|s| s.index()).collect();
    let seg_emb = ctx.tape.embed(seg_table, &seg_ids)?;
    let states = ctx.tape.add(states, seg_emb)?;
    Ok(Memory { states, segments, attendable })
}

/// Extra facts about how an example was encoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodeDiagnostics {
    pub knowledge_positions: usize,
    pub knowledge_placeholder: bool,
    pub hop_ordered: bool,
}

/// Full encoder pipeline for one example: encode all four inputs, run the
/// knowledge–target mutual attention, and assemble the memory.
pub fn encode_example<T: Scalar>(
    ctx: &mut GraphCtx<'_, T>,
    cfg: &EncoderConfig,
    vocab: &Vocabulary,
    knowledge: &[KnowledgeTriple],
    profile: &[(String, String)],
    history: &[Utterance],
    target: &PathStep,
    drop: &mut Dropper,
) -> Result<(Memory, EncodeDiagnostics)> {
    let ke = encode_knowledge(ctx, cfg, vocab, knowledge, &target.topic, drop)?;
    let t_enc = encode_sequence(ctx, cfg, vocab, &target_tokens(vocab, target), drop)?;
    let kt = kt_mutual_attention(ctx, cfg, ke.states, t_enc, drop)?;
    let p_enc = encode_sequence(ctx, cfg, vocab, &profile_tokens(vocab, profile), drop)?;
    let c_enc = encode_sequence(ctx, cfg, vocab, &history_tokens(vocab, history), drop)?;
    let memory = assemble_memory(ctx, kt.k, ke.placeholder, p_enc, c_enc, kt.t)?;
    let diagnostics = EncodeDiagnostics {
        knowledge_positions: ke.n_positions,
        knowledge_placeholder: ke.placeholder,
        hop_ordered: ke.hop_ordered,
    };
    Ok((memory, diagnostics))
}
