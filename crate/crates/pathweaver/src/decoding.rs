//! Grammar-constrained greedy decoding and the three-stage planning
//! pipeline: decode the path forward, decode it backward, then let the
//! fusion head re-score every position of the merged streams to produce the
//! final forward path.

use serde::Serialize;
use thiserror::Error;

use crate::corpus::slice::PlanningExample;
use crate::corpus::types::{CorpusError, DialoguePath, KnowledgeTriple, PathStep, Utterance};
use crate::corpus::vocab::{atomize, tokens_to_path, TokenKind, Vocabulary};
use crate::encoder::{encode_example, Memory};
use crate::num::layers::Dropper;
use crate::num::{GraphCtx, Id, NumError, Scalar};
use crate::planner::{
    align_backward, decode_states, fuse_variant, project_logits, Head, ModelError, PathDirection,
    PlannerConfig, PlannerModel, Variant,
};

/// Which token class the grammar expects next in
/// `([A] action [T] topic)+ EOS`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Slot {
    ExpectA,
    ExpectAction,
    ExpectT,
    ExpectTopic,
    MayEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GrammarState {
    pub slot: Slot,
    pub pairs_emitted: usize,
}

/// Vocabulary-derived token sets for the path grammar, plus the pair cap.
#[derive(Debug, Clone)]
pub struct Grammar {
    a_marker: usize,
    t_marker: usize,
    eos: usize,
    action_ids: Vec<usize>,
    topic_ids: Vec<usize>,
    pub max_pairs: usize,
}

impl Grammar {
    pub fn new(vocab: &Vocabulary, max_pairs: usize) -> Self {
        Grammar {
            a_marker: vocab.a_marker,
            t_marker: vocab.t_marker,
            eos: vocab.eos,
            action_ids: vocab.ids_of_kind(TokenKind::Action),
            topic_ids: vocab.ids_of_kind(TokenKind::Topic),
            max_pairs,
        }
    }

    pub fn start(&self) -> GrammarState {
        GrammarState { slot: Slot::ExpectA, pairs_emitted: 0 }
    }

    /// Token ids admissible in this state, ascending (ties in an argmax over
    /// this list resolve to the lowest id).
    pub fn allowed(&self, s: &GrammarState) -> Vec<usize> {
        match s.slot {
            Slot::ExpectA => vec![self.a_marker],
            Slot::ExpectAction => self.action_ids.clone(),
            Slot::ExpectT => vec![self.t_marker],
            Slot::ExpectTopic => self.topic_ids.clone(),
            Slot::MayEnd => {
                if s.pairs_emitted < self.max_pairs {
                    let mut v = vec![self.eos, self.a_marker];
                    v.sort_unstable();
                    v
                } else {
                    vec![self.eos]
                }
            }
        }
    }

    /// Step the state over an emitted token; `None` if the token is not
    /// admissible here.
    pub fn advance(&self, s: GrammarState, token: usize) -> Option<GrammarState> {
        let allowed = self.allowed(&s);
        if !allowed.contains(&token) {
            return None;
        }
        let next = match s.slot {
            Slot::ExpectA => GrammarState { slot: Slot::ExpectAction, ..s },
            Slot::ExpectAction => GrammarState { slot: Slot::ExpectT, ..s },
            Slot::ExpectT => GrammarState { slot: Slot::ExpectTopic, ..s },
            Slot::ExpectTopic => {
                GrammarState { slot: Slot::MayEnd, pairs_emitted: s.pairs_emitted + 1 }
            }
            Slot::MayEnd => {
                if token == self.eos {
                    s
                } else {
                    GrammarState { slot: Slot::ExpectAction, ..s }
                }
            }
        };
        Some(next)
    }

    /// Marker emissions are forced by the grammar; everything else (actions,
    /// topics, the EOS decision) is a genuine decoding decision.
    fn is_decision_token(&self, token: usize) -> bool {
        token != self.a_marker && token != self.t_marker
    }
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("target {kind} {value:?} is not in the vocabulary")]
    UnknownTarget { kind: &'static str, value: String },
    #[error("plan holds no pairs")]
    EmptyPlan,
    #[error("requested {requested} pairs but the model was built for {model_max}")]
    PairBudget { requested: usize, model_max: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

/// One greedy decode: the emitted tokens (without BOS), the decoder states
/// of the final iteration (row `i` is the state that predicted token `i`),
/// and how many free decisions were taken.
pub struct DecodeOut {
    pub tokens: Vec<usize>,
    pub states: Id,
    pub decision_steps: usize,
}

fn argmax_over<T: Scalar>(row: &[T], candidates: &[usize]) -> usize {
    let mut best = candidates[0];
    for &c in candidates {
        if row[c] > row[best] {
            best = c;
        }
    }
    best
}

/// Greedy autoregressive decoding of one direction. Constrained mode masks
/// every step with the grammar, so the result always parses and halts
/// within `2·max_pairs + 1` decisions; unconstrained mode takes a plain
/// argmax over the whole vocabulary and halts at EOS or the token budget of
/// the longest valid path.
pub fn greedy_decode<T: Scalar>(
    ctx: &mut GraphCtx<'_, T>,
    cfg: &PlannerConfig,
    dir: PathDirection,
    memory: &Memory,
    vocab: &Vocabulary,
    constrained: bool,
    max_pairs: usize,
) -> Result<DecodeOut, PlanError> {
    if max_pairs == 0 || max_pairs > cfg.max_pairs {
        return Err(PlanError::PairBudget { requested: max_pairs, model_max: cfg.max_pairs });
    }
    let head = match dir {
        PathDirection::Forward => Head::Forward,
        PathDirection::Backward => Head::Backward,
    };
    let grammar = Grammar::new(vocab, max_pairs);
    let mut state = grammar.start();
    let mut generated: Vec<usize> = Vec::new();
    let mut decision_steps = 0usize;
    let token_budget = 4 * max_pairs + 1;
    let all_ids: Vec<usize> = (0..vocab.len()).collect();
    loop {
        let input: Vec<usize> =
            std::iter::once(vocab.bos).chain(generated.iter().copied()).collect();
        let states =
            decode_states(ctx, cfg, dir, memory, &input, &mut Dropper::off())?;
        let logits = project_logits(ctx, cfg, states, head)?;
        let (rows, cols) = ctx.tape.shape(logits);
        let last = &ctx.tape.value(logits)[(rows - 1) * cols..];
        let token = if constrained {
            let allowed = grammar.allowed(&state);
            let t = argmax_over(last, &allowed);
            if grammar.is_decision_token(t) {
                decision_steps += 1;
            }
            state = grammar.advance(state, t).expect("argmax drawn from the allowed set");
            t
        } else {
            decision_steps += 1;
            argmax_over(last, &all_ids)
        };
        generated.push(token);
        let done = token == vocab.eos || generated.len() >= token_budget;
        if done {
            return Ok(DecodeOut { tokens: generated, states, decision_steps });
        }
    }
}

/// Best-effort parse for unconstrained output: collect every well-formed
/// `[A] action [T] topic` group in order, skipping anything malformed.
pub fn lenient_parse(tokens: &[usize], vocab: &Vocabulary) -> DialoguePath {
    let mut steps = Vec::new();
    let mut i = 0;
    while i + 3 < tokens.len() {
        let group = &tokens[i..i + 4];
        let ok = group[0] == vocab.a_marker
            && vocab.kind(group[1]) == TokenKind::Action
            && group[2] == vocab.t_marker
            && vocab.kind(group[3]) == TokenKind::Topic;
        if ok {
            steps.push(PathStep::new(vocab.token(group[1]), vocab.token(group[3])));
            i += 4;
        } else {
            i += 1;
        }
    }
    DialoguePath::new(steps)
}

fn parse_decoded(tokens: &[usize], vocab: &Vocabulary, constrained: bool) -> DialoguePath {
    if constrained {
        tokens_to_path(tokens, vocab)
            .expect("constrained decoding emits only grammar-valid sequences")
    } else {
        match tokens_to_path(tokens, vocab) {
            Ok(p) => p,
            Err(_) => lenient_parse(tokens, vocab),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanOptions {
    /// Mask decoding with the path grammar (on by default).
    pub constrained: bool,
    /// Replace the final decoded pair with the requested target.
    pub target_forcing: bool,
    /// Cap on path pairs; `None` uses the model's budget.
    pub max_pairs: Option<usize>,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions { constrained: true, target_forcing: false, max_pairs: None }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PlanDiagnostics {
    pub variant: String,
    pub forward_tokens: usize,
    pub backward_tokens: usize,
    /// True when the two decodes disagree on length.
    pub length_mismatch: bool,
    /// False when the backward output did not parse and alignment fell back
    /// to plain token reversal.
    pub backward_parsed: bool,
    pub forward_decision_steps: usize,
    pub backward_decision_steps: usize,
    pub hop_ordered: bool,
    pub knowledge_placeholder: bool,
    pub constrained: bool,
    pub target_forced: bool,
}

#[derive(Debug, Clone)]
pub struct PlanResult {
    pub final_path: DialoguePath,
    /// Output of the forward decoder alone.
    pub forward_path: DialoguePath,
    /// Output of the backward decoder, reversed into forward order.
    pub backward_path: DialoguePath,
    pub diagnostics: PlanDiagnostics,
}

fn path_to_json(path: &DialoguePath) -> serde_json::Value {
    serde_json::Value::Array(
        path.steps()
            .iter()
            .map(|s| serde_json::json!([s.action, s.topic]))
            .collect(),
    )
}

impl PlanResult {
    /// The wire shape emitted by the CLI.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "final_path": path_to_json(&self.final_path),
            "forward_path": path_to_json(&self.forward_path),
            "backward_path": path_to_json(&self.backward_path),
            "diagnostics": serde_json::to_value(&self.diagnostics).expect("diagnostics serialize"),
        })
    }
}

/// Walk fusion logits position by position under the grammar, taking the
/// argmax over the admissible set at each step. The walk runs over at most
/// `n_rows` positions and ends at the first EOS.
fn constrained_rescore<T: Scalar>(
    ctx: &GraphCtx<'_, T>,
    logits: Id,
    grammar: &Grammar,
    vocab: &Vocabulary,
) -> Vec<usize> {
    let (rows, cols) = ctx.tape.shape(logits);
    let values = ctx.tape.value(logits);
    let mut state = grammar.start();
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &values[r * cols..(r + 1) * cols];
        // No positions remain after this one, so a pair boundary here must
        // close the path; constrained decodes put a MayEnd slot on the last
        // row, making the walk always end in a parseable sequence.
        let allowed = if r + 1 == rows && state.slot == Slot::MayEnd {
            vec![vocab.eos]
        } else {
            grammar.allowed(&state)
        };
        let token = argmax_over(row, &allowed);
        state = grammar.advance(state, token).expect("argmax drawn from the allowed set");
        out.push(token);
        if token == vocab.eos {
            break;
        }
    }
    out
}

fn unconstrained_rescore<T: Scalar>(ctx: &GraphCtx<'_, T>, logits: Id, vocab: &Vocabulary) -> Vec<usize> {
    let (rows, cols) = ctx.tape.shape(logits);
    let values = ctx.tape.value(logits);
    let all_ids: Vec<usize> = (0..vocab.len()).collect();
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let token = argmax_over(&values[r * cols..(r + 1) * cols], &all_ids);
        out.push(token);
        if token == vocab.eos {
            break;
        }
    }
    out
}

/// Run the full planning pipeline on one conversation state. Stages: encode
/// the memory, greedy-decode both directions, align the backward states
/// into forward order, fuse per the model's variant, and re-score every
/// position with the fusion head under the grammar. The single-stream
/// variants return their stream's decode directly; the backward-focused
/// variant runs the mirror pipeline in backward order and flips the result.
pub fn plan<T: Scalar>(
    model: &PlannerModel<T>,
    knowledge: &[KnowledgeTriple],
    profile: &[(String, String)],
    history: &[Utterance],
    target: &PathStep,
    options: &PlanOptions,
) -> Result<PlanResult, PlanError> {
    let vocab = &model.vocab;
    let action_id = vocab
        .get_atomic(&target.action)
        .filter(|&id| vocab.kind(id) == TokenKind::Action)
        .ok_or_else(|| PlanError::UnknownTarget { kind: "action", value: target.action.clone() })?;
    let topic_id = vocab
        .get_atomic(&target.topic)
        .filter(|&id| vocab.kind(id) == TokenKind::Topic)
        .ok_or_else(|| PlanError::UnknownTarget { kind: "topic", value: target.topic.clone() })?;
    let _ = (action_id, topic_id);
    let max_pairs = options.max_pairs.unwrap_or(model.planner.max_pairs);

    let mut ctx = GraphCtx::new(&model.store, false);
    let (memory, enc_diag) = encode_example(
        &mut ctx,
        &model.encoder,
        vocab,
        knowledge,
        profile,
        history,
        target,
        &mut Dropper::off(),
    )?;
    let fwd = greedy_decode(
        &mut ctx,
        &model.planner,
        PathDirection::Forward,
        &memory,
        vocab,
        options.constrained,
        max_pairs,
    )?;
    let bwd = greedy_decode(
        &mut ctx,
        &model.planner,
        PathDirection::Backward,
        &memory,
        vocab,
        options.constrained,
        max_pairs,
    )?;
    let forward_path = parse_decoded(&fwd.tokens, vocab, options.constrained);
    let backward_path =
        parse_decoded(&bwd.tokens, vocab, options.constrained).reversed();
    let grammar = Grammar::new(vocab, max_pairs);

    let mut backward_parsed = true;
    let mut final_path = match model.planner.variant {
        Variant::Of => forward_path.clone(),
        Variant::Ob => backward_path.clone(),
        Variant::Ff | Variant::NoFf => {
            let aligned =
                align_backward(&mut ctx, bwd.states, &bwd.tokens, vocab, fwd.tokens.len())?;
            backward_parsed = aligned.parsed;
            let fused =
                fuse_variant(&mut ctx, model.planner.variant, fwd.states, aligned.states)?;
            let logits = project_logits(&mut ctx, &model.planner, fused, Head::Fusion)?;
            let tokens = if options.constrained {
                constrained_rescore(&ctx, logits, &grammar, vocab)
            } else {
                unconstrained_rescore(&ctx, logits, vocab)
            };
            parse_decoded(&tokens, vocab, options.constrained)
        }
        Variant::Bf => {
            // Mirror pipeline: align the forward states into backward order,
            // fuse with the backward stream primary, re-score over backward
            // positions, then flip the decoded path into forward order.
            let aligned =
                align_backward(&mut ctx, fwd.states, &fwd.tokens, vocab, bwd.tokens.len())?;
            let fused = fuse_variant(&mut ctx, Variant::Bf, aligned.states, bwd.states)?;
            let logits = project_logits(&mut ctx, &model.planner, fused, Head::Fusion)?;
            let tokens = if options.constrained {
                constrained_rescore(&ctx, logits, &grammar, vocab)
            } else {
                unconstrained_rescore(&ctx, logits, vocab)
            };
            parse_decoded(&tokens, vocab, options.constrained).reversed()
        }
    };

    let mut target_forced = false;
    if options.target_forcing {
        let forced = PathStep::new(atomize(&target.action), atomize(&target.topic));
        if let Some(last) = final_path.0.last_mut() {
            *last = forced;
        } else {
            final_path.0.push(forced);
        }
        target_forced = true;
    }

    Ok(PlanResult {
        final_path,
        forward_path,
        backward_path,
        diagnostics: PlanDiagnostics {
            variant: model.planner.variant.label().to_string(),
            forward_tokens: fwd.tokens.len(),
            backward_tokens: bwd.tokens.len(),
            length_mismatch: fwd.tokens.len() != bwd.tokens.len(),
            backward_parsed,
            forward_decision_steps: fwd.decision_steps,
            backward_decision_steps: bwd.decision_steps,
            hop_ordered: enc_diag.hop_ordered,
            knowledge_placeholder: enc_diag.knowledge_placeholder,
            constrained: options.constrained,
            target_forced,
        },
    })
}

/// Convenience wrapper planning from a sliced example's conversation state.
pub fn plan_example<T: Scalar>(
    model: &PlannerModel<T>,
    example: &PlanningExample,
    options: &PlanOptions,
) -> Result<PlanResult, PlanError> {
    plan(model, &example.knowledge, &example.profile, &example.history, &example.target, options)
}

/// The subtarget to realize at a given system turn: the plan saturates at
/// its last pair, so late turns keep steering toward the target.
pub fn next_subtarget(result: &PlanResult, turn_index: usize) -> Result<&PathStep, PlanError> {
    let steps = result.final_path.steps();
    if steps.is_empty() {
        return Err(PlanError::EmptyPlan);
    }
    Ok(&steps[turn_index.min(steps.len() - 1)])
}
