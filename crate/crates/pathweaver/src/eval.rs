//! Corpus-level evaluation drivers: planning accuracy over sliced turns,
//! simulated end-to-end dialogues scored with the generation metrics, and
//! the fusion-variant × decoder-depth ablation grid.
//!
//! Per-example work is embarrassingly parallel: each plan call builds its
//! own graph, so examples fan out across threads and fold back in input
//! order, making sequential and parallel runs bitwise identical.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::corpus::{
    build_vocabulary, slice_conversation, slice_corpus, Conversation, CorpusError,
    PlanningExample, Utterance,
};
use crate::decoding::{plan_example, PlanError, PlanOptions, PlanResult};
use crate::encoder::EncoderConfig;
use crate::metrics::{
    bleu, distinct_n, knowledge_f1, plan_accuracy, render_table, target_success, tokenize,
    GenEval, GoldNext, MetricError, PlanEval,
};
use crate::num::rng::SeedRng;
use crate::num::scalar::Scalar;
use crate::planner::{ModelError, PlannerConfig, PlannerModel, Variant};
use crate::responder::{
    build_prompt, generate_offline, LlmClient, PromptCaps, ResponderError,
};
use crate::training::{teacher_forced_accuracy, train, TrainConfig, TrainError};

/// How per-example evaluation work is scheduled. `Parallel` uses the rayon
/// thread pool when the `parallel` feature is enabled and quietly falls
/// back to sequential execution otherwise, so callers need not branch on
/// the feature set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecMode {
    Sequential,
    Parallel,
}

impl std::str::FromStr for ExecMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sequential" => Ok(ExecMode::Sequential),
            "parallel" => Ok(ExecMode::Parallel),
            other => Err(format!("unknown exec mode {other:?} (expected sequential|parallel)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("planning failed: {0}")]
    Plan(#[from] PlanError),
    #[error("metric failed: {0}")]
    Metric(#[from] MetricError),
    #[error("model setup failed: {0}")]
    Model(#[from] ModelError),
    #[error("training failed: {0}")]
    Train(#[from] TrainError),
    #[error("corpus failed: {0}")]
    Corpus(#[from] CorpusError),
    #[error("responder failed: {0}")]
    Responder(#[from] ResponderError),
    #[error("{0}")]
    Empty(String),
}

/// Map a fallible function over items, in parallel when requested, always
/// returning results in input order.
pub fn map_examples<I, O, F>(items: &[I], mode: ExecMode, f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    match mode {
        ExecMode::Sequential => items.iter().map(f).collect(),
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => items.par_iter().map(f).collect(),
        #[cfg(not(feature = "parallel"))]
        ExecMode::Parallel => items.iter().map(f).collect(),
    }
}

/// The gold continuation for a sliced turn: the first step of its
/// remaining path, plus the following step when the path goes on.
pub fn gold_next(example: &PlanningExample) -> GoldNext {
    let steps = example.remaining_path.steps();
    GoldNext {
        next: (steps[0].action.clone(), steps[0].topic.clone()),
        next_next: steps.get(1).map(|s| (s.action.clone(), s.topic.clone())),
    }
}

/// Plan every sliced turn and score the predicted next pair against the
/// gold continuation.
pub fn evaluate_planning<T: Scalar>(
    model: &PlannerModel<T>,
    examples: &[PlanningExample],
    options: &PlanOptions,
    mode: ExecMode,
) -> Result<PlanEval, EvalError> {
    let outcomes: Vec<Result<(String, String), PlanError>> =
        map_examples(examples, mode, |ex| {
            let result = plan_example(model, ex, options)?;
            let first = result.final_path.steps().first().cloned().ok_or(PlanError::EmptyPlan)?;
            Ok((first.action, first.topic))
        });
    let mut predictions = Vec::with_capacity(examples.len());
    for outcome in outcomes {
        predictions.push(outcome?);
    }
    let golds: Vec<GoldNext> = examples.iter().map(gold_next).collect();
    Ok(plan_accuracy(&predictions, &golds)?)
}

/// Produces one system turn given the running history, the dialogue
/// knowledge, and the subtarget to realize.
pub trait Responder: Sync {
    fn respond(
        &self,
        history: &[Utterance],
        knowledge: &[crate::corpus::KnowledgeTriple],
        subtarget: &crate::corpus::PathStep,
    ) -> Result<String, ResponderError>;
}

impl<R: Responder + ?Sized> Responder for Box<R> {
    fn respond(
        &self,
        history: &[Utterance],
        knowledge: &[crate::corpus::KnowledgeTriple],
        subtarget: &crate::corpus::PathStep,
    ) -> Result<String, ResponderError> {
        (**self).respond(history, knowledge, subtarget)
    }
}

/// Network-free deterministic responder.
pub struct OfflineResponder;

impl Responder for OfflineResponder {
    fn respond(
        &self,
        _history: &[Utterance],
        knowledge: &[crate::corpus::KnowledgeTriple],
        subtarget: &crate::corpus::PathStep,
    ) -> Result<String, ResponderError> {
        Ok(generate_offline(subtarget, knowledge))
    }
}

/// Responder backed by the chat-completions client.
pub struct RemoteResponder {
    pub client: LlmClient,
    pub caps: PromptCaps,
}

impl Responder for RemoteResponder {
    fn respond(
        &self,
        history: &[Utterance],
        knowledge: &[crate::corpus::KnowledgeTriple],
        subtarget: &crate::corpus::PathStep,
    ) -> Result<String, ResponderError> {
        let prompt = build_prompt(history, knowledge, subtarget, &self.caps);
        self.client.generate(&prompt)
    }
}

struct DialogueOutcome {
    /// Per-turn (hyp tokens, gold tokens) for turns that have a reference.
    scored_turns: Vec<(Vec<String>, Vec<String>)>,
    /// Per-turn knowledge-F1 where an active triple exists.
    know_scores: Vec<f64>,
    /// All generated responses, tokenized, for corpus-level DIST-n.
    responses: Vec<Vec<String>>,
    success: bool,
}

/// Simulate one dialogue: plan once from the opening state, realize each
/// planned pair in order with the responder, and score the transcript. The
/// success turn is the plan's own final pair, where it schedules the
/// target.
fn run_dialogue<T: Scalar, R: Responder>(
    model: &PlannerModel<T>,
    conv: &Conversation,
    history_turns: usize,
    options: &PlanOptions,
    responder: &R,
) -> Result<DialogueOutcome, EvalError> {
    let opening = slice_conversation(conv, history_turns)
        .into_iter()
        .next()
        .ok_or_else(|| EvalError::Empty("conversation sliced to no examples".into()))?;
    let plan: PlanResult = plan_example(model, &opening, options)?;
    let steps = plan.final_path.steps().to_vec();
    if steps.is_empty() {
        return Err(EvalError::Plan(PlanError::EmptyPlan));
    }

    let mut history = opening.history.clone();
    let mut raw_responses = Vec::with_capacity(steps.len());
    let mut outcome = DialogueOutcome {
        scored_turns: Vec::new(),
        know_scores: Vec::new(),
        responses: Vec::new(),
        success: false,
    };
    for (t, subtarget) in steps.iter().enumerate() {
        let response = responder.respond(&history, &conv.knowledge, subtarget)?;
        let hyp = tokenize(&response);
        if let Some(gold) = conv.responses.get(t) {
            outcome.scored_turns.push((hyp.clone(), tokenize(gold)));
        }
        if let Some(k) = knowledge_f1(&hyp, &conv.knowledge, &subtarget.topic) {
            outcome.know_scores.push(k);
        }
        outcome.responses.push(hyp);
        history.push(Utterance::system(response.clone()));
        // Replay the scripted user reply between system turns when the
        // source dialogue has one.
        if let Some(user_turn) = conv.history.get(2 * (t + 1)) {
            history.push(user_turn.clone());
        }
        raw_responses.push(response);
    }
    outcome.success = target_success(&raw_responses, steps.len() - 1, &conv.target.topic);
    Ok(outcome)
}

/// Simulate every dialogue and aggregate the generation metrics: macro
/// F1/BLEU over turns with a gold reference, corpus-level DIST-n over all
/// generated turns, knowledge-F1 over turns with active triples, and the
/// fraction of dialogues that realize their target.
pub fn evaluate_e2e<T: Scalar, R: Responder>(
    model: &PlannerModel<T>,
    convs: &[Conversation],
    history_turns: usize,
    options: &PlanOptions,
    responder: &R,
    mode: ExecMode,
) -> Result<GenEval, EvalError> {
    if convs.is_empty() {
        return Err(EvalError::Empty("no conversations to evaluate".into()));
    }
    let outcomes: Vec<Result<DialogueOutcome, EvalError>> = map_examples(convs, mode, |conv| {
        run_dialogue(model, conv, history_turns, options, responder)
    });
    let mut dialogues = Vec::with_capacity(convs.len());
    for o in outcomes {
        dialogues.push(o?);
    }

    let mut f1_sum = 0.0;
    let mut bleu1_sum = 0.0;
    let mut bleu2_sum = 0.0;
    let mut scored = 0usize;
    let mut know_sum = 0.0;
    let mut know_n = 0usize;
    let mut successes = 0usize;
    let mut all_responses: Vec<Vec<String>> = Vec::new();
    for d in &dialogues {
        for (hyp, gold) in &d.scored_turns {
            f1_sum += crate::metrics::word_f1(hyp, gold);
            bleu1_sum += bleu(hyp, gold, 1);
            bleu2_sum += bleu(hyp, gold, 2);
            scored += 1;
        }
        know_sum += d.know_scores.iter().sum::<f64>();
        know_n += d.know_scores.len();
        successes += usize::from(d.success);
        all_responses.extend(d.responses.iter().cloned());
    }
    let avg = |sum: f64, n: usize| if n == 0 { 0.0 } else { sum / n as f64 };
    Ok(GenEval {
        f1: avg(f1_sum, scored),
        bleu1: avg(bleu1_sum, scored),
        bleu2: avg(bleu2_sum, scored),
        dist1: distinct_n(&all_responses, 1),
        dist2: distinct_n(&all_responses, 2),
        know_f1: avg(know_sum, know_n),
        succ: successes as f64 / dialogues.len() as f64,
        n_responses: all_responses.len(),
    })
}

/// One trained-and-scored cell of the ablation grid.
#[derive(Debug, Clone, Serialize)]
pub struct AblationCell {
    pub variant: Variant,
    pub layers: usize,
    pub plan: PlanEval,
    /// Teacher-forced fusion-head token accuracy on the held-out slice.
    pub fusion_token_accuracy: f64,
    pub best_dev_accuracy: f64,
    pub diverged: bool,
    pub train_seconds: f64,
}

/// Train and evaluate one model per (fusion variant, decoder depth) cell.
/// Conversations are split 90/10 into train/eval with the training seed;
/// the same split, vocabulary, and initialization seed serve every cell so
/// the grid varies only what it claims to vary.
pub fn ablate<T: Scalar>(
    convs: &[Conversation],
    encoder: &EncoderConfig,
    planner: &PlannerConfig,
    train_cfg: &TrainConfig,
    history_turns: usize,
    variants: &[Variant],
    layer_counts: &[usize],
    mode: ExecMode,
) -> Result<Vec<AblationCell>, EvalError> {
    if convs.len() < 2 {
        return Err(EvalError::Empty("ablation needs at least two conversations".into()));
    }
    let vocab = build_vocabulary(convs)?;
    let mut order: Vec<usize> = (0..convs.len()).collect();
    SeedRng::new(train_cfg.seed).shuffle(&mut order);
    let n_eval = (convs.len() / 10).max(1);
    let eval_convs: Vec<Conversation> =
        order[..n_eval].iter().map(|&i| convs[i].clone()).collect();
    let train_convs: Vec<Conversation> =
        order[n_eval..].iter().map(|&i| convs[i].clone()).collect();
    let train_examples = slice_corpus(&train_convs, history_turns);
    let eval_examples = slice_corpus(&eval_convs, history_turns);
    let options = PlanOptions::default();

    let mut cells = Vec::with_capacity(variants.len() * layer_counts.len());
    for &variant in variants {
        for &layers in layer_counts {
            let cell_planner =
                PlannerConfig { variant, n_decoder_layers: layers, ..planner.clone() };
            let started = std::time::Instant::now();
            let mut model =
                PlannerModel::<T>::init(encoder.clone(), cell_planner, vocab.clone(), train_cfg.seed)?;
            let report = train(&mut model, &train_examples, train_cfg)?;
            let train_seconds = started.elapsed().as_secs_f64();
            let plan_eval = evaluate_planning(&model, &eval_examples, &options, mode)?;
            let tf = teacher_forced_accuracy(&model, &eval_examples)?;
            cells.push(AblationCell {
                variant,
                layers,
                plan: plan_eval,
                fusion_token_accuracy: tf.token_accuracy,
                best_dev_accuracy: report.best_dev_accuracy,
                diverged: report.diverged,
                train_seconds,
            });
        }
    }
    Ok(cells)
}

/// Two-row accuracy table (action and topic against Acc./Bi.Acc.).
pub fn render_plan_eval(eval: &PlanEval) -> String {
    render_table(
        "level",
        &["Acc.", "Bi.Acc."],
        &[
            ("action".to_string(), vec![eval.action_acc, eval.action_bi_acc]),
            ("topic".to_string(), vec![eval.topic_acc, eval.topic_bi_acc]),
        ],
    )
}

/// One-row generation table in the standard metric order.
pub fn render_gen_eval(eval: &GenEval) -> String {
    render_table(
        "split",
        &["F1", "BLEU-1", "BLEU-2", "DIST-1", "DIST-2", "Know.F1", "Succ."],
        &[(
            "e2e".to_string(),
            vec![
                eval.f1, eval.bleu1, eval.bleu2, eval.dist1, eval.dist2, eval.know_f1, eval.succ,
            ],
        )],
    )
}

/// Grid table: one row per (variant, depth) cell.
pub fn render_ablation(cells: &[AblationCell]) -> String {
    let rows: Vec<(String, Vec<f64>)> = cells
        .iter()
        .map(|c| {
            (
                format!("{} L={}", c.variant.label(), c.layers),
                vec![
                    c.plan.action_acc,
                    c.plan.action_bi_acc,
                    c.plan.topic_acc,
                    c.plan.topic_bi_acc,
                    c.fusion_token_accuracy,
                ],
            )
        })
        .collect();
    render_table("variant", &["ActAcc", "ActBi", "TopAcc", "TopBi", "TFAcc"], &rows)
}
