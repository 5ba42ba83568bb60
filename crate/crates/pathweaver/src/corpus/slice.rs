//! Turn-level planning examples.
//!
//! A conversation whose turns interleave cleanly (user/system alternation,
//! one system response per path step) yields one example per turn: the
//! history seen so far, the remaining path suffix as supervision, and the
//! gold system response for that turn. Data without that shape still yields
//! a single whole-conversation example anchored at the first turn.

use super::types::{Conversation, DialoguePath, KnowledgeTriple, PathStep, Speaker, Utterance};

#[derive(Debug, Clone, PartialEq)]
pub struct PlanningExample {
    pub conv_id: String,
    pub turn_index: usize,
    pub knowledge: Vec<KnowledgeTriple>,
    pub profile: Vec<(String, String)>,
    /// Most recent utterances before the system speaks, capped to the
    /// configured window.
    pub history: Vec<Utterance>,
    /// Path suffix from the current turn to the target, never empty.
    pub remaining_path: DialoguePath,
    pub target: PathStep,
    pub gold_response: String,
}

/// True when the conversation has the one-system-turn-per-path-step shape
/// that supports per-turn slicing.
fn is_turn_aligned(conv: &Conversation) -> bool {
    let t = conv.path.len();
    conv.responses.len() == t
        && conv.history.len() == 2 * t - 1
        && conv
            .history
            .iter()
            .enumerate()
            .all(|(i, u)| (i % 2 == 0) == matches!(u.speaker, Speaker::User))
        && (0..t - 1).all(|j| conv.history[2 * j + 1].text == conv.responses[j])
}

fn window(history: &[Utterance], history_turns: usize) -> Vec<Utterance> {
    let start = history.len().saturating_sub(history_turns);
    history[start..].to_vec()
}

/// Slice one conversation into planning examples.
pub fn slice_conversation(conv: &Conversation, history_turns: usize) -> Vec<PlanningExample> {
    let base = |turn_index: usize, history, remaining_path, gold_response| PlanningExample {
        conv_id: conv.id.clone(),
        turn_index,
        knowledge: conv.knowledge.clone(),
        profile: conv.profile.clone(),
        history,
        remaining_path,
        target: conv.target.clone(),
        gold_response,
    };
    if !is_turn_aligned(conv) {
        return vec![base(
            0,
            window(&conv.history, history_turns),
            conv.path.clone(),
            conv.responses.first().cloned().unwrap_or_default(),
        )];
    }
    (0..conv.path.len())
        .map(|t| {
            base(
                t,
                window(&conv.history[..2 * t + 1], history_turns),
                conv.path.suffix(t),
                conv.responses[t].clone(),
            )
        })
        .collect()
}

/// Slice a whole corpus, preserving conversation order.
pub fn slice_corpus(convs: &[Conversation], history_turns: usize) -> Vec<PlanningExample> {
    convs.iter().flat_map(|c| slice_conversation(c, history_turns)).collect()
}
