//! Corpus layer: conversation data model, JSONL persistence, typed
//! vocabulary with the path token grammar, seeded synthetic generation, and
//! turn-level slicing into planning examples.

pub mod jsonl;
pub mod slice;
pub mod synth;
pub mod types;
pub mod vocab;

pub use jsonl::{load_jsonl, save_jsonl, to_json_line};
pub use slice::{slice_conversation, slice_corpus, PlanningExample};
pub use synth::{generate, topic_name, SynthConfig};
pub use types::{
    Conversation, CorpusError, DialoguePath, KnowledgeTriple, PathStep, Speaker, Utterance,
};
pub use vocab::{
    atomize, build_vocabulary, path_to_tokens, tokens_to_path, TokenKind, Vocabulary,
};
