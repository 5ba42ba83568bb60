//! Core dialogue data model: knowledge triples, utterances, paths, and the
//! [`Conversation`] record that ties them together.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("line {line}: field {field}: {detail}")]
    Schema { line: usize, field: String, detail: String },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid synthesis config: {0}")]
    BadConfig(String),
    #[error("synthetic generation failed: {0}")]
    Generation(String),
    #[error("path grammar violation at token {position}: {detail}")]
    Grammar { position: usize, detail: String },
    #[error("cannot encode path: {0}")]
    Encode(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeTriple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl KnowledgeTriple {
    pub fn new(
        subject: impl Into<String>,
        relation: impl Into<String>,
        object: impl Into<String>,
    ) -> Self {
        KnowledgeTriple { subject: subject.into(), relation: relation.into(), object: object.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
}

impl Utterance {
    pub fn user(text: impl Into<String>) -> Self {
        Utterance { speaker: Speaker::User, text: text.into() }
    }

    pub fn system(text: impl Into<String>) -> Self {
        Utterance { speaker: Speaker::System, text: text.into() }
    }
}

/// One subtarget: a dialogue act and the entity it is about.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PathStep {
    pub action: String,
    pub topic: String,
}

impl PathStep {
    pub fn new(action: impl Into<String>, topic: impl Into<String>) -> Self {
        PathStep { action: action.into(), topic: topic.into() }
    }
}

/// Ordered sequence of subtargets ending at the dialogue target.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DialoguePath(pub Vec<PathStep>);

impl DialoguePath {
    pub fn new(steps: Vec<PathStep>) -> Self {
        DialoguePath(steps)
    }

    pub fn steps(&self) -> &[PathStep] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn last(&self) -> Option<&PathStep> {
        self.0.last()
    }

    /// The same steps in reverse order (target first) — the teaching signal
    /// for the backward decoder.
    pub fn reversed(&self) -> DialoguePath {
        DialoguePath(self.0.iter().rev().cloned().collect())
    }

    /// Suffix starting at step `from`.
    pub fn suffix(&self, from: usize) -> DialoguePath {
        DialoguePath(self.0[from.min(self.0.len())..].to_vec())
    }
}

/// One dialogue instance: grounding knowledge, user profile, the exchange so
/// far, the gold subtarget path, the final target, and gold system responses.
#[derive(Debug, Clone, PartialEq)]
pub struct Conversation {
    pub id: String,
    pub knowledge: Vec<KnowledgeTriple>,
    pub profile: Vec<(String, String)>,
    pub history: Vec<Utterance>,
    pub path: DialoguePath,
    pub target: PathStep,
    pub responses: Vec<String>,
}

impl Conversation {
    /// Enforce the structural invariants; `line` only labels errors.
    pub fn validate(&self, max_pairs: usize, line: usize) -> Result<(), CorpusError> {
        let schema = |field: &str, detail: String| CorpusError::Schema {
            line,
            field: field.to_string(),
            detail,
        };
        for (i, t) in self.knowledge.iter().enumerate() {
            for (part, value) in
                [("subject", &t.subject), ("relation", &t.relation), ("object", &t.object)]
            {
                if value.trim().is_empty() {
                    return Err(schema(&format!("knowledge[{i}].{part}"), "empty string".into()));
                }
            }
        }
        if self.path.is_empty() {
            return Err(schema("path", "path must be non-empty".into()));
        }
        if self.path.len() > max_pairs {
            return Err(schema(
                "path",
                format!("{} pairs exceed max_pairs {max_pairs}", self.path.len()),
            ));
        }
        let last = self.path.last().expect("non-empty path");
        if *last != self.target {
            return Err(schema(
                "target",
                format!(
                    "last path pair ({}, {}) differs from target ({}, {})",
                    last.action, last.topic, self.target.action, self.target.topic
                ),
            ));
        }
        for (i, step) in self.path.steps().iter().enumerate() {
            let grounded = self
                .knowledge
                .iter()
                .any(|t| t.subject == step.topic || t.object == step.topic);
            if !grounded {
                return Err(schema(
                    &format!("path[{i}].topic"),
                    format!("topic {:?} appears in no knowledge triple", step.topic),
                ));
            }
        }
        Ok(())
    }
}
