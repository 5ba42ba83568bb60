//! Bit-exact JSONL ingestion and emission for conversations.
//!
//! One JSON object per line, UTF-8, `\n` separators:
//! `{"id", "knowledge": [[s,r,o],...], "profile": [[k,v],...],
//!   "history": [{"speaker","text"},...], "path": [[action,topic],...],
//!   "target": [action,topic], "responses": [...]}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::types::{
    Conversation, CorpusError, DialoguePath, KnowledgeTriple, PathStep, Utterance,
};

/// Wire form of one corpus line; field order here fixes the key order in
/// serialized output.
#[derive(Serialize, Deserialize)]
struct WireConversation {
    id: String,
    knowledge: Vec<(String, String, String)>,
    profile: Vec<(String, String)>,
    history: Vec<Utterance>,
    path: Vec<(String, String)>,
    target: (String, String),
    responses: Vec<String>,
}

impl From<&Conversation> for WireConversation {
    fn from(c: &Conversation) -> Self {
        WireConversation {
            id: c.id.clone(),
            knowledge: c
                .knowledge
                .iter()
                .map(|t| (t.subject.clone(), t.relation.clone(), t.object.clone()))
                .collect(),
            profile: c.profile.clone(),
            history: c.history.clone(),
            path: c.path.steps().iter().map(|s| (s.action.clone(), s.topic.clone())).collect(),
            target: (c.target.action.clone(), c.target.topic.clone()),
            responses: c.responses.clone(),
        }
    }
}

impl From<WireConversation> for Conversation {
    fn from(w: WireConversation) -> Self {
        Conversation {
            id: w.id,
            knowledge: w
                .knowledge
                .into_iter()
                .map(|(s, r, o)| KnowledgeTriple { subject: s, relation: r, object: o })
                .collect(),
            profile: w.profile,
            history: w.history,
            path: DialoguePath::new(
                w.path.into_iter().map(|(a, t)| PathStep { action: a, topic: t }).collect(),
            ),
            target: PathStep { action: w.target.0, topic: w.target.1 },
            responses: w.responses,
        }
    }
}

/// Load and validate a JSONL corpus. Parse failures carry the 1-based line
/// number; invariant violations name the offending field.
pub fn load_jsonl(path: impl AsRef<Path>, max_pairs: usize) -> Result<Vec<Conversation>, CorpusError> {
    let file = File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: WireConversation = serde_json::from_str(&line)
            .map_err(|source| CorpusError::Parse { line: line_no, source })?;
        let conv: Conversation = wire.into();
        conv.validate(max_pairs, line_no)?;
        out.push(conv);
    }
    Ok(out)
}

/// Serialize one conversation to its canonical single-line JSON form.
pub fn to_json_line(conv: &Conversation) -> String {
    serde_json::to_string(&WireConversation::from(conv)).expect("conversation serializes")
}

/// Write a corpus as JSONL, one canonical line per conversation.
pub fn save_jsonl(path: impl AsRef<Path>, convs: &[Conversation]) -> Result<(), CorpusError> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    for conv in convs {
        w.write_all(to_json_line(conv).as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv() -> Conversation {
        Conversation {
            id: "c0".into(),
            knowledge: vec![
                KnowledgeTriple::new("session", "starts_from", "vega"),
                KnowledgeTriple::new("vega", "follows", "lyra"),
            ],
            profile: vec![("prefers".into(), "follows".into())],
            history: vec![
                Utterance::user("hi , tell me about vega ."),
                Utterance::system("sure , let us chat about vega ."),
                Utterance::user("nice , tell me more ."),
            ],
            path: DialoguePath::new(vec![
                PathStep::new("chat_about", "vega"),
                PathStep::new("recommend", "lyra"),
            ]),
            target: PathStep::new("recommend", "lyra"),
            responses: vec![
                "sure , let us chat about vega .".into(),
                "i recommend lyra , since vega follows lyra .".into(),
            ],
        }
    }

    #[test]
    fn one_valid_line_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        save_jsonl(&path, &[conv()]).unwrap();
        let loaded = load_jsonl(&path, 14).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0], conv());
    }

    #[test]
    fn round_trip_is_structurally_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        save_jsonl(&a, &[conv(), conv()]).unwrap();
        let loaded = load_jsonl(&a, 14).unwrap();
        save_jsonl(&b, &loaded).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn missing_target_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let mut line = to_json_line(&conv());
        line = line.replace("\"target\"", "\"tarGet\"");
        std::fs::write(&path, format!("{line}\n")).unwrap();
        let err = load_jsonl(&path, 14).unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 1, .. }), "got {err}");
    }

    #[test]
    fn second_bad_line_reports_line_two() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad2.jsonl");
        std::fs::write(&path, format!("{}\nnot json\n", to_json_line(&conv()))).unwrap();
        let err = load_jsonl(&path, 14).unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 2, .. }), "got {err}");
    }

    #[test]
    fn invariant_violation_names_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("schema.jsonl");
        let mut c = conv();
        c.knowledge.pop(); // lyra now ungrounded
        save_jsonl(&path, &[c]).unwrap();
        let err = load_jsonl(&path, 14).unwrap_err();
        assert!(
            matches!(err, CorpusError::Schema { line: 1, ref field, .. } if field == "path[1].topic"),
            "got {err}"
        );
    }

    #[test]
    fn blank_lines_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("blank.jsonl");
        std::fs::write(&path, format!("\n{}\n\n", to_json_line(&conv()))).unwrap();
        assert_eq!(load_jsonl(&path, 14).unwrap().len(), 1);
    }
}
