//! Typed vocabulary over a corpus, and the path token grammar
//! `([A] action [T] topic)+ EOS`.
//!
//! Actions, topics, and every knowledge entity/relation are atomic tokens
//! (internal whitespace joined with `_`), which keeps step accuracy
//! well-defined and the decoding grammar trivial. Utterance and profile text
//! contributes lowercased whitespace-split word tokens.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::types::{Conversation, CorpusError, DialoguePath, PathStep};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenKind {
    Special,
    Action,
    Topic,
    Word,
}

pub const PAD_TOKEN: &str = "[PAD]";
pub const BOS_TOKEN: &str = "[BOS]";
pub const EOS_TOKEN: &str = "[EOS]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const A_TOKEN: &str = "[A]";
pub const T_TOKEN: &str = "[T]";
/// Speaker tags used when serializing dialogue history for the encoder.
/// Always interned so history encoding never depends on corpus text.
pub const USER_WORD: &str = "user";
pub const SYSTEM_WORD: &str = "system";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    kinds: Vec<TokenKind>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    pub pad: usize,
    pub bos: usize,
    pub eos: usize,
    pub unk: usize,
    pub a_marker: usize,
    pub t_marker: usize,
}

/// Join internal whitespace with underscores: "Leslie Cheung" becomes the
/// atomic token "Leslie_Cheung".
pub fn atomize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join("_")
}

impl Vocabulary {
    fn empty() -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            kinds: Vec::new(),
            index: HashMap::new(),
            pad: 0,
            bos: 0,
            eos: 0,
            unk: 0,
            a_marker: 0,
            t_marker: 0,
        };
        v.pad = v.intern(PAD_TOKEN, TokenKind::Special);
        v.bos = v.intern(BOS_TOKEN, TokenKind::Special);
        v.eos = v.intern(EOS_TOKEN, TokenKind::Special);
        v.unk = v.intern(UNK_TOKEN, TokenKind::Special);
        v.a_marker = v.intern(A_TOKEN, TokenKind::Special);
        v.t_marker = v.intern(T_TOKEN, TokenKind::Special);
        v
    }

    fn intern(&mut self, token: &str, kind: TokenKind) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        let i = self.tokens.len();
        self.tokens.push(token.to_string());
        self.kinds.push(kind);
        self.index.insert(token.to_string(), i);
        i
    }

    /// Rebuild the lookup table after deserialization (serde skips it).
    pub fn rebuild_index(&mut self) {
        self.index =
            self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn kind(&self, id: usize) -> TokenKind {
        self.kinds[id]
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Atomic lookup for an action or topic string as written in a path.
    pub fn get_atomic(&self, s: &str) -> Option<usize> {
        self.get(&atomize(s))
    }

    /// Word-level lookup used for utterance text; unknown words map to UNK.
    pub fn word_id(&self, word: &str) -> usize {
        self.get(&word.to_lowercase()).unwrap_or(self.unk)
    }

    /// Lowercased whitespace tokenization of free text into ids.
    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.word_id(w)).collect()
    }

    pub fn ids_of_kind(&self, kind: TokenKind) -> Vec<usize> {
        self.kinds
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| (k == kind).then_some(i))
            .collect()
    }
}

/// Collect the typed vocabulary of a corpus: specials, then actions, then
/// topics (path topics plus every knowledge entity), then words (atomized
/// relations plus utterance/profile words), each in first-seen order.
pub fn build_vocabulary(convs: &[Conversation]) -> Result<Vocabulary, CorpusError> {
    if convs.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut v = Vocabulary::empty();
    v.intern(USER_WORD, TokenKind::Word);
    v.intern(SYSTEM_WORD, TokenKind::Word);
    for c in convs {
        for step in c.path.steps().iter().chain(std::iter::once(&c.target)) {
            v.intern(&atomize(&step.action), TokenKind::Action);
        }
    }
    for c in convs {
        for step in c.path.steps().iter().chain(std::iter::once(&c.target)) {
            v.intern(&atomize(&step.topic), TokenKind::Topic);
        }
        for t in &c.knowledge {
            v.intern(&atomize(&t.subject), TokenKind::Topic);
            v.intern(&atomize(&t.object), TokenKind::Topic);
        }
    }
    for c in convs {
        for t in &c.knowledge {
            v.intern(&atomize(&t.relation), TokenKind::Word);
        }
        let texts = c
            .history
            .iter()
            .map(|u| u.text.as_str())
            .chain(c.responses.iter().map(String::as_str));
        for text in texts {
            for word in text.to_lowercase().split_whitespace() {
                v.intern(word, TokenKind::Word);
            }
        }
        for (k, val) in &c.profile {
            for word in format!("{k} {val}").to_lowercase().split_whitespace() {
                v.intern(word, TokenKind::Word);
            }
        }
    }
    Ok(v)
}

/// Serialize a path under the grammar `([A] action [T] topic)+ EOS`.
pub fn path_to_tokens(path: &DialoguePath, vocab: &Vocabulary) -> Result<Vec<usize>, CorpusError> {
    if path.is_empty() {
        return Err(CorpusError::Encode("empty path".into()));
    }
    let mut out = Vec::with_capacity(path.len() * 4 + 1);
    for step in path.steps() {
        let a = vocab
            .get_atomic(&step.action)
            .ok_or_else(|| CorpusError::Encode(format!("unknown action {:?}", step.action)))?;
        let t = vocab
            .get_atomic(&step.topic)
            .ok_or_else(|| CorpusError::Encode(format!("unknown topic {:?}", step.topic)))?;
        out.push(vocab.a_marker);
        out.push(a);
        out.push(vocab.t_marker);
        out.push(t);
    }
    out.push(vocab.eos);
    Ok(out)
}

/// Strict inverse of [`path_to_tokens`]: tokens must follow the grammar and
/// end with EOS (trailing PAD is tolerated, as teacher-forced sequences are
/// padded). Errors carry the first offending token position.
pub fn tokens_to_path(tokens: &[usize], vocab: &Vocabulary) -> Result<DialoguePath, CorpusError> {
    let bad = |position: usize, detail: String| CorpusError::Grammar { position, detail };
    let mut steps = Vec::new();
    let mut i = 0;
    loop {
        match tokens.get(i) {
            None => return Err(bad(i, "expected [A] or EOS, found end of input".into())),
            Some(&t) if t == vocab.eos => {
                i += 1;
                break;
            }
            Some(&t) if t == vocab.a_marker => {}
            Some(&t) => {
                return Err(bad(i, format!("expected [A] or EOS, found {:?}", vocab.token(t))))
            }
        }
        let action = match tokens.get(i + 1) {
            Some(&t) if vocab.kind(t) == TokenKind::Action => vocab.token(t).to_string(),
            Some(&t) => {
                return Err(bad(i + 1, format!("expected an action token, found {:?}", vocab.token(t))))
            }
            None => return Err(bad(i + 1, "expected an action token, found end of input".into())),
        };
        match tokens.get(i + 2) {
            Some(&t) if t == vocab.t_marker => {}
            Some(&t) => {
                return Err(bad(i + 2, format!("expected [T], found {:?}", vocab.token(t))))
            }
            None => return Err(bad(i + 2, "expected [T], found end of input".into())),
        }
        let topic = match tokens.get(i + 3) {
            Some(&t) if vocab.kind(t) == TokenKind::Topic => vocab.token(t).to_string(),
            Some(&t) => {
                return Err(bad(i + 3, format!("expected a topic token, found {:?}", vocab.token(t))))
            }
            None => return Err(bad(i + 3, "expected a topic token, found end of input".into())),
        };
        steps.push(PathStep { action, topic });
        i += 4;
    }
    if steps.is_empty() {
        return Err(bad(0, "path contains no pairs before EOS".into()));
    }
    if let Some(offset) = tokens[i..].iter().position(|&t| t != vocab.pad) {
        return Err(bad(i + offset, "unexpected tokens after EOS".into()));
    }
    Ok(DialoguePath::new(steps))
}
