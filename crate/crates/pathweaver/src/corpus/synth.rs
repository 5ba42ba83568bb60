//! Seeded synthetic dialogue corpus over a random topic graph.
//!
//! Each conversation walks the unique shortest route from a sampled start
//! topic to a sampled target topic. The knowledge set contains exactly the
//! oriented edges of that route plus a start marker triple
//! `("session", "starts_from", start)`, so hop distances from the target are
//! collision-free and every path topic is grounded. Utterances follow fixed
//! templates: the user opens by asking about the start topic, and each system
//! turn names the topic it advances to together with the supporting triple.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::types::{Conversation, CorpusError, DialoguePath, KnowledgeTriple, PathStep, Utterance};
use crate::num::SeedRng;

/// Relation index 0 is reserved for the start marker and never appears on a
/// graph edge.
pub const START_RELATION: &str = "starts_from";
/// Subject of the start marker triple.
pub const START_SUBJECT: &str = "session";

const RELATION_NAMES: [&str; 8] =
    ["features", "follows", "inspired", "covers", "samples", "references", "precedes", "echoes"];
const ACTION_NAMES: [&str; 8] =
    ["chat_about", "ask_about", "recommend", "describe", "play", "compare", "review", "suggest"];
const USER_FILLERS: [&str; 3] =
    ["interesting , go on .", "nice , tell me more .", "cool , what else ?"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_conversations: usize,
    pub n_topics: usize,
    pub n_relations: usize,
    pub n_actions: usize,
    pub max_pairs: usize,
    pub graph_degree: usize,
    pub history_turns: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 17,
            n_conversations: 500,
            n_topics: 60,
            n_relations: 6,
            n_actions: 6,
            max_pairs: 4,
            graph_degree: 3,
            history_turns: 6,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |msg: String| Err(CorpusError::BadConfig(msg));
        if self.n_conversations == 0 {
            return bad("n_conversations must be positive".into());
        }
        if self.n_topics < self.max_pairs {
            return bad(format!(
                "n_topics ({}) must be at least max_pairs ({})",
                self.n_topics, self.max_pairs
            ));
        }
        if self.n_topics < 2 {
            return bad("n_topics must be at least 2".into());
        }
        if !(2..=1 + RELATION_NAMES.len()).contains(&self.n_relations) {
            return bad(format!(
                "n_relations must be in 2..={} (index 0 is the reserved start marker)",
                1 + RELATION_NAMES.len()
            ));
        }
        if !(1..=ACTION_NAMES.len()).contains(&self.n_actions) {
            return bad(format!("n_actions must be in 1..={}", ACTION_NAMES.len()));
        }
        if self.max_pairs < 2 {
            return bad("max_pairs must be at least 2".into());
        }
        if self.graph_degree == 0 {
            return bad("graph_degree must be positive".into());
        }
        if self.history_turns < 2 {
            return bad("history_turns must be at least 2".into());
        }
        Ok(())
    }

    fn relation_name(&self, idx: usize) -> &'static str {
        if idx == 0 {
            START_RELATION
        } else {
            RELATION_NAMES[idx - 1]
        }
    }

    fn action_for_relation(&self, rel_idx: usize) -> &'static str {
        ACTION_NAMES[rel_idx % self.n_actions]
    }
}

/// Deterministic pronounceable topic name for an index: three
/// consonant-vowel syllables, bijective for indices below 70^3.
pub fn topic_name(index: usize) -> String {
    const CONSONANTS: &[u8] = b"bcdfglmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let mut n = index;
    let mut name = String::with_capacity(6);
    for _ in 0..3 {
        name.push(CONSONANTS[n % CONSONANTS.len()] as char);
        n /= CONSONANTS.len();
        name.push(VOWELS[n % VOWELS.len()] as char);
        n /= VOWELS.len();
    }
    if n > 0 {
        name.push_str(&n.to_string());
    }
    name
}

struct TopicGraph {
    /// adjacency[u] = (neighbor, relation index), undirected.
    adjacency: Vec<Vec<(usize, usize)>>,
}

impl TopicGraph {
    fn build(cfg: &SynthConfig, rng: &mut SeedRng) -> TopicGraph {
        let n = cfg.n_topics;
        let mut adjacency = vec![Vec::new(); n];
        let mut seen = BTreeSet::new();
        let add = |adjacency: &mut Vec<Vec<(usize, usize)>>,
                       seen: &mut BTreeSet<(usize, usize)>,
                       a: usize,
                       b: usize,
                       rel: usize| {
            if a == b || !seen.insert((a.min(b), a.max(b))) {
                return false;
            }
            adjacency[a].push((b, rel));
            adjacency[b].push((a, rel));
            true
        };
        // Random spanning tree keeps the graph connected.
        for i in 1..n {
            let parent = rng.below(i);
            let rel = 1 + rng.below(cfg.n_relations - 1);
            add(&mut adjacency, &mut seen, parent, i, rel);
        }
        // Extra edges up to roughly the requested average degree.
        let target_edges = n * cfg.graph_degree / 2;
        let mut attempts = 0;
        while seen.len() < target_edges && attempts < 20 * target_edges {
            attempts += 1;
            let a = rng.below(n);
            let b = rng.below(n);
            let rel = 1 + rng.below(cfg.n_relations - 1);
            add(&mut adjacency, &mut seen, a, b, rel);
        }
        TopicGraph { adjacency }
    }

    /// BFS distances from `root` plus a saturating count of distinct
    /// shortest paths to each node.
    fn shortest_path_counts(&self, root: usize) -> (Vec<Option<u32>>, Vec<u64>) {
        let n = self.adjacency.len();
        let mut dist = vec![None; n];
        let mut count = vec![0u64; n];
        let mut queue = std::collections::VecDeque::new();
        dist[root] = Some(0);
        count[root] = 1;
        queue.push_back(root);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap();
            for &(v, _) in &self.adjacency[u] {
                match dist[v] {
                    None => {
                        dist[v] = Some(du + 1);
                        count[v] = count[u];
                        queue.push_back(v);
                    }
                    Some(dv) if dv == du + 1 => {
                        count[v] = count[v].saturating_add(count[u]);
                    }
                    Some(_) => {}
                }
            }
        }
        (dist, count)
    }

    fn relation_between(&self, a: usize, b: usize) -> Option<usize> {
        self.adjacency[a].iter().find(|&&(v, _)| v == b).map(|&(_, rel)| rel)
    }
}

fn spaced(token: &str) -> String {
    token.replace('_', " ")
}

/// Generate a full corpus. Deterministic in the config (including its seed).
pub fn generate(cfg: &SynthConfig) -> Result<Vec<Conversation>, CorpusError> {
    cfg.validate()?;
    let base = SeedRng::new(cfg.seed);
    let graph = TopicGraph::build(cfg, &mut base.substream(1));
    let mut out = Vec::with_capacity(cfg.n_conversations);
    for c in 0..cfg.n_conversations {
        let mut rng = base.substream(1000 + c as u64);
        let conv = generate_conversation(cfg, &graph, &mut rng, c)?;
        let line = c + 1;
        conv.validate(cfg.max_pairs, line)?;
        out.push(conv);
    }
    Ok(out)
}

fn generate_conversation(
    cfg: &SynthConfig,
    graph: &TopicGraph,
    rng: &mut SeedRng,
    index: usize,
) -> Result<Conversation, CorpusError> {
    // Sample (start, target) whose shortest route is unique and fits the
    // pair budget; the route plus the start pair gives 2..=max_pairs steps.
    let mut route: Option<Vec<usize>> = None;
    for _ in 0..50 {
        let start = rng.below(cfg.n_topics);
        let target = rng.below(cfg.n_topics);
        if start == target {
            continue;
        }
        let (dist, count) = graph.shortest_path_counts(target);
        let d = match dist[start] {
            Some(d) if (1..=cfg.max_pairs as u32 - 1).contains(&d) => d,
            _ => continue,
        };
        if count[start] != 1 {
            continue;
        }
        let mut nodes = vec![start];
        let mut cur = start;
        for step in (0..d).rev() {
            let next = graph.adjacency[cur]
                .iter()
                .map(|&(v, _)| v)
                .find(|&v| dist[v] == Some(step))
                .expect("unique shortest route has a next hop");
            nodes.push(next);
            cur = next;
        }
        route = Some(nodes);
        break;
    }
    let nodes = route.ok_or_else(|| {
        CorpusError::Generation(format!(
            "no admissible start/target pair found for conversation {index} \
             after 50 samples; the topic graph is too dense or max_pairs too small"
        ))
    })?;

    let names: Vec<String> = nodes.iter().map(|&u| topic_name(u)).collect();
    let t_pairs = nodes.len();

    // Knowledge: the oriented route edges plus the start marker.
    let mut edge_relations = Vec::with_capacity(t_pairs - 1);
    let mut knowledge = Vec::with_capacity(t_pairs);
    for i in 0..t_pairs - 1 {
        let rel = graph
            .relation_between(nodes[i], nodes[i + 1])
            .expect("route follows graph edges");
        edge_relations.push(rel);
        knowledge.push(KnowledgeTriple::new(&names[i], cfg.relation_name(rel), &names[i + 1]));
    }
    knowledge.push(KnowledgeTriple::new(START_SUBJECT, START_RELATION, &names[0]));
    rng.shuffle(&mut knowledge);

    // Path: the start pair uses the marker relation's action, every later
    // pair the action determined by the edge it traverses.
    let mut steps = Vec::with_capacity(t_pairs);
    steps.push(PathStep::new(cfg.action_for_relation(0), &names[0]));
    for i in 1..t_pairs {
        steps.push(PathStep::new(cfg.action_for_relation(edge_relations[i - 1]), &names[i]));
    }
    let target = steps.last().unwrap().clone();

    // Templated turns: user asks, system advances one path step per turn.
    let mut history = Vec::with_capacity(2 * t_pairs - 1);
    let mut responses = Vec::with_capacity(t_pairs);
    for (j, step) in steps.iter().enumerate() {
        if j == 0 {
            history.push(Utterance::user(format!(
                "hi . i would love to hear about {} .",
                names[0]
            )));
        } else {
            history.push(Utterance::user(USER_FILLERS[(j - 1) % USER_FILLERS.len()]));
        }
        let triple = if j == 0 {
            KnowledgeTriple::new(START_SUBJECT, START_RELATION, &names[0])
        } else {
            KnowledgeTriple::new(
                &names[j - 1],
                cfg.relation_name(edge_relations[j - 1]),
                &names[j],
            )
        };
        let line = format!(
            "sure , {} {} . i know {} {} {} .",
            spaced(&step.action),
            step.topic,
            spaced(&triple.subject),
            spaced(&triple.relation),
            spaced(&triple.object),
        );
        if j + 1 < t_pairs {
            history.push(Utterance::system(line.clone()));
        }
        responses.push(line);
    }

    Ok(Conversation {
        id: format!("synth-{index:05}"),
        knowledge,
        profile: vec![("persona".into(), "curious listener".into())],
        history,
        path: DialoguePath::new(steps),
        target,
        responses,
    })
}
