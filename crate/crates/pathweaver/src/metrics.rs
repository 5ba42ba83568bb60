//! Planning metrics (accuracy and bigram accuracy over predicted
//! subtargets) and generation metrics (word-level F1, BLEU-1/2, DIST-1/2,
//! knowledge-F1, target success), plus the aligned text-table renderer the
//! evaluation reports share.

use std::collections::{HashMap, HashSet};

use serde::Serialize;
use thiserror::Error;

use crate::corpus::types::KnowledgeTriple;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("length mismatch: {predictions} predictions vs {golds} golds")]
    LengthMismatch { predictions: usize, golds: usize },
}

/// Lowercased whitespace tokens; underscores join multi-word names during
/// path decoding, so they split back into words here.
pub fn tokenize(text: &str) -> Vec<String> {
    text.replace('_', " ")
        .to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// The gold continuation for one evaluation item: the next gold pair and,
/// when the path goes on, the one after it.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldNext {
    pub next: (String, String),
    pub next_next: Option<(String, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PlanEval {
    pub action_acc: f64,
    pub action_bi_acc: f64,
    pub topic_acc: f64,
    pub topic_bi_acc: f64,
    pub n_examples: usize,
}

/// Accuracy: prediction equals the gold next pair, actions and topics
/// scored separately. Bigram accuracy: prediction equals the gold next or
/// the gold next-next, so it can never fall below plain accuracy.
pub fn plan_accuracy(
    predictions: &[(String, String)],
    golds: &[GoldNext],
) -> Result<PlanEval, MetricError> {
    if predictions.len() != golds.len() {
        return Err(MetricError::LengthMismatch {
            predictions: predictions.len(),
            golds: golds.len(),
        });
    }
    let n = predictions.len();
    if n == 0 {
        return Ok(PlanEval {
            action_acc: 0.0,
            action_bi_acc: 0.0,
            topic_acc: 0.0,
            topic_bi_acc: 0.0,
            n_examples: 0,
        });
    }
    let mut a_hit = 0usize;
    let mut a_bi = 0usize;
    let mut t_hit = 0usize;
    let mut t_bi = 0usize;
    for ((pa, pt), gold) in predictions.iter().zip(golds) {
        let (ga, gt) = &gold.next;
        if pa == ga {
            a_hit += 1;
        }
        if pt == gt {
            t_hit += 1;
        }
        let a2 = gold.next_next.as_ref().map(|(a, _)| a == pa).unwrap_or(false);
        let t2 = gold.next_next.as_ref().map(|(_, t)| t == pt).unwrap_or(false);
        if pa == ga || a2 {
            a_bi += 1;
        }
        if pt == gt || t2 {
            t_bi += 1;
        }
    }
    let f = |x: usize| x as f64 / n as f64;
    Ok(PlanEval {
        action_acc: f(a_hit),
        action_bi_acc: f(a_bi),
        topic_acc: f(t_hit),
        topic_bi_acc: f(t_bi),
        n_examples: n,
    })
}

fn counts<'a>(tokens: &'a [String]) -> HashMap<&'a str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

/// Harmonic mean of token-multiset precision and recall. Both empty scores
/// a perfect 1.0; exactly one empty scores 0.0.
pub fn word_f1(hyp: &[String], reference: &[String]) -> f64 {
    match (hyp.is_empty(), reference.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let h = counts(hyp);
    let r = counts(reference);
    let overlap: usize = h
        .iter()
        .map(|(tok, &c)| c.min(r.get(tok).copied().unwrap_or(0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / hyp.len() as f64;
    let rc = overlap as f64 / reference.len() as f64;
    2.0 * p * rc / (p + rc)
}

const BLEU_EPS: f64 = 1e-9;

fn ngram_counts(tokens: &[String], k: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= k {
        for w in tokens.windows(k) {
            let key: Vec<&str> = w.iter().map(String::as_str).collect();
            *m.entry(key).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence-level BLEU-n: clipped n-gram precisions cumulated with uniform
/// weights, epsilon-smoothed, under the standard brevity penalty
/// `exp(1 − |ref|/|hyp|)` for short hypotheses.
pub fn bleu(hyp: &[String], reference: &[String], n: usize) -> f64 {
    assert!(n >= 1, "bleu order must be at least 1");
    if hyp.is_empty() {
        return if reference.is_empty() { 1.0 } else { 0.0 };
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let h = ngram_counts(hyp, k);
        let r = ngram_counts(reference, k);
        let matches: usize =
            h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
        let total = hyp.len().saturating_sub(k - 1);
        let p = (matches as f64 + BLEU_EPS) / (total as f64 + BLEU_EPS);
        log_sum += p.ln();
    }
    let precision = (log_sum / n as f64).exp();
    let bp = if hyp.len() < reference.len() {
        (1.0 - reference.len() as f64 / hyp.len() as f64).exp()
    } else {
        1.0
    };
    (bp * precision).clamp(0.0, 1.0)
}

/// Corpus-level distinct-n: unique n-grams across every response divided by
/// the total n-gram count; 0.0 when the corpus has no n-grams at all.
pub fn distinct_n(responses: &[Vec<String>], n: usize) -> f64 {
    let mut seen: HashSet<Vec<&str>> = HashSet::new();
    let mut total = 0usize;
    for tokens in responses {
        if tokens.len() >= n {
            for w in tokens.windows(n) {
                seen.insert(w.iter().map(String::as_str).collect());
                total += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        seen.len() as f64 / total as f64
    }
}

fn normalized(s: &str) -> String {
    tokenize(s).join(" ")
}

/// Triples grounding the current subtarget: subject or object equals the
/// subtarget topic (after case/underscore normalization).
pub fn active_triples<'a>(
    knowledge: &'a [KnowledgeTriple],
    subtarget_topic: &str,
) -> Vec<&'a KnowledgeTriple> {
    let key = normalized(subtarget_topic);
    knowledge
        .iter()
        .filter(|t| normalized(&t.subject) == key || normalized(&t.object) == key)
        .collect()
}

/// Word-level F1 between the response and the token multiset of the active
/// triples' object strings. `None` when no triple is active for the
/// subtarget — callers exclude such turns from the average and count them
/// separately.
pub fn knowledge_f1(
    hyp: &[String],
    knowledge: &[KnowledgeTriple],
    subtarget_topic: &str,
) -> Option<f64> {
    let active = active_triples(knowledge, subtarget_topic);
    if active.is_empty() {
        return None;
    }
    let mut reference = Vec::new();
    for t in active {
        reference.extend(tokenize(&t.object));
    }
    Some(word_f1(hyp, &reference))
}

/// One iff some system turn at or after the plan's target turn mentions
/// every token of the target topic.
pub fn target_success(system_turns: &[String], target_turn: usize, target_topic: &str) -> bool {
    let want = tokenize(target_topic);
    if want.is_empty() {
        return false;
    }
    system_turns.iter().skip(target_turn).any(|turn| {
        let have: HashSet<String> = tokenize(turn).into_iter().collect();
        want.iter().all(|w| have.contains(w))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GenEval {
    pub f1: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub dist1: f64,
    pub dist2: f64,
    pub know_f1: f64,
    pub succ: f64,
    pub n_responses: usize,
}

/// Render rows of (label, values) under headers as a fixed two-decimal
/// aligned table.
pub fn render_table(first_header: &str, headers: &[&str], rows: &[(String, Vec<f64>)]) -> String {
    let mut label_w = first_header.len();
    for (label, _) in rows {
        label_w = label_w.max(label.len());
    }
    let col_w: Vec<usize> = headers.iter().map(|h| h.len().max(5)).collect();
    let mut out = String::new();
    out.push_str(&format!("{:<label_w$}", first_header));
    for (h, w) in headers.iter().zip(&col_w) {
        out.push_str(&format!("  {h:>w$}"));
    }
    out.push('\n');
    out.push_str(&"-".repeat(label_w + col_w.iter().map(|w| w + 2).sum::<usize>()));
    out.push('\n');
    for (label, values) in rows {
        out.push_str(&format!("{label:<label_w$}"));
        for (v, w) in values.iter().zip(&col_w) {
            out.push_str(&format!("  {:>w$.2}", v));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::SeedRng;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        let preds = vec![
            ("play".to_string(), "song_a".to_string()),
            ("chat".to_string(), "star_b".to_string()),
        ];
        let golds = vec![
            GoldNext {
                next: ("play".into(), "song_a".into()),
                next_next: Some(("chat".into(), "star_b".into())),
            },
            GoldNext { next: ("chat".into(), "star_b".into()), next_next: None },
        ];
        let e = plan_accuracy(&preds, &golds).unwrap();
        assert_eq!(
            (e.action_acc, e.action_bi_acc, e.topic_acc, e.topic_bi_acc),
            (1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn next_next_only_match_counts_for_bigram_accuracy_only() {
        let preds = vec![("b".to_string(), "t2".to_string())];
        let golds = vec![GoldNext {
            next: ("a".into(), "t1".into()),
            next_next: Some(("b".into(), "t2".into())),
        }];
        let e = plan_accuracy(&preds, &golds).unwrap();
        assert_eq!(e.action_acc, 0.0);
        assert_eq!(e.action_bi_acc, 1.0);
        assert_eq!(e.topic_acc, 0.0);
        assert_eq!(e.topic_bi_acc, 1.0);
    }

    #[test]
    fn plan_accuracy_matches_brute_force_recount() {
        let mut rng = SeedRng::new(7);
        for _ in 0..25 {
            let n = 1 + rng.below(12);
            let sym = |r: &mut SeedRng| format!("s{}", r.below(4));
            let preds: Vec<(String, String)> =
                (0..n).map(|_| (sym(&mut rng), sym(&mut rng))).collect();
            let golds: Vec<GoldNext> = (0..n)
                .map(|_| GoldNext {
                    next: (sym(&mut rng), sym(&mut rng)),
                    next_next: if rng.chance(0.5) {
                        Some((sym(&mut rng), sym(&mut rng)))
                    } else {
                        None
                    },
                })
                .collect();
            let e = plan_accuracy(&preds, &golds).unwrap();
            // Independent recount, one counter at a time.
            let recount = |pick: fn(&(String, String)) -> &String, bi: bool| -> f64 {
                let mut hits = 0;
                for (p, g) in preds.iter().zip(&golds) {
                    let direct = pick(p) == pick(&g.next);
                    let second =
                        bi && g.next_next.as_ref().map(|x| pick(p) == pick(x)).unwrap_or(false);
                    if direct || second {
                        hits += 1;
                    }
                }
                hits as f64 / n as f64
            };
            assert!((e.action_acc - recount(|x| &x.0, false)).abs() < 1e-9);
            assert!((e.action_bi_acc - recount(|x| &x.0, true)).abs() < 1e-9);
            assert!((e.topic_acc - recount(|x| &x.1, false)).abs() < 1e-9);
            assert!((e.topic_bi_acc - recount(|x| &x.1, true)).abs() < 1e-9);
            assert!(e.action_bi_acc >= e.action_acc);
            assert!(e.topic_bi_acc >= e.topic_acc);
        }
    }

    #[test]
    fn mismatched_lengths_error() {
        let e = plan_accuracy(&[("a".into(), "b".into())], &[]);
        assert!(matches!(e, Err(MetricError::LengthMismatch { .. })));
    }

    #[test]
    fn word_f1_hand_cases() {
        assert_eq!(word_f1(&toks("the same line"), &toks("the same line")), 1.0);
        assert_eq!(word_f1(&toks("aa bb"), &toks("cc dd")), 0.0);
        assert_eq!(word_f1(&[], &[]), 1.0);
        assert_eq!(word_f1(&toks("something"), &[]), 0.0);
        assert_eq!(word_f1(&[], &toks("something")), 0.0);
        // hyp "a b b" vs ref "a b c": overlap 2, P = R = 2/3.
        let f = word_f1(&toks("a b b"), &toks("a b c"));
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn word_f1_matches_brute_force_multiset_overlap() {
        let mut rng = SeedRng::new(11);
        for _ in 0..25 {
            let draw = |r: &mut SeedRng| -> Vec<String> {
                (0..r.below(8)).map(|_| format!("w{}", r.below(5))).collect()
            };
            let h = draw(&mut rng);
            let r = draw(&mut rng);
            let got = word_f1(&h, &r);
            // Oracle: count overlap by repeatedly removing matched tokens.
            let mut pool = r.clone();
            let mut overlap = 0usize;
            for t in &h {
                if let Some(pos) = pool.iter().position(|x| x == t) {
                    pool.remove(pos);
                    overlap += 1;
                }
            }
            let want = match (h.is_empty(), r.is_empty()) {
                (true, true) => 1.0,
                (true, false) | (false, true) => 0.0,
                _ if overlap == 0 => 0.0,
                _ => {
                    let p = overlap as f64 / h.len() as f64;
                    let rc = overlap as f64 / r.len() as f64;
                    2.0 * p * rc / (p + rc)
                }
            };
            assert!((got - want).abs() < 1e-9, "{h:?} vs {r:?}: {got} != {want}");
        }
    }

    #[test]
    fn bleu_identity_and_brevity() {
        let r = toks("one two three four");
        assert!((bleu(&r, &r, 1) - 1.0).abs() < 1e-12);
        assert!((bleu(&r, &r, 2) - 1.0).abs() < 1e-12);
        // Perfect-precision prefix of half the length: only the penalty acts.
        let h = toks("one two");
        let got = bleu(&h, &r, 1);
        let want = (1.0f64 - 4.0 / 2.0).exp();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn bleu_matches_independent_ngram_oracle() {
        let mut rng = SeedRng::new(13);
        for _ in 0..25 {
            let draw = |r: &mut SeedRng| -> Vec<String> {
                (0..1 + r.below(7)).map(|_| format!("w{}", r.below(4))).collect()
            };
            let h = draw(&mut rng);
            let r = draw(&mut rng);
            for n in 1..=2usize {
                let got = bleu(&h, &r, n);
                // Oracle: nested-loop clipped counts without hash maps.
                let mut log_sum = 0.0;
                for k in 1..=n {
                    let grams = |t: &[String]| -> Vec<Vec<String>> {
                        if t.len() < k {
                            Vec::new()
                        } else {
                            t.windows(k).map(|w| w.to_vec()).collect()
                        }
                    };
                    let hg = grams(&h);
                    let rg = grams(&r);
                    let mut matches = 0usize;
                    let mut used = vec![false; rg.len()];
                    for g in &hg {
                        if let Some(pos) =
                            rg.iter().enumerate().position(|(i, x)| !used[i] && x == g)
                        {
                            used[pos] = true;
                            matches += 1;
                        }
                    }
                    log_sum += ((matches as f64 + 1e-9) / (hg.len() as f64 + 1e-9)).ln();
                }
                let mut want = (log_sum / n as f64).exp();
                if h.len() < r.len() {
                    want *= (1.0 - r.len() as f64 / h.len() as f64).exp();
                }
                want = want.clamp(0.0, 1.0);
                assert!((got - want).abs() < 1e-9, "n={n} {h:?} vs {r:?}");
            }
        }
    }

    #[test]
    fn distinct_hand_cases() {
        assert!((distinct_n(&[toks("a b a")], 1) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(distinct_n(&[], 1), 0.0);
        assert_eq!(distinct_n(&[toks("unique tokens only here")], 1), 1.0);
        // Bigrams of "a b a b": (a b), (b a), (a b) → 2 unique / 3 total.
        assert!((distinct_n(&[toks("a b a b")], 2) - 2.0 / 3.0).abs() < 1e-12);
        // Repetition across responses lowers it.
        let twice = vec![toks("a b"), toks("a b")];
        assert!((distinct_n(&twice, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn distinct_is_order_invariant() {
        let a = vec![toks("x y"), toks("y z"), toks("z z")];
        let mut b = a.clone();
        b.reverse();
        for n in 1..=2 {
            assert_eq!(distinct_n(&a, n), distinct_n(&b, n));
        }
    }

    fn triple(s: &str, p: &str, o: &str) -> KnowledgeTriple {
        KnowledgeTriple { subject: s.into(), relation: p.into(), object: o.into() }
    }

    #[test]
    fn knowledge_f1_hand_cases() {
        let know = vec![
            triple("star_a", "sings", "song_one"),
            triple("song_one", "genre", "ballad"),
            triple("star_b", "born_in", "city_c"),
        ];
        // Active for song_one: both the first (object) and second (subject).
        let hyp = toks("song_one ballad");
        let got = knowledge_f1(&hyp, &know, "song_one").unwrap();
        assert_eq!(got, 1.0, "hyp holds exactly the active objects' tokens");
        assert!(knowledge_f1(&toks("anything"), &know, "unrelated_topic").is_none());
        // Multi-word object, underscore/case normalization.
        let know2 = vec![triple("Star A", "performs", "Grand Ice Show")];
        let got2 = knowledge_f1(&toks("the grand ice show tonight"), &know2, "star_a").unwrap();
        // Ref tokens {grand, ice, show}: overlap 3, P=3/5, R=1.
        assert!((got2 - 2.0 * (3.0 / 5.0) / (3.0 / 5.0 + 1.0)).abs() < 1e-9);
    }

    #[test]
    fn target_success_respects_the_target_turn() {
        let turns = vec![
            "we talk about star_a today".to_string(),
            "now the grand finale".to_string(),
            "here comes song_one for you".to_string(),
        ];
        assert!(target_success(&turns, 2, "song_one"));
        assert!(target_success(&turns, 0, "song_one"));
        assert!(!target_success(&turns, 0, "never_mentioned"));
        // Mentioned only before the target turn: no success.
        assert!(!target_success(&turns, 1, "star_a"));
        // Multi-word topic needs every token after the target turn.
        assert!(target_success(&turns, 1, "grand finale"));
        assert!(!target_success(&turns, 2, "grand finale"));
    }

    #[test]
    fn metrics_stay_in_unit_interval_under_fuzz() {
        let mut rng = SeedRng::new(17);
        for _ in 0..40 {
            let draw = |r: &mut SeedRng| -> Vec<String> {
                (0..r.below(10)).map(|_| format!("w{}", r.below(6))).collect()
            };
            let h = draw(&mut rng);
            let r = draw(&mut rng);
            for v in [word_f1(&h, &r), bleu(&h, &r, 1), bleu(&h, &r, 2)] {
                assert!((0.0..=1.0).contains(&v), "{v} out of range");
            }
            let corpus: Vec<Vec<String>> = (0..rng.below(4)).map(|_| draw(&mut rng)).collect();
            for n in 1..=2 {
                let d = distinct_n(&corpus, n);
                assert!((0.0..=1.0).contains(&d));
            }
        }
    }

    #[test]
    fn table_renders_aligned_two_decimal_columns() {
        let rows = vec![
            ("ff".to_string(), vec![0.9512, 0.873]),
            ("no-ff".to_string(), vec![0.5, 1.0]),
        ];
        let table = render_table("variant", &["Acc.", "Bi.Acc."], &rows);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].contains("Acc."));
        assert!(lines[2].contains("0.95"));
        assert!(lines[3].contains("no-ff"));
        assert!(lines[3].contains("1.00"));
        let width = lines[0].len();
        assert!(lines[2..].iter().all(|l| l.len() == width), "rows align with the header");
    }
}
