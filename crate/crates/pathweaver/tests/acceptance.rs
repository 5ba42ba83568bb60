//! Acceptance suite: one test per project acceptance criterion, each
//! printing a `[criterion NN] <name>: PASS` (or `FAIL`) line. Run with
//! `cargo test --test acceptance -- --nocapture` to see the per-criterion
//! report; the test names double as the machine-readable outcome.

use std::io::{Read as IoRead, Write as IoWrite};
use std::net::TcpListener;
use std::panic::AssertUnwindSafe;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use sha2::{Digest, Sha256};

use pathweaver::config::{Config, Profile};
use pathweaver::corpus::{
    build_vocabulary, generate, save_jsonl, slice_corpus, to_json_line, tokens_to_path,
    KnowledgeTriple, PathStep, SynthConfig, Utterance,
};
use pathweaver::decoding::{greedy_decode, PlanOptions};
use pathweaver::encoder::{encode_example, EncoderConfig};
use pathweaver::eval::{ablate, evaluate_e2e, evaluate_planning, ExecMode, OfflineResponder};
use pathweaver::metrics::{
    bleu, distinct_n, knowledge_f1, target_success, tokenize, word_f1,
};
use pathweaver::num::layers::Dropper;
use pathweaver::num::{GraphCtx, ParamStore, SeedRng, Tensor};
use pathweaver::planner::{
    forward_example, fuse_forward_focused, fuse_variant, PathDirection, PlannerConfig,
    PlannerModel, Variant,
};
use pathweaver::responder::{
    build_prompt, LlmClient, LlmEndpointConfig, PromptCaps, PromptSpec, ResponderError,
};
use pathweaver::training::{
    example_losses, state_distance_node, teacher_forced_accuracy, train, TrainConfig,
};

/// Run `body`, then print the per-criterion result line. Panics propagate
/// so the test still fails normally, but the line is printed either way.
fn criterion<F: FnOnce()>(n: u32, name: &str, body: F) {
    let started = Instant::now();
    match std::panic::catch_unwind(AssertUnwindSafe(body)) {
        Ok(()) => println!(
            "[criterion {n:02}] {name}: PASS ({:.1}s)",
            started.elapsed().as_secs_f64()
        ),
        Err(cause) => {
            println!("[criterion {n:02}] {name}: FAIL");
            std::panic::resume_unwind(cause);
        }
    }
}

// ---------------------------------------------------------------- criterion 1

#[test]
fn c01_gradients_match_finite_differences() {
    criterion(1, "gradient correctness vs central differences", || {
        let started = Instant::now();
        for seed in 1..=5u64 {
            let synth = SynthConfig {
                seed: 100 + seed,
                n_conversations: 3,
                n_topics: 10,
                ..SynthConfig::default()
            };
            let convs = generate(&synth).unwrap();
            let vocab = build_vocabulary(&convs).unwrap();
            let encoder = EncoderConfig {
                hidden_dim: 8,
                n_layers: 1,
                n_heads: 2,
                max_hops: 4,
                max_knowledge_items: 6,
                max_seq_len: 24,
                dropout: 0.0,
            };
            let planner = PlannerConfig {
                hidden_dim: 8,
                n_decoder_layers: 1,
                n_heads: 2,
                variant: Variant::Ff,
                max_pairs: synth.max_pairs,
                tie_output_embeddings: false,
            };
            let model =
                PlannerModel::<f64>::init(encoder, planner, vocab, seed).unwrap();
            // Short remaining paths keep the finite-difference sweep fast
            // without changing which parameters the loss touches.
            let mut examples = slice_corpus(&convs, 4);
            examples.sort_by_key(|e| e.remaining_path.len());
            let example = examples[(seed as usize - 1) % 2].clone();
            let cfg = TrainConfig::default();
            pathweaver::num::gradcheck::check_store_grads(
                &model.store,
                |ctx| {
                    example_losses(
                        ctx,
                        &model.encoder,
                        &model.planner,
                        &model.vocab,
                        &example,
                        &cfg,
                        &mut Dropper::off(),
                    )
                    .unwrap()
                    .total
                },
                1e-5,
            );
        }
        let elapsed = started.elapsed().as_secs_f64();
        assert!(elapsed < 120.0, "gradient check took {elapsed:.1}s, budget is 2 min");
    });
}

// ---------------------------------------------------------------- criterion 2

#[test]
fn c02_fusion_algebra_invariants() {
    criterion(2, "fusion algebra on 1000 random tensors", || {
        let mut rng = SeedRng::new(20_202);
        for case in 0..1000usize {
            let h = 2 + case % 4;
            let rows = 1 + case % 3;
            let n = rows * h;
            let mut store = ParamStore::<f64>::new();
            let mut draw = |r: usize, c: usize, rng: &mut SeedRng| {
                Tensor::from_vec(r, c, (0..r * c).map(|_| rng.uniform(-0.35, 0.35)).collect())
            };
            store.insert("fuse.gate.w", draw(h, h, &mut rng));
            store.insert("fuse.gate.b", draw(1, h, &mut rng));
            store.insert("fuse.mlp1.w", draw(2 * h, 2 * h, &mut rng));
            store.insert("fuse.mlp1.b", draw(1, 2 * h, &mut rng));
            store.insert("fuse.mlp2.w", draw(2 * h, h, &mut rng));
            store.insert("fuse.mlp2.b", draw(1, h, &mut rng));

            // Equal streams: F' must equal F_f bit for bit.
            let shared: Vec<f64> = (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let mut ctx = GraphCtx::new(&store, false);
            let f = ctx.tape.constant(rows, h, shared.clone()).unwrap();
            let g = ctx.tape.constant(rows, h, shared.clone()).unwrap();
            let eq = fuse_forward_focused(&mut ctx, f, g).unwrap();
            for (got, want) in ctx.tape.value(eq.f_prime).iter().zip(&shared) {
                assert_eq!(
                    got.to_bits(),
                    want.to_bits(),
                    "equal streams must pass through exactly"
                );
            }

            // Distinct streams: interval bound, strict betweenness, open gate.
            let a: Vec<f64> = (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let f_f = ctx.tape.constant(rows, h, a.clone()).unwrap();
            let f_b = ctx.tape.constant(rows, h, b.clone()).unwrap();
            let fused = fuse_forward_focused(&mut ctx, f_f, f_b).unwrap();
            let w = ctx.tape.value(fused.f_weight).to_vec();
            let fp = ctx.tape.value(fused.f_prime).to_vec();
            let fpp = ctx.tape.value(fused.f_pp).to_vec();
            let out = ctx.tape.value(fused.out).to_vec();
            for i in 0..n {
                assert!(w[i] > 0.0 && w[i] < 1.0, "gate weight must lie in (0,1)");
                let (lo, hi) = (a[i].min(b[i]), a[i].max(b[i]));
                assert!(
                    fp[i] >= lo && fp[i] <= hi,
                    "F'[{i}] = {} outside [{lo}, {hi}]",
                    fp[i]
                );
                if fpp[i] != fp[i] {
                    let (lo, hi) = (fpp[i].min(fp[i]), fpp[i].max(fp[i]));
                    assert!(
                        out[i] > lo && out[i] < hi,
                        "O[{i}] = {} not strictly inside ({lo}, {hi})",
                        out[i]
                    );
                }
            }

            // BF is the exact mirror of FF: same bits with swapped streams.
            let bf = fuse_variant(&mut ctx, Variant::Bf, f_f, f_b).unwrap();
            let ff_sw = fuse_forward_focused(&mut ctx, f_b, f_f).unwrap().out;
            let bf_bits: Vec<u64> = ctx.tape.value(bf).iter().map(|v| v.to_bits()).collect();
            let ff_bits: Vec<u64> =
                ctx.tape.value(ff_sw).iter().map(|v| v.to_bits()).collect();
            assert_eq!(bf_bits, ff_bits, "BF(F_f,F_b) must equal FF(F_b,F_f) to 0 ulp");
        }
    });
}

// ---------------------------------------------------------------- criterion 3

#[test]
fn c03_loss_identities() {
    criterion(3, "loss recombination and L4 zero iff equal streams", || {
        let synth =
            SynthConfig { seed: 303, n_conversations: 4, n_topics: 14, ..SynthConfig::default() };
        let convs = generate(&synth).unwrap();
        let vocab = build_vocabulary(&convs).unwrap();
        let encoder = EncoderConfig {
            hidden_dim: 16,
            n_layers: 1,
            n_heads: 2,
            max_hops: 4,
            max_knowledge_items: 8,
            max_seq_len: 32,
            dropout: 0.0,
        };
        let planner = PlannerConfig {
            hidden_dim: 16,
            n_decoder_layers: 1,
            n_heads: 2,
            variant: Variant::Ff,
            max_pairs: synth.max_pairs,
            tie_output_embeddings: false,
        };
        let model = PlannerModel::<f64>::init(encoder, planner, vocab, 7).unwrap();
        let examples = slice_corpus(&convs, synth.history_turns);
        assert!(!examples.is_empty());

        for (gamma, beta) in [(0.5, 0.5), (0.7, 0.3)] {
            let cfg = TrainConfig { gamma, beta, ..TrainConfig::default() };
            for example in &examples {
                let mut ctx = GraphCtx::new(&model.store, false);
                let nodes = example_losses(
                    &mut ctx,
                    &model.encoder,
                    &model.planner,
                    &model.vocab,
                    example,
                    &cfg,
                    &mut Dropper::off(),
                )
                .unwrap();
                let (l1, l2, l3, l4, total) = (
                    ctx.tape.item(nodes.l1),
                    ctx.tape.item(nodes.l2),
                    ctx.tape.item(nodes.l3),
                    ctx.tape.item(nodes.l4),
                    ctx.tape.item(nodes.total),
                );
                // Independent scalar recombination of the logged terms.
                let recombined = gamma * l1 + beta * l2 + l3 + l4;
                assert!(
                    (total - recombined).abs() <= 1e-6,
                    "total {total} vs recombined {recombined} at gamma={gamma}, beta={beta}"
                );
            }
        }

        // Batch-level identity through the public loss aggregation.
        let cfg = TrainConfig::default();
        let batch = pathweaver::training::compute_losses(&model, &examples, &cfg).unwrap();
        let recombined = cfg.gamma * batch.l1 + cfg.beta * batch.l2 + batch.l3 + batch.l4;
        assert!((batch.total - recombined).abs() <= 1e-6);

        // L4 == 0 iff the teacher-forced forward states equal the aligned
        // backward states. Random decoders virtually never agree, so the
        // real model exercises the "only if" side…
        for example in &examples {
            let mut ctx = GraphCtx::new(&model.store, false);
            let tf = forward_example(
                &mut ctx,
                &model.encoder,
                &model.planner,
                &model.vocab,
                example,
                &mut Dropper::off(),
            )
            .unwrap();
            let d = state_distance_node(&mut ctx, tf.f_f, tf.f_b_aligned).unwrap();
            let l4 = ctx.tape.item(d);
            let equal = ctx.tape.value(tf.f_f) == ctx.tape.value(tf.f_b_aligned);
            assert_eq!(l4 == 0.0, equal, "L4 zero must coincide with stream equality");
            assert!(l4 >= 0.0);
        }
        // …and the distance node itself exercises both sides exactly.
        let mut rng = SeedRng::new(33);
        let empty = ParamStore::<f64>::new();
        for _ in 0..200 {
            let rows = 1 + rng.below(4);
            let cols = 1 + rng.below(6);
            let data: Vec<f64> =
                (0..rows * cols).map(|_| rng.uniform(-3.0, 3.0)).collect();
            let mut ctx = GraphCtx::new(&empty, false);
            let x = ctx.tape.constant(rows, cols, data.clone()).unwrap();
            let y = ctx.tape.constant(rows, cols, data.clone()).unwrap();
            let zero = state_distance_node(&mut ctx, x, y).unwrap();
            assert_eq!(ctx.tape.item(zero), 0.0, "equal streams give exactly zero");
            let mut bumped = data.clone();
            let at = rng.below(bumped.len());
            bumped[at] += rng.uniform(1e-4, 1.0);
            let z = ctx.tape.constant(rows, cols, bumped).unwrap();
            let pos = state_distance_node(&mut ctx, x, z).unwrap();
            assert!(ctx.tape.item(pos) > 0.0, "unequal streams give a positive L4");
        }
    });
}

// ---------------------------------------------------------------- criterion 4

#[test]
fn c04_desk_learnability() {
    criterion(4, "desk-profile learnability", || {
        let started = Instant::now();
        let cfg = Config::for_profile(Profile::Desk);
        assert_eq!(cfg.encoder.hidden_dim, 64);
        assert_eq!(cfg.planner.n_decoder_layers, 2);
        assert_eq!(cfg.synth.n_conversations, 500);
        assert!(cfg.train.epochs <= 30, "desk profile must train within 30 epochs");

        let convs = generate(&cfg.synth).unwrap();
        let vocab = build_vocabulary(&convs).unwrap();
        let (eval_convs, train_convs) = convs.split_at(50);
        let train_examples = slice_corpus(train_convs, cfg.synth.history_turns);
        let eval_examples = slice_corpus(eval_convs, cfg.synth.history_turns);

        let mut model = PlannerModel::<f32>::init(
            cfg.encoder.clone(),
            cfg.planner.clone(),
            vocab.clone(),
            cfg.train.seed,
        )
        .unwrap();
        let report = train(&mut model, &train_examples, &cfg.train).unwrap();
        assert!(!report.diverged, "desk training must not diverge");
        let eval = evaluate_planning(
            &model,
            &eval_examples,
            &PlanOptions::default(),
            ExecMode::Sequential,
        )
        .unwrap();
        assert!(
            eval.action_acc >= 0.95,
            "held-out next-action accuracy {:.3} < 0.95",
            eval.action_acc
        );
        assert!(
            eval.topic_acc >= 0.85,
            "held-out next-topic accuracy {:.3} < 0.85",
            eval.topic_acc
        );

        // 64-dialogue overfit probe: teacher-forced fusion-token accuracy.
        let overfit_examples = slice_corpus(&convs[..64], cfg.synth.history_turns);
        let mut overfit_model = PlannerModel::<f32>::init(
            cfg.encoder.clone(),
            cfg.planner.clone(),
            vocab,
            cfg.train.seed,
        )
        .unwrap();
        train(&mut overfit_model, &overfit_examples, &cfg.train).unwrap();
        let tf = teacher_forced_accuracy(&overfit_model, &overfit_examples).unwrap();
        assert!(
            tf.token_accuracy >= 0.99,
            "overfit teacher-forced token accuracy {:.4} < 0.99",
            tf.token_accuracy
        );

        let elapsed = started.elapsed().as_secs_f64();
        assert!(elapsed < 1200.0, "learnability run took {elapsed:.0}s, budget is 20 min");
    });
}

// ---------------------------------------------------------------- criterion 5

#[test]
fn c05_bidirectional_accuracy_superset() {
    criterion(5, "Bi.Acc >= Acc on every evaluation run", || {
        let synth =
            SynthConfig { seed: 505, n_conversations: 24, n_topics: 24, ..SynthConfig::default() };
        let convs = generate(&synth).unwrap();
        let vocab = build_vocabulary(&convs).unwrap();
        let encoder = EncoderConfig {
            hidden_dim: 16,
            n_layers: 1,
            n_heads: 2,
            max_hops: 4,
            max_knowledge_items: 8,
            max_seq_len: 32,
            dropout: 0.0,
        };
        let planner = PlannerConfig {
            hidden_dim: 16,
            n_decoder_layers: 1,
            n_heads: 2,
            variant: Variant::Ff,
            max_pairs: synth.max_pairs,
            tie_output_embeddings: false,
        };
        let examples = slice_corpus(&convs, synth.history_turns);
        let check = |model: &PlannerModel<f32>| {
            let eval = evaluate_planning(
                model,
                &examples,
                &PlanOptions::default(),
                ExecMode::Sequential,
            )
            .unwrap();
            assert!(
                eval.action_bi_acc >= eval.action_acc,
                "action Bi.Acc {} < Acc {}",
                eval.action_bi_acc,
                eval.action_acc
            );
            assert!(
                eval.topic_bi_acc >= eval.topic_acc,
                "topic Bi.Acc {} < Acc {}",
                eval.topic_bi_acc,
                eval.topic_acc
            );
        };
        // Untrained models with several seeds…
        for seed in [1, 2, 3] {
            let model = PlannerModel::<f32>::init(
                encoder.clone(),
                planner.clone(),
                vocab.clone(),
                seed,
            )
            .unwrap();
            check(&model);
        }
        // …and a briefly trained one.
        let mut model =
            PlannerModel::<f32>::init(encoder, planner, vocab, 9).unwrap();
        let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
        train(&mut model, &examples, &cfg).unwrap();
        check(&model);
    });
}

// ---------------------------------------------------------------- criterion 6

fn oracle_f1(hyp: &[String], reference: &[String]) -> f64 {
    if hyp.is_empty() && reference.is_empty() {
        return 1.0;
    }
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut left: Vec<&String> = reference.iter().collect();
    let mut overlap = 0usize;
    for tok in hyp {
        if let Some(at) = left.iter().position(|r| *r == tok) {
            left.remove(at);
            overlap += 1;
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / hyp.len() as f64;
    let r = overlap as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

fn oracle_bleu(hyp: &[String], reference: &[String], n: usize) -> f64 {
    if hyp.is_empty() {
        return if reference.is_empty() { 1.0 } else { 0.0 };
    }
    let grams = |toks: &[String], k: usize| -> Vec<String> {
        if toks.len() < k {
            Vec::new()
        } else {
            toks.windows(k).map(|w| w.join("\u{1f}")).collect()
        }
    };
    let mut log_sum = 0.0;
    for k in 1..=n {
        let h = grams(hyp, k);
        let mut r = grams(reference, k);
        let mut matches = 0usize;
        for g in &h {
            if let Some(at) = r.iter().position(|x| x == g) {
                r.remove(at);
                matches += 1;
            }
        }
        let p = (matches as f64 + 1e-9) / (h.len() as f64 + 1e-9);
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

fn oracle_distinct(responses: &[Vec<String>], n: usize) -> f64 {
    let mut all: Vec<String> = Vec::new();
    for toks in responses {
        if toks.len() >= n {
            for w in toks.windows(n) {
                all.push(w.join("\u{1f}"));
            }
        }
    }
    if all.is_empty() {
        return 0.0;
    }
    let total = all.len();
    all.sort();
    all.dedup();
    all.len() as f64 / total as f64
}

fn oracle_knowledge_f1(
    hyp: &[String],
    knowledge: &[KnowledgeTriple],
    subtarget_topic: &str,
) -> Option<f64> {
    let norm = |s: &str| tokenize(s).join(" ");
    let key = norm(subtarget_topic);
    let mut reference = Vec::new();
    let mut any = false;
    for t in knowledge {
        if norm(&t.subject) == key || norm(&t.object) == key {
            any = true;
            reference.extend(tokenize(&t.object));
        }
    }
    if any {
        Some(oracle_f1(hyp, &reference))
    } else {
        None
    }
}

fn oracle_success(turns: &[String], target_turn: usize, topic: &str) -> bool {
    let want = tokenize(topic);
    if want.is_empty() {
        return false;
    }
    turns.iter().skip(target_turn).any(|turn| {
        let have = tokenize(turn);
        want.iter().all(|w| have.contains(w))
    })
}

#[test]
fn c06_metric_oracles() {
    criterion(6, "metrics agree with brute-force oracles", || {
        let alphabet = ["a", "b", "c", "d", "e"];
        let mut rng = SeedRng::new(60_606);
        let mut rand_seq = |rng: &mut SeedRng, max_len: usize| -> Vec<String> {
            let len = rng.below(max_len + 1);
            (0..len).map(|_| alphabet[rng.below(alphabet.len())].to_string()).collect()
        };
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-9;

        for case in 0..30usize {
            let hyp = rand_seq(&mut rng, 6);
            let reference = rand_seq(&mut rng, 6);
            assert!(
                close(word_f1(&hyp, &reference), oracle_f1(&hyp, &reference)),
                "F1 mismatch on case {case}: {hyp:?} vs {reference:?}"
            );
            for n in [1, 2] {
                assert!(
                    close(bleu(&hyp, &reference, n), oracle_bleu(&hyp, &reference, n)),
                    "BLEU-{n} mismatch on case {case}: {hyp:?} vs {reference:?}"
                );
            }

            let n_resp = rng.below(4);
            let responses: Vec<Vec<String>> =
                (0..n_resp).map(|_| rand_seq(&mut rng, 5)).collect();
            for n in [1, 2] {
                assert!(
                    close(distinct_n(&responses, n), oracle_distinct(&responses, n)),
                    "DIST-{n} mismatch on case {case}: {responses:?}"
                );
            }

            let topics = ["road_movie", "jazz", "b"];
            let n_triples = rng.below(5);
            let knowledge: Vec<KnowledgeTriple> = (0..n_triples)
                .map(|_| KnowledgeTriple {
                    subject: topics[rng.below(topics.len())].to_string(),
                    relation: alphabet[rng.below(alphabet.len())].to_string(),
                    object: topics[rng.below(topics.len())].to_string(),
                })
                .collect();
            let subtarget = if rng.below(4) == 0 {
                "absent_topic"
            } else {
                topics[rng.below(topics.len())]
            };
            let got = knowledge_f1(&hyp, &knowledge, subtarget);
            let want = oracle_knowledge_f1(&hyp, &knowledge, subtarget);
            match (got, want) {
                (None, None) => {}
                (Some(x), Some(y)) => assert!(
                    close(x, y),
                    "Know.F1 mismatch on case {case}: {x} vs {y}"
                ),
                other => panic!("Know.F1 activity mismatch on case {case}: {other:?}"),
            }

            let n_turns = rng.below(4);
            let turns: Vec<String> =
                (0..n_turns).map(|_| rand_seq(&mut rng, 5).join(" ")).collect();
            let target_turn = rng.below(turns.len() + 1);
            let topic = ["a", "a b", "zz"][rng.below(3)];
            assert_eq!(
                target_success(&turns, target_turn, topic),
                oracle_success(&turns, target_turn, topic),
                "Succ mismatch on case {case}: {turns:?} @{target_turn} {topic:?}"
            );
        }
    });
}

// ---------------------------------------------------------------- criterion 7

#[test]
fn c07_constrained_decoding_wellformed_and_bounded() {
    criterion(7, "1000 constrained decodes well-formed within budget", || {
        let synth = SynthConfig {
            seed: 707,
            n_conversations: 12,
            n_topics: 40,
            max_pairs: 14,
            graph_degree: 2,
            ..SynthConfig::default()
        };
        let convs = generate(&synth).unwrap();
        let vocab = build_vocabulary(&convs).unwrap();
        let examples = slice_corpus(&convs, synth.history_turns);
        assert!(!examples.is_empty());
        let encoder = EncoderConfig {
            hidden_dim: 16,
            n_layers: 1,
            n_heads: 2,
            max_hops: 14,
            max_knowledge_items: 16,
            max_seq_len: 64,
            dropout: 0.0,
        };
        let planner = PlannerConfig {
            hidden_dim: 16,
            n_decoder_layers: 1,
            n_heads: 2,
            variant: Variant::Ff,
            max_pairs: 14,
            tie_output_embeddings: false,
        };

        let mut decodes = 0usize;
        let mut max_steps = 0usize;
        for model_seed in 0..100u64 {
            let model = PlannerModel::<f32>::init(
                encoder.clone(),
                planner.clone(),
                vocab.clone(),
                model_seed,
            )
            .unwrap();
            for j in 0..5usize {
                let example = &examples[(model_seed as usize * 5 + j) % examples.len()];
                let mut ctx = GraphCtx::new(&model.store, false);
                let (memory, _) = encode_example(
                    &mut ctx,
                    &model.encoder,
                    &model.vocab,
                    &example.knowledge,
                    &example.profile,
                    &example.history,
                    &example.target,
                    &mut Dropper::off(),
                )
                .unwrap();
                let dir = if j % 2 == 0 {
                    PathDirection::Forward
                } else {
                    PathDirection::Backward
                };
                let out = greedy_decode(
                    &mut ctx,
                    &model.planner,
                    dir,
                    &memory,
                    &model.vocab,
                    true,
                    14,
                )
                .unwrap();
                let parsed = tokens_to_path(&out.tokens, &model.vocab);
                assert!(
                    parsed.is_ok(),
                    "decode must be well-formed ([A] a [T] t)+ (seed {model_seed}, ex {j})"
                );
                assert!(!parsed.unwrap().steps().is_empty());
                assert!(
                    out.decision_steps <= 2 * 14 + 1,
                    "decode took {} decision steps, budget is {}",
                    out.decision_steps,
                    2 * 14 + 1
                );
                max_steps = max_steps.max(out.decision_steps);
                decodes += 1;
            }
        }
        assert_eq!(decodes, 1000);
        println!("  (max decision steps observed: {max_steps})");
    });
}

// ---------------------------------------------------------------- criterion 8

#[test]
fn c08_seeded_determinism() {
    criterion(8, "byte-identical corpora and checkpoints per seed", || {
        let dir = tempfile::tempdir().unwrap();

        // Corpus files.
        let synth =
            SynthConfig { seed: 808, n_conversations: 48, n_topics: 30, ..SynthConfig::default() };
        let path_a = dir.path().join("corpus_a.jsonl");
        let path_b = dir.path().join("corpus_b.jsonl");
        save_jsonl(&path_a, &generate(&synth).unwrap()).unwrap();
        save_jsonl(&path_b, &generate(&synth).unwrap()).unwrap();
        let bytes_a = std::fs::read(&path_a).unwrap();
        let bytes_b = std::fs::read(&path_b).unwrap();
        assert!(!bytes_a.is_empty());
        assert_eq!(bytes_a, bytes_b, "same seed must give byte-identical corpus files");
        assert_eq!(Sha256::digest(&bytes_a), Sha256::digest(&bytes_b));
        // A different seed must change the bytes.
        let other = SynthConfig { seed: 809, ..synth.clone() };
        let lines: Vec<String> = generate(&other).unwrap().iter().map(to_json_line).collect();
        assert_ne!(bytes_a, (lines.join("\n") + "\n").into_bytes());

        // Checkpoints from two fresh single-threaded training runs.
        let small =
            SynthConfig { seed: 811, n_conversations: 16, n_topics: 20, ..SynthConfig::default() };
        let convs = generate(&small).unwrap();
        let vocab = build_vocabulary(&convs).unwrap();
        let examples = slice_corpus(&convs, small.history_turns);
        let encoder = EncoderConfig {
            hidden_dim: 16,
            n_layers: 1,
            n_heads: 2,
            max_hops: 4,
            max_knowledge_items: 8,
            max_seq_len: 32,
            dropout: 0.0,
        };
        let planner = PlannerConfig {
            hidden_dim: 16,
            n_decoder_layers: 1,
            n_heads: 2,
            variant: Variant::Ff,
            max_pairs: small.max_pairs,
            tie_output_embeddings: false,
        };
        let cfg = TrainConfig { epochs: 2, seed: 99, ..TrainConfig::default() };
        let run = || {
            let mut model = PlannerModel::<f32>::init(
                encoder.clone(),
                planner.clone(),
                vocab.clone(),
                cfg.seed,
            )
            .unwrap();
            let report = train(&mut model, &examples, &cfg).unwrap();
            report.checkpoint.to_bytes().unwrap()
        };
        let ckpt_a = run();
        let ckpt_b = run();
        assert!(!ckpt_a.is_empty());
        assert_eq!(
            Sha256::digest(&ckpt_a),
            Sha256::digest(&ckpt_b),
            "same seed must give identical checkpoint content hashes"
        );
        assert_eq!(ckpt_a, ckpt_b);
    });
}

// ---------------------------------------------------------------- criterion 9

#[test]
fn c09_ablation_grid() {
    criterion(9, "full variant x depth ablation grid", || {
        let started = Instant::now();
        let cfg = Config::for_profile(Profile::Desk);
        let convs = generate(&cfg.synth).unwrap();
        // One epoch per cell: the criterion bounds runtime and requires
        // populated, well-formatted cells, not trained accuracy.
        let train_cfg = TrainConfig { epochs: 1, ..cfg.train.clone() };
        let layer_counts = [2usize, 4];
        let cells = ablate::<f32>(
            &convs,
            &cfg.encoder,
            &cfg.planner,
            &train_cfg,
            cfg.synth.history_turns,
            &Variant::ALL,
            &layer_counts,
            ExecMode::Sequential,
        )
        .unwrap();
        assert_eq!(cells.len(), Variant::ALL.len() * layer_counts.len());

        let table = pathweaver::eval::render_ablation(&cells);
        println!("{table}");
        for variant in Variant::ALL {
            for layers in layer_counts {
                let cell = cells
                    .iter()
                    .find(|c| c.variant == variant && c.layers == layers)
                    .expect("every grid cell populated");
                assert!(!cell.diverged, "cell {variant:?} L={layers} diverged");
                for v in [
                    cell.plan.action_acc,
                    cell.plan.action_bi_acc,
                    cell.plan.topic_acc,
                    cell.plan.topic_bi_acc,
                    cell.fusion_token_accuracy,
                ] {
                    assert!((0.0..=1.0).contains(&v), "cell metric {v} outside [0,1]");
                }
                assert!(cell.train_seconds > 0.0);
                let label = format!("{} L={}", variant.label(), layers);
                let row = table
                    .lines()
                    .find(|l| l.starts_with(&label))
                    .unwrap_or_else(|| panic!("table row {label:?} missing"));
                // Two-decimal formatting for every reported number.
                for v in [
                    cell.plan.action_acc,
                    cell.plan.action_bi_acc,
                    cell.plan.topic_acc,
                    cell.plan.topic_bi_acc,
                    cell.fusion_token_accuracy,
                ] {
                    assert!(
                        row.contains(&format!("{v:.2}")),
                        "row {label:?} missing 2-decimal value {v:.2}: {row}"
                    );
                }
            }
        }
        let elapsed = started.elapsed().as_secs_f64();
        assert!(elapsed < 5400.0, "ablation grid took {elapsed:.0}s, budget is 90 min");
    });
}

// --------------------------------------------------------------- criterion 10

struct Stub {
    addr: String,
    hits: Arc<AtomicUsize>,
    bodies: Arc<Mutex<Vec<String>>>,
}

/// Scripted loopback HTTP server; serves each (status, body) in order then
/// exits. Never touches a non-local address.
fn stub_server(script: Vec<(u16, String)>) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let (h2, b2) = (hits.clone(), bodies.clone());
    std::thread::spawn(move || {
        for (status, body) in script {
            let (mut stream, _) = match listener.accept() {
                Ok(got) => got,
                Err(_) => return,
            };
            let mut buf = Vec::new();
            let mut chunk = [0u8; 1024];
            let request = loop {
                let n = match stream.read(&mut chunk) {
                    Ok(0) | Err(_) => return,
                    Ok(n) => n,
                };
                buf.extend_from_slice(&chunk[..n]);
                if let Some(head_end) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
                    let head = String::from_utf8_lossy(&buf[..head_end]).to_string();
                    let want: usize = head
                        .lines()
                        .find_map(|l| {
                            l.to_ascii_lowercase()
                                .strip_prefix("content-length:")
                                .map(|v| v.trim().parse().unwrap())
                        })
                        .unwrap_or(0);
                    while buf.len() < head_end + 4 + want {
                        let n = match stream.read(&mut chunk) {
                            Ok(0) | Err(_) => return,
                            Ok(n) => n,
                        };
                        buf.extend_from_slice(&chunk[..n]);
                    }
                    break format!("{head}\r\n\r\n{}", String::from_utf8_lossy(&buf[head_end + 4..]));
                }
            };
            h2.fetch_add(1, Ordering::SeqCst);
            b2.lock().unwrap().push(request);
            let reason = if status == 200 { "OK" } else { "Error" };
            let payload = format!(
                "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            let _ = stream.write_all(payload.as_bytes());
        }
    });
    Stub { addr, hits, bodies }
}

fn ok_body(content: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": content}}]})
        .to_string()
}

fn contract_cfg(base_url: &str, key_env: &str) -> LlmEndpointConfig {
    LlmEndpointConfig {
        base_url: base_url.to_string(),
        api_key_env: key_env.to_string(),
        timeout_secs: 5,
        max_retries: 2,
        backoff_ms: 1,
        ..LlmEndpointConfig::default()
    }
}

fn contract_prompt() -> PromptSpec {
    build_prompt(
        &[Utterance::user("hello")],
        &[KnowledgeTriple {
            subject: "star_a".into(),
            relation: "sings".into(),
            object: "song_one".into(),
        }],
        &PathStep::new("play", "song_one"),
        &PromptCaps::default(),
    )
}

#[test]
fn c10_responder_closure() {
    criterion(10, "offline Succ == 1.0 and stub-server contract", || {
        // Offline responder + target forcing over a 50-dialogue corpus.
        let synth =
            SynthConfig { seed: 1010, n_conversations: 50, n_topics: 40, ..SynthConfig::default() };
        let convs = generate(&synth).unwrap();
        let vocab = build_vocabulary(&convs).unwrap();
        let encoder = EncoderConfig {
            hidden_dim: 32,
            n_layers: 1,
            n_heads: 2,
            max_hops: 4,
            max_knowledge_items: 8,
            max_seq_len: 48,
            dropout: 0.0,
        };
        let planner = PlannerConfig {
            hidden_dim: 32,
            n_decoder_layers: 1,
            n_heads: 2,
            variant: Variant::Ff,
            max_pairs: synth.max_pairs,
            tie_output_embeddings: false,
        };
        let model = PlannerModel::<f32>::init(encoder, planner, vocab, 4).unwrap();
        let options =
            PlanOptions { constrained: true, target_forcing: true, max_pairs: None };
        let eval = evaluate_e2e(
            &model,
            &convs,
            synth.history_turns,
            &options,
            &OfflineResponder,
            ExecMode::Sequential,
        )
        .unwrap();
        assert_eq!(eval.succ, 1.0, "target forcing + offline responder must close every goal");
        assert!(eval.n_responses >= 50);

        // Remote-client contract against scripted loopback stubs only.
        // Success: wire shape and bearer auth from the environment.
        std::env::set_var("PATHWEAVER_ACC_KEY_A", "sk-acceptance");
        let stub = stub_server(vec![(200, ok_body("a reply"))]);
        let client =
            LlmClient::new(contract_cfg(&stub.addr, "PATHWEAVER_ACC_KEY_A")).unwrap();
        assert_eq!(client.generate(&contract_prompt()).unwrap(), "a reply");
        assert_eq!(stub.hits.load(Ordering::SeqCst), 1);
        let sent = stub.bodies.lock().unwrap()[0].clone();
        assert!(sent.contains("authorization: Bearer sk-acceptance")
            || sent.contains("Authorization: Bearer sk-acceptance"));
        let body = sent.split("\r\n\r\n").nth(1).unwrap().to_string();
        let wire: serde_json::Value = serde_json::from_str(&body).unwrap();
        assert_eq!(wire["messages"][0]["role"], "system");
        assert!(!body.contains("sk-acceptance"), "the key must never enter the body");

        // Retry: two 5xx then success -> exactly three requests.
        let stub = stub_server(vec![
            (500, "{}".into()),
            (503, "{}".into()),
            (200, ok_body("recovered")),
        ]);
        let client =
            LlmClient::new(contract_cfg(&stub.addr, "PATHWEAVER_ACC_KEY_UNSET")).unwrap();
        assert_eq!(client.generate(&contract_prompt()).unwrap(), "recovered");
        assert_eq!(stub.hits.load(Ordering::SeqCst), 3);

        // Retry budget exhaustion surfaces a transport error with attempts.
        let stub = stub_server(vec![(500, "{}".into()); 3]);
        let client =
            LlmClient::new(contract_cfg(&stub.addr, "PATHWEAVER_ACC_KEY_UNSET")).unwrap();
        match client.generate(&contract_prompt()) {
            Err(ResponderError::Transport { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("expected transport exhaustion, got {other:?}"),
        }
        assert_eq!(stub.hits.load(Ordering::SeqCst), 3);

        // Protocol errors do not retry: 4xx and malformed payloads.
        let stub = stub_server(vec![(404, "{}".into())]);
        let client =
            LlmClient::new(contract_cfg(&stub.addr, "PATHWEAVER_ACC_KEY_UNSET")).unwrap();
        assert!(matches!(
            client.generate(&contract_prompt()),
            Err(ResponderError::Protocol(_))
        ));
        assert_eq!(stub.hits.load(Ordering::SeqCst), 1);
        let stub = stub_server(vec![(200, "not json at all".into())]);
        let client =
            LlmClient::new(contract_cfg(&stub.addr, "PATHWEAVER_ACC_KEY_UNSET")).unwrap();
        assert!(matches!(
            client.generate(&contract_prompt()),
            Err(ResponderError::Protocol(_))
        ));
        assert_eq!(stub.hits.load(Ordering::SeqCst), 1);

        // A required-but-missing key fails before any request is sent.
        let stub = stub_server(vec![(200, ok_body("never")) ]);
        let cfg = LlmEndpointConfig {
            api_key_required: true,
            ..contract_cfg(&stub.addr, "PATHWEAVER_ACC_KEY_NEVER_SET")
        };
        match LlmClient::new(cfg) {
            Err(ResponderError::MissingApiKey { var }) => {
                assert_eq!(var, "PATHWEAVER_ACC_KEY_NEVER_SET")
            }
            _ => panic!("missing required key must fail construction"),
        }
        assert_eq!(stub.hits.load(Ordering::SeqCst), 0, "no request may be sent");
    });
}
