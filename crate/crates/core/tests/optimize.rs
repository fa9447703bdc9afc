use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use perspectra_core::corpus::{load_corpus, Split};
use perspectra_core::llmio::{ClientConfig, Endpoint, EndpointConfig, EndpointKind, LlmClient};
use perspectra_core::optimize::*;
use perspectra_core::promptkit::{GuideRegistry, PromptProgram, Strategy};
use perspectra_core::summarize::{tasks_from_corpus, SummaryTask};
use perspectra_core::summeval::{composite, metric_tokens, CompositeWeights, PartialScores};
use perspectra_core::Corpus;
use perspectra_mock::{ChatCall, MockBuilder, MockServer, Reply};
use proptest::prelude::*;
use serde_json::json;

const MARKER: &str = "ECHO-REFERENCE";

fn fixture() -> Corpus {
    load_corpus(
        &Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/corpus.jsonl"),
        Split::Validation,
    )
    .unwrap()
}

/// (perspective label, first span text) -> reference summary
fn reference_index(corpus: &Corpus) -> HashMap<(String, String), String> {
    tasks_from_corpus(corpus, true)
        .into_iter()
        .map(|t| ((t.perspective.to_string(), t.spans[0].clone()), t.reference.unwrap()))
        .collect()
}

fn lookup(call: &ChatCall, refs: &HashMap<(String, String), String>) -> Option<String> {
    let perspective = call.user.lines().next()?.strip_prefix("Perspective: ")?;
    let first_span = call
        .user
        .split("Perspective spans:\n1. ")
        .nth(1)?
        .lines()
        .next()?;
    refs.get(&(perspective.to_string(), first_span.to_string())).cloned()
}

/// Task model: echoes the reference when the prompt carries the marker,
/// answers keyphrase calls with a fixed list, and is silent otherwise.
async fn task_server(corpus: &Corpus) -> MockServer {
    let refs = reference_index(corpus);
    MockBuilder::new()
        .chat(move |call| {
            if !call.user.starts_with("Perspective: ") {
                return Reply::Text("- symptom\n- treatment".into());
            }
            if call.user.contains(MARKER) {
                Reply::Text(lookup(call, &refs).unwrap_or_default())
            } else {
                Reply::Text(String::new())
            }
        })
        .start()
        .await
}

/// Meta model planting one marker-carrying variant among silent ones.
async fn planted_meta_server() -> MockServer {
    MockBuilder::new()
        .chat(|call| {
            let i = call.index + 1;
            let variants = json!([
                {"summary_generation": format!("Summarize plainly, take {i}a.")},
                {"summary_generation": format!("Summarize plainly, take {i}b.")},
                {"summary_generation": format!("{MARKER}: now generate a concise and coherent summary.")},
                {"summary_generation": format!("Summarize plainly, take {i}c.")},
            ]);
            Reply::Text(format!("Here you go:\n```json\n{variants}\n```"))
        })
        .start()
        .await
}

fn endpoint(server: &MockServer, kind: EndpointKind) -> Endpoint {
    Endpoint::new(
        Arc::new(LlmClient::new(ClientConfig::default())),
        EndpointConfig::new(server.base_url(), "mock", kind),
    )
}

struct Rig {
    task: Endpoint,
    meta: Endpoint,
    embed: Endpoint,
    _servers: Vec<MockServer>,
}

impl Rig {
    async fn planted(corpus: &Corpus) -> Self {
        let task = task_server(corpus).await;
        let meta = planted_meta_server().await;
        Self::from_servers(task, meta)
    }

    fn from_servers(task: MockServer, meta: MockServer) -> Self {
        Self {
            task: endpoint(&task, EndpointKind::Generation),
            meta: endpoint(&meta, EndpointKind::Generation),
            embed: endpoint(&task, EndpointKind::Embedding),
            _servers: vec![task, meta],
        }
    }

    fn endpoints(&self) -> OptimizerEndpoints<'_> {
        OptimizerEndpoints {
            task: &self.task,
            meta: &self.meta,
            embedder: &self.embed,
        }
    }
}

fn config(iterations: usize) -> OptimizerConfig {
    OptimizerConfig {
        iterations,
        full_eval_period: 0,
        ..OptimizerConfig::default()
    }
}

#[tokio::test]
async fn planted_variant_wins_and_runs_repeat() {
    let dev = fixture();
    let program = PromptProgram::new(Strategy::CotGuide);
    let registry = GuideRegistry::default();

    let rig = Rig::planted(&dev).await;
    let first = optimize(&program, &dev, rig.endpoints(), &registry, &config(3)).await.unwrap();
    assert!(first.best.instructions["summary_generation"].starts_with(MARKER));
    assert_eq!(first.trace.len(), 3);
    for pair in first.trace.windows(2) {
        assert!(pair[1].incumbent_score >= pair[0].incumbent_score);
    }
    assert!(first.dev_score > 0.99, "{}", first.dev_score);
    assert_eq!(first.initial_dev_score, 0.0);

    let rig2 = Rig::planted(&dev).await;
    let second = optimize(&program, &dev, rig2.endpoints(), &registry, &config(3)).await.unwrap();
    assert_eq!(
        serde_json::to_string(&first.trace).unwrap(),
        serde_json::to_string(&second.trace).unwrap()
    );
}

#[tokio::test]
async fn single_iteration_picks_best_of_record() {
    let dev = fixture();
    let program = PromptProgram::new(Strategy::CotGuide);
    let rig = Rig::planted(&dev).await;
    let result = optimize(&program, &dev, rig.endpoints(), &GuideRegistry::default(), &config(1))
        .await
        .unwrap();
    assert_eq!(result.trace.len(), 1);
    let record = &result.trace[0];
    let (argmax, _) = record
        .scores
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.map(|s| (i, s)))
        .fold((usize::MAX, f64::NEG_INFINITY), |acc, (i, s)| if s > acc.1 { (i, s) } else { acc });
    assert_eq!(result.best.instructions, record.proposals[argmax]);
}

#[tokio::test]
async fn checkpoints_pin_the_full_dev_leader() {
    let dev = fixture();
    let program = PromptProgram::new(Strategy::CotGuide);
    let rig = Rig::planted(&dev).await;
    let cfg = OptimizerConfig {
        iterations: 4,
        full_eval_period: 2,
        ..OptimizerConfig::default()
    };
    let result = optimize(&program, &dev, rig.endpoints(), &GuideRegistry::default(), &cfg)
        .await
        .unwrap();
    let checkpoints: Vec<_> = result.trace.iter().filter(|r| r.full_dev.is_some()).collect();
    assert_eq!(checkpoints.len(), 2);
    for r in checkpoints {
        let full = r.full_dev.as_ref().unwrap();
        assert_eq!(full.len(), 2);
        let leader = full.iter().copied().fold(full[0], |a, b| if b.1 > a.1 { b } else { a });
        assert_eq!(r.incumbent, leader.0);
    }
    assert!(result.best.instructions["summary_generation"].starts_with(MARKER));
    for pair in result.trace.windows(2) {
        assert!(pair[1].incumbent_score >= pair[0].incumbent_score);
    }
}

#[tokio::test]
async fn meta_failure_aborts_iteration() {
    let dev = fixture();
    let program = PromptProgram::new(Strategy::CotGuide);
    let task = task_server(&dev).await;
    let meta = MockBuilder::new()
        .chat(|_| Reply::Status(400, "bad request".into()))
        .start()
        .await;
    let rig = Rig::from_servers(task, meta);
    let result = optimize(&program, &dev, rig.endpoints(), &GuideRegistry::default(), &config(2))
        .await
        .unwrap();
    assert!(result.trace.iter().all(|r| r.aborted && r.proposals.is_empty()));
    assert_eq!(result.candidates.len(), 1);
    assert_eq!(result.best.instructions, program.instruction_slots);
}

fn meta_replying(text: &'static str) -> MockBuilder {
    MockBuilder::new().chat(move |_| Reply::Text(text.to_string()))
}

#[tokio::test]
async fn proposals_are_padded_or_truncated_to_count() {
    let incumbent = PromptProgram::new(Strategy::CotGuide).instruction_slots;
    let cases: [(&'static str, usize, bool); 4] = [
        (
            r#"[{"summary_generation": "a"}, {"summary_generation": "b"}, {"summary_generation": "c"}, {"summary_generation": "d"}]"#,
            4,
            false,
        ),
        (r#"[{"summary_generation": "a"}, {"keyphrase_extraction": "b"}]"#, 2, true),
        ("I cannot help with that.", 0, true),
        (
            r#"[{"summary_generation": "a"}, {"summary_generation": "b"}, {"summary_generation": "c"}, {"summary_generation": "d"}, {"summary_generation": "e"}, {"summary_generation": "f"}]"#,
            6,
            false,
        ),
    ];
    for (text, parsed, warned) in cases {
        let server = meta_replying(text).start().await;
        let meta = endpoint(&server, EndpointKind::Generation);
        let p = propose_variants(&incumbent, &[], &[], &meta, 4).await.unwrap();
        assert_eq!(p.variants.len(), 4, "{text}");
        assert_eq!(p.parsed, parsed);
        assert_eq!(!p.warnings.is_empty(), warned);
        for (i, v) in p.variants.iter().enumerate() {
            assert_eq!(v.keys().collect::<Vec<_>>(), incumbent.keys().collect::<Vec<_>>());
            assert!(!p.variants[..i].contains(v));
        }
        assert_eq!(server.chat_calls().len(), 1, "one meta call");
    }
}

#[tokio::test]
async fn meta_prompt_carries_context() {
    let dev = fixture();
    let tasks = tasks_from_corpus(&dev, true);
    let samples: Vec<&SummaryTask> = tasks.iter().take(2).collect();
    let incumbent = PromptProgram::new(Strategy::CotGuide).instruction_slots;
    let server = meta_replying("[]").start().await;
    let meta = endpoint(&server, EndpointKind::Generation);
    propose_variants(&incumbent, &[], &samples, &meta, 3).await.unwrap();
    let prompt = &server.chat_calls()[0].user;
    assert!(prompt.contains(&incumbent["guide_integration"]));
    assert!(prompt.contains(&tasks[0].spans[0]));
    assert!(prompt.contains("JSON array of 3 objects"));
    assert!(!prompt.contains("{count}"));
}

#[tokio::test]
async fn echoing_the_reference_scores_the_identity_composite() {
    let dev = fixture();
    let tasks = tasks_from_corpus(&dev, true);
    let batch: Vec<&SummaryTask> = tasks.iter().take(5).collect();
    let rig = Rig::planted(&dev).await;
    let program = PromptProgram::new(Strategy::CotGuide);
    let mut slots = program.instruction_slots.clone();
    slots.insert("summary_generation".into(), format!("{MARKER} please."));
    let mut c = Candidate::new(slots, 0.0, 1.0);
    let w = CompositeWeights::default();
    let got = score_candidate(&mut c, "mb", &program, &batch, rig.endpoints(), &GuideRegistry::default(), &w)
        .await
        .unwrap();
    let expected: f64 = batch
        .iter()
        .map(|t| {
            let m = metric_tokens(t.reference.as_ref().unwrap()).len() as f64;
            0.25 * (1.0 + 1.0 + (1.0 - 0.5 / m.powi(3)) + 1.0)
        })
        .sum::<f64>()
        / batch.len() as f64;
    assert!((got.score - expected).abs() < 1e-6, "{} vs {expected}", got.score);
    assert!(got.score > 0.99);
    assert_eq!(c.eval_count, 1);

    let mut silent = Candidate::new(program.instruction_slots.clone(), 0.0, 1.0);
    let zero = score_candidate(&mut silent, "mb", &program, &batch, rig.endpoints(), &GuideRegistry::default(), &w)
        .await
        .unwrap();
    assert_eq!(zero.score, 0.0);
}

#[tokio::test]
async fn posterior_over_two_minibatches_matches_hand_computation() {
    let dev = fixture();
    let tasks = tasks_from_corpus(&dev, true);
    let (a, b) = tasks.split_at(tasks.len() / 2);
    let a: Vec<&SummaryTask> = a.iter().collect();
    let b: Vec<&SummaryTask> = b.iter().collect();
    let rig = Rig::planted(&dev).await;
    let program = PromptProgram::new(Strategy::CotGuide);
    let mut slots = program.instruction_slots.clone();
    slots.insert("summary_generation".into(), format!("{MARKER} please."));
    let w = CompositeWeights::default();
    let reg = GuideRegistry::default();
    let prior = 0.3;
    let weight = 2.0;
    let mut c = Candidate::new(slots, prior, weight);
    let s1 = score_candidate(&mut c, "a", &program, &a, rig.endpoints(), &reg, &w).await.unwrap().score;
    let s2 = score_candidate(&mut c, "b", &program, &b, rig.endpoints(), &reg, &w).await.unwrap().score;
    let by_hand = (weight * prior + s1 + s2) / (weight + 2.0);
    assert!((c.posterior_mean - by_hand).abs() < 1e-12);
    assert_eq!(c.eval_count, 2);
}

#[tokio::test]
async fn generation_failures_score_zero_and_are_flagged() {
    let dev = fixture();
    let tasks = tasks_from_corpus(&dev, true);
    let batch: Vec<&SummaryTask> = tasks.iter().take(3).collect();
    let task = MockBuilder::new()
        .chat(|_| Reply::Status(404, "no such model".into()))
        .start()
        .await;
    let meta = meta_replying("[]").start().await;
    let rig = Rig::from_servers(task, meta);
    let program = PromptProgram::new(Strategy::CotGuide);
    let r = evaluate_instructions(
        &program,
        &program.instruction_slots,
        &batch,
        rig.endpoints(),
        &GuideRegistry::default(),
        &CompositeWeights::default(),
    )
    .await
    .unwrap();
    assert_eq!(r.score, 0.0);
    assert_eq!(r.flagged.len(), 3);
}

#[tokio::test]
async fn exhausted_retries_are_errors() {
    let dev = fixture();
    let tasks = tasks_from_corpus(&dev, true);
    let batch: Vec<&SummaryTask> = tasks.iter().take(1).collect();
    let task = MockBuilder::new()
        .chat(|_| Reply::Status(503, "overloaded".into()))
        .start()
        .await;
    let meta = meta_replying("[]").start().await;
    let fast = Arc::new(LlmClient::new(ClientConfig {
        retry: perspectra_core::llmio::RetryPolicy {
            base_delay: std::time::Duration::from_millis(1),
            ..Default::default()
        },
        ..ClientConfig::default()
    }));
    let rig = Rig {
        task: Endpoint::new(fast.clone(), EndpointConfig::new(task.base_url(), "m", EndpointKind::Generation)),
        meta: endpoint(&meta, EndpointKind::Generation),
        embed: endpoint(&meta, EndpointKind::Embedding),
        _servers: vec![task, meta],
    };
    let program = PromptProgram::new(Strategy::Vanilla);
    let r = evaluate_instructions(
        &program,
        &program.instruction_slots,
        &batch,
        rig.endpoints(),
        &GuideRegistry::default(),
        &CompositeWeights::default(),
    )
    .await;
    assert!(r.is_err());
}

#[tokio::test]
async fn empty_minibatch_rejected() {
    let dev = fixture();
    let rig = Rig::planted(&dev).await;
    let program = PromptProgram::new(Strategy::Vanilla);
    let r = evaluate_instructions(
        &program,
        &program.instruction_slots,
        &[],
        rig.endpoints(),
        &GuideRegistry::default(),
        &CompositeWeights::default(),
    )
    .await;
    assert!(matches!(r, Err(perspectra_core::error::OptimizeError::EmptyMinibatch)));
}

fn scored(values: [f64; 4], weights: [f64; 4]) -> f64 {
    let s = PartialScores {
        rouge_l: Some(values[0]),
        bleu: Some(values[1]),
        meteor: Some(values[2]),
        bertscore: Some(values[3]),
    };
    let w = CompositeWeights {
        rouge_l: weights[0],
        bleu: weights[1],
        meteor: weights[2],
        bertscore: weights[3],
    };
    composite(&s, &w).unwrap()
}

/// The `k`-th permutation of 0..4 in lexicographic order.
fn nth_permutation(mut k: usize) -> [usize; 4] {
    let mut pool = vec![0, 1, 2, 3];
    let mut out = [0; 4];
    for (slot, fact) in out.iter_mut().zip([6, 2, 1, 1]) {
        *slot = pool.remove(k / fact);
        k %= fact;
    }
    out
}

proptest! {
    #[test]
    fn ranking_survives_joint_permutation(
        cands in prop::collection::vec(prop::array::uniform4(0.0f64..=1.0), 2..6),
        raw in prop::array::uniform4(0.01f64..1.0),
        perm_index in 0usize..24,
    ) {
        let perm = nth_permutation(perm_index);
        let total: f64 = raw.iter().sum();
        let weights = raw.map(|x| x / total);
        let permute = |v: [f64; 4]| [v[perm[0]], v[perm[1]], v[perm[2]], v[perm[3]]];
        let rank = |score: &dyn Fn(&[f64; 4]) -> f64| {
            let mut idx: Vec<usize> = (0..cands.len()).collect();
            idx.sort_by(|&a, &b| score(&cands[b]).total_cmp(&score(&cands[a])).then(a.cmp(&b)));
            idx
        };
        let plain: Vec<f64> = cands.iter().map(|c| scored(*c, weights)).collect();
        let permuted: Vec<f64> = cands.iter().map(|c| scored(permute(*c), permute(weights))).collect();
        for (a, b) in plain.iter().zip(&permuted) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let r1 = rank(&|c| scored(*c, weights));
        let r2 = rank(&|c| scored(permute(*c), permute(weights)));
        let keyed = |r: &[usize], s: &[f64]| r.iter().map(|&i| (s[i] * 1e9).round() as i64).collect::<Vec<_>>();
        prop_assert_eq!(keyed(&r1, &plain), keyed(&r2, &permuted));
    }

    #[test]
    fn posterior_matches_shrinkage_formula(
        prior in 0.0f64..=1.0,
        weight in 0.1f64..5.0,
        scores in prop::collection::vec(0.0f64..=1.0, 0..10),
    ) {
        let mut c = Candidate::new(BTreeMap::new(), prior, weight);
        for (i, s) in scores.iter().enumerate() {
            c.record(format!("mb-{i}"), *s);
        }
        let expected = (weight * prior + scores.iter().sum::<f64>()) / (weight + scores.len() as f64);
        prop_assert!((c.posterior_mean - expected).abs() < 1e-12);
        prop_assert_eq!(c.eval_count, scores.len());
    }

    #[test]
    fn minibatch_depends_only_on_seed_iteration_and_size(
        seed in any::<u64>(),
        iteration in 1u64..100,
        n in 1usize..60,
        size in 1usize..20,
    ) {
        let a = sample_minibatch(seed, iteration, n, size);
        prop_assert_eq!(&a, &sample_minibatch(seed, iteration, n, size));
        prop_assert_eq!(a.len(), size.min(n));
        prop_assert!(a.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(a.iter().all(|&i| i < n));
    }
}
