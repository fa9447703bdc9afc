use std::path::Path;
use std::sync::Arc;

use perspectra_core::corpus::{load_corpus, Split};
use perspectra_core::llmio::{ClientConfig, Endpoint, EndpointConfig, EndpointKind, LlmClient};
use perspectra_core::promptkit::{GuideRegistry, PromptProgram, Strategy};
use perspectra_core::sftprep::{build_records, export_sft, sidecar_path, SftRecord, SftSidecar};
use perspectra_core::summarize::{run_task, run_tasks, tasks_from_corpus};
use perspectra_core::{Corpus, Perspective};
use perspectra_mock::{MockBuilder, Reply};

fn fixture() -> Corpus {
    load_corpus(
        &Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/corpus.jsonl"),
        Split::Train,
    )
    .unwrap()
}

fn generator(base: String) -> Endpoint {
    Endpoint::new(
        Arc::new(LlmClient::new(ClientConfig::default())),
        EndpointConfig::new(base, "mock", EndpointKind::Generation),
    )
}

#[test]
fn tasks_follow_corpus_order() {
    let corpus = fixture();
    let tasks = tasks_from_corpus(&corpus, true);
    assert_eq!(tasks.len(), corpus.total_summaries());
    assert_eq!(tasks[0].id(), "t1/Cause");
    let all = tasks_from_corpus(&corpus, false);
    assert_eq!(all.len(), 17);
    assert!(all.iter().any(|t| t.thread_id == "t6" && t.perspective == Perspective::Information && t.reference.is_none()));
}

#[tokio::test]
async fn chain_feeds_keyphrases_into_the_summary_call() {
    let server = MockBuilder::new()
        .chat(|call| {
            if call.user.starts_with("Perspective: ") {
                Reply::Text("  A summary.  ".into())
            } else {
                Reply::Text("- dehydration\n- Dehydration\n- sleep".into())
            }
        })
        .start()
        .await;
    let gen = generator(server.base_url());
    let corpus = fixture();
    let task = &tasks_from_corpus(&corpus, true)[0];
    let program = PromptProgram::new(Strategy::CotGuide);
    let out = run_task(task, &program, &GuideRegistry::default(), &gen).await.unwrap();
    assert_eq!(out.summary, "A summary.");
    assert_eq!(out.keyphrases, vec!["dehydration", "sleep"]);
    let calls = server.chat_calls();
    assert_eq!(calls.len(), 2);
    assert!(!calls[0].user.starts_with("Perspective: "));
    assert!(calls[1].user.contains("- dehydration\n- sleep"));
    assert!(calls[1].user.contains("Some of the causes include..."));
}

#[tokio::test]
async fn vanilla_makes_one_call() {
    let server = MockBuilder::new().start().await;
    let gen = generator(server.base_url());
    let corpus = fixture();
    let tasks = tasks_from_corpus(&corpus, true);
    let program = PromptProgram::new(Strategy::Vanilla);
    let outs = run_tasks(&tasks, &program, &GuideRegistry::default(), &gen).await;
    assert_eq!(server.chat_calls().len(), tasks.len());
    for (task, out) in tasks.iter().zip(outs) {
        let out = out.unwrap();
        assert_eq!(out.thread_id, task.thread_id);
        assert_eq!(out.perspective, task.perspective);
        assert!(out.keyphrases.is_empty());
        assert!(out.summary.contains(&task.spans[0]));
    }
}

#[tokio::test]
async fn guide_prompts_reach_the_endpoint_with_anchors() {
    let server = MockBuilder::new().start().await;
    let gen = generator(server.base_url());
    let corpus = fixture();
    let tasks = tasks_from_corpus(&corpus, true);
    run_tasks(&tasks, &PromptProgram::new(Strategy::CotGuide), &GuideRegistry::default(), &gen).await;
    let users: Vec<String> = server.chat_calls().into_iter().map(|c| c.user).collect();
    assert!(users.iter().any(|u| u.contains("For information purposes...")));
    assert!(users.iter().any(|u| u.contains("It is inquired...")));
}

#[test]
fn sft_export_writes_one_record_per_summary() {
    let corpus = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sft.jsonl");
    let program = PromptProgram::new(Strategy::CotGuide);
    let summary = export_sft(&corpus, &program, &GuideRegistry::default(), &out).unwrap();
    assert_eq!(summary.records, corpus.total_summaries());
    assert_eq!(summary.skipped, 0);

    let text = std::fs::read_to_string(&out).unwrap();
    let records: Vec<SftRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), summary.records);
    for r in &records {
        let roles: Vec<&str> = r.messages.iter().map(|m| m.role.as_str()).collect();
        assert_eq!(roles, ["system", "user", "assistant"]);
        let thread = corpus.get(&r.meta.thread_id).unwrap();
        assert_eq!(r.messages[2].content, thread.gold_summaries[&r.meta.perspective]);
        assert!(!r.meta.keyphrases_included);
        for span in thread.span_texts(r.meta.perspective) {
            assert!(r.messages[1].content.contains(&span));
        }
    }

    let sidecar: SftSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(&out)).unwrap()).unwrap();
    assert_eq!(sidecar.training.learning_rate, 1e-4);
    assert_eq!(sidecar.training.batch_size, 32);
    assert_eq!(sidecar.training.epochs, 2);
    assert_eq!(sidecar.training.optimizer, "AdamW");
    assert_eq!(sidecar.training.method, "LoRA");
    assert_eq!(sidecar.records, records.len());
    assert_eq!(sidecar_path(&out).file_name().unwrap(), "sft.meta.json");
}

#[test]
fn sft_counts_follow_the_summaries() {
    let corpus = fixture();
    let one = Corpus {
        split: Split::Train,
        threads: vec![corpus.get("t3").unwrap().clone()],
    };
    let (records, _) = build_records(&one, &PromptProgram::new(Strategy::Vanilla), &GuideRegistry::default()).unwrap();
    assert_eq!(records.len(), 2);

    let empty = Corpus {
        split: Split::Train,
        threads: vec![],
    };
    let (records, summary) = build_records(&empty, &PromptProgram::new(Strategy::CotGuide), &GuideRegistry::default()).unwrap();
    assert!(records.is_empty());
    assert_eq!(summary.records, 0);

    let mut orphan = corpus.get("t3").unwrap().clone();
    orphan.gold_spans.retain(|s| s.label != Perspective::Experience);
    let skewed = Corpus {
        split: Split::Train,
        threads: vec![orphan],
    };
    let (records, summary) = build_records(&skewed, &PromptProgram::new(Strategy::CotGuide), &GuideRegistry::default()).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(summary.skipped, 1);
    assert_eq!(summary.skipped_tasks, vec!["t3/Experience".to_string()]);
}
