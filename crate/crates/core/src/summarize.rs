//! Runs a prompt program against a generation endpoint: a keyphrase call
//! followed by a summary call for the chain-of-thought strategies, a single
//! summary call for vanilla.

use std::collections::BTreeMap;

use futures::{stream, StreamExt};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Perspective, PerspectiveSpan};
use crate::error::SummarizeError;
use crate::llmio::TextGenerator;
use crate::promptkit::{build_keyphrase_prompt, build_summary_prompt, parse_keyphrases, GuideRegistry, PromptProgram, Strategy};

/// One (thread, perspective) unit of summarization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryTask {
    pub thread_id: String,
    pub perspective: Perspective,
    pub spans: Vec<String>,
    pub reference: Option<String>,
}

impl SummaryTask {
    pub fn id(&self) -> String {
        format!("{}/{}", self.thread_id, self.perspective)
    }
}

/// Tasks for every perspective that has at least one span, in corpus order.
/// With `require_reference`, perspectives without a gold summary are skipped.
pub fn tasks_from_corpus(corpus: &Corpus, require_reference: bool) -> Vec<SummaryTask> {
    let mut tasks = Vec::new();
    for thread in &corpus.threads {
        for p in Perspective::ALL {
            let spans = thread.span_texts(p);
            let reference = thread.gold_summaries.get(&p).cloned();
            if spans.is_empty() || (require_reference && reference.is_none()) {
                continue;
            }
            tasks.push(SummaryTask {
                thread_id: thread.id.clone(),
                perspective: p,
                spans,
                reference,
            });
        }
    }
    tasks
}

/// Like [`tasks_from_corpus`] but with span texts taken from `spans`
/// (keyed by thread id) instead of the gold annotation.
pub fn tasks_from_spans(
    corpus: &Corpus,
    spans: &BTreeMap<String, Vec<PerspectiveSpan>>,
) -> Vec<SummaryTask> {
    let mut tasks = Vec::new();
    for thread in &corpus.threads {
        let Some(thread_spans) = spans.get(&thread.id) else { continue };
        for p in Perspective::ALL {
            let texts: Vec<String> = thread_spans
                .iter()
                .filter(|s| s.label == p)
                .map(|s| s.text.clone())
                .collect();
            if texts.is_empty() {
                continue;
            }
            tasks.push(SummaryTask {
                thread_id: thread.id.clone(),
                perspective: p,
                spans: texts,
                reference: thread.gold_summaries.get(&p).cloned(),
            });
        }
    }
    tasks
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryOutput {
    pub thread_id: String,
    pub perspective: Perspective,
    pub strategy: Strategy,
    pub summary: String,
    pub keyphrases: Vec<String>,
    /// Set when the keyphrase completion had no recognizable list.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub keyphrase_warning: bool,
}

pub async fn run_task(
    task: &SummaryTask,
    program: &PromptProgram,
    registry: &GuideRegistry,
    generator: &dyn TextGenerator,
) -> Result<SummaryOutput, SummarizeError> {
    program.validate()?;
    let (keyphrases, keyphrase_warning) = if program.strategy.uses_keyphrases() {
        let prompt = build_keyphrase_prompt(&task.spans, program)?;
        let completion = generator.generate(&prompt.system, &prompt.user).await?;
        let parsed = parse_keyphrases(&completion.text);
        (parsed.keyphrases, parsed.warning)
    } else {
        (Vec::new(), false)
    };
    let prompt = build_summary_prompt(task.perspective, &task.spans, &keyphrases, program, registry)?;
    let completion = generator.generate(&prompt.system, &prompt.user).await?;
    Ok(SummaryOutput {
        thread_id: task.thread_id.clone(),
        perspective: task.perspective,
        strategy: program.strategy,
        summary: completion.text.trim().to_string(),
        keyphrases,
        keyphrase_warning,
    })
}

const TASK_CONCURRENCY: usize = 8;

/// Runs every task; results come back in task order.
pub async fn run_tasks(
    tasks: &[SummaryTask],
    program: &PromptProgram,
    registry: &GuideRegistry,
    generator: &dyn TextGenerator,
) -> Vec<Result<SummaryOutput, SummarizeError>> {
    stream::iter(tasks.iter().map(|t| run_task(t, program, registry, generator)))
        .buffered(TASK_CONCURRENCY)
        .collect()
        .await
}
