//! Supervised fine-tuning export: chat-format records pairing a rendered
//! summary prompt with the gold summary, plus a training-configuration
//! sidecar.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Perspective};
use crate::error::ExportError;
use crate::promptkit::{build_summary_prompt, GuideRegistry, PromptProgram, Strategy};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftMeta {
    pub thread_id: String,
    pub perspective: Perspective,
    pub strategy: Strategy,
    /// Always false: the keyphrase call cannot be replayed offline, so the
    /// prompt is rendered without a keyphrase paragraph.
    pub keyphrases_included: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub messages: Vec<ChatMessage>,
    pub meta: SftMeta,
}

/// Training configuration written next to the records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub base_model: String,
    pub method: String,
    pub optimizer: String,
    pub learning_rate: f64,
    pub batch_size: u32,
    pub epochs: u32,
    pub max_tokens: u32,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            base_model: "Llama-3-8B-Instruct".into(),
            method: "LoRA".into(),
            optimizer: "AdamW".into(),
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 2,
            max_tokens: 256,
            temperature: 0.1,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftSidecar {
    pub training: TrainingConfig,
    pub strategy: Strategy,
    pub keyphrases_included: bool,
    pub records: usize,
    pub skipped: usize,
    pub skipped_tasks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub records: usize,
    pub skipped: usize,
    pub skipped_tasks: Vec<String>,
}

/// One record per gold summary whose perspective has spans, in corpus order.
pub fn build_records(
    corpus: &Corpus,
    program: &PromptProgram,
    registry: &GuideRegistry,
) -> Result<(Vec<SftRecord>, ExportSummary), ExportError> {
    let mut records = Vec::new();
    let mut skipped_tasks = Vec::new();
    for thread in &corpus.threads {
        for (&perspective, summary) in &thread.gold_summaries {
            let spans = thread.span_texts(perspective);
            if spans.is_empty() {
                skipped_tasks.push(format!("{}/{perspective}", thread.id));
                continue;
            }
            let prompt = build_summary_prompt(perspective, &spans, &[] as &[&str], program, registry)?;
            records.push(SftRecord {
                messages: vec![
                    ChatMessage {
                        role: "system".into(),
                        content: prompt.system,
                    },
                    ChatMessage {
                        role: "user".into(),
                        content: prompt.user,
                    },
                    ChatMessage {
                        role: "assistant".into(),
                        content: summary.clone(),
                    },
                ],
                meta: SftMeta {
                    thread_id: thread.id.clone(),
                    perspective,
                    strategy: program.strategy,
                    keyphrases_included: false,
                },
            });
        }
    }
    let summary = ExportSummary {
        records: records.len(),
        skipped: skipped_tasks.len(),
        skipped_tasks,
    };
    Ok((records, summary))
}

/// `sft.jsonl` -> `sft.meta.json`
pub fn sidecar_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "sft".into());
    out.with_file_name(format!("{stem}.meta.json"))
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> ExportError + '_ {
    move |source| ExportError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes the records to `out` and the sidecar to [`sidecar_path`].
pub fn export_sft(
    corpus: &Corpus,
    program: &PromptProgram,
    registry: &GuideRegistry,
    out: &Path,
) -> Result<ExportSummary, ExportError> {
    let (records, summary) = build_records(corpus, program, registry)?;
    let mut writer = BufWriter::new(File::create(out).map_err(io_error(out))?);
    for record in &records {
        let line = serde_json::to_string(record).expect("records serialize");
        writeln!(writer, "{line}").map_err(io_error(out))?;
    }
    writer.flush().map_err(io_error(out))?;

    let sidecar = SftSidecar {
        training: TrainingConfig::default(),
        strategy: program.strategy,
        keyphrases_included: false,
        records: summary.records,
        skipped: summary.skipped,
        skipped_tasks: summary.skipped_tasks.clone(),
    };
    let meta_path = sidecar_path(out);
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(&meta_path, text + "\n").map_err(io_error(&meta_path))?;
    Ok(summary)
}
