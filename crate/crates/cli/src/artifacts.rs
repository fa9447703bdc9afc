//! JSON-lines artifact files exchanged between subcommands.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use perspectra_core::corpus::{parse_thread, SpanRecord};
use perspectra_core::{Corpus, Perspective, PerspectiveSpan};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    create_parent(path)?;
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Json {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    create_parent(path)?;
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut out, item).expect("artifact serializes");
        out.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
    }
    out.flush().map_err(|e| CliError::io(path, e))
}

/// Non-blank lines with their 1-based line numbers.
fn lines(path: &Path) -> Result<Vec<(usize, String)>, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    lines(path)?
        .into_iter()
        .map(|(line, text)| {
            serde_json::from_str(&text).map_err(|e| CliError::Json {
                path: path.display().to_string(),
                line,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn create_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e)),
        _ => Ok(()),
    }
}

/// Predicted spans of one thread, as written by `predict-spans`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreadSpans {
    pub thread_id: String,
    pub spans: Vec<SpanRecord>,
}

impl ThreadSpans {
    pub fn from_spans(thread_id: &str, spans: &[PerspectiveSpan]) -> Self {
        Self {
            thread_id: thread_id.to_string(),
            spans: spans
                .iter()
                .map(|s| SpanRecord {
                    answer_index: s.answer_index,
                    start: s.start,
                    end: s.end,
                    label: s.label,
                    text: Some(s.text.clone()),
                })
                .collect(),
        }
    }
}

/// Reads a span file and checks every span against the answers in `corpus`.
pub fn read_span_file(path: &Path, corpus: &Corpus) -> Result<BTreeMap<String, Vec<PerspectiveSpan>>, CliError> {
    let mut out = BTreeMap::new();
    for entry in read_jsonl::<ThreadSpans>(path)? {
        let thread = corpus
            .get(&entry.thread_id)
            .ok_or_else(|| CliError::Input(format!("{}: unknown thread {}", path.display(), entry.thread_id)))?;
        let mut spans = Vec::with_capacity(entry.spans.len());
        for s in entry.spans {
            let span = thread
                .answers
                .get(s.answer_index)
                .and_then(|answer| PerspectiveSpan::over(answer, s.answer_index, s.start, s.end, s.label))
                .ok_or_else(|| {
                    CliError::Input(format!(
                        "{}: span [{}, {}) is outside answer {} of {}",
                        path.display(),
                        s.start,
                        s.end,
                        s.answer_index,
                        entry.thread_id
                    ))
                })?;
            spans.push(span);
        }
        if out.insert(entry.thread_id.clone(), spans).is_some() {
            return Err(CliError::Input(format!("{}: duplicate thread {}", path.display(), entry.thread_id)));
        }
    }
    Ok(out)
}

/// Key of one summary: thread id and perspective.
pub type SummaryKey = (String, Perspective);

#[derive(Debug, Deserialize)]
struct SummaryLine {
    thread_id: String,
    perspective: Perspective,
    summary: String,
}

/// Summaries keyed by (thread, perspective), in file order. Lines may be
/// summary records or canonical corpus threads, whose gold summaries are used.
pub fn read_summaries(path: &Path) -> Result<Vec<(SummaryKey, String)>, CliError> {
    let mut out = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (line, text) in lines(path)? {
        let json_err = |e: serde_json::Error| CliError::Json {
            path: path.display().to_string(),
            line,
            message: e.to_string(),
        };
        let value: serde_json::Value = serde_json::from_str(&text).map_err(json_err)?;
        let entries: Vec<(SummaryKey, String)> = if value.get("summaries").is_some() {
            let thread = parse_thread(&text, line)?;
            thread
                .gold_summaries
                .into_iter()
                .map(|(p, s)| ((thread.id.clone(), p), s))
                .collect()
        } else {
            let s: SummaryLine = serde_json::from_value(value).map_err(json_err)?;
            vec![((s.thread_id, s.perspective), s.summary)]
        };
        for (key, summary) in entries {
            if !seen.insert(key.clone()) {
                return Err(CliError::Input(format!(
                    "{}:{line}: duplicate summary for {}/{}",
                    path.display(),
                    key.0,
                    key.1
                )));
            }
            out.push((key, summary));
        }
    }
    Ok(out)
}
