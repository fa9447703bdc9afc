//! CQA thread data model, the canonical JSON-lines corpus format, and
//! per-perspective span statistics.
//!
//! One record per line:
//!
//! ```json
//! {"id": "t1", "question": "...", "context": null, "answers": ["..."],
//!  "spans": [{"answer_index": 0, "start": 0, "end": 12, "label": "Information"}],
//!  "summaries": {"Information": "For information purposes, ..."}}
//! ```
//!
//! Span offsets are half-open `[start, end)` intervals counted in Unicode
//! scalar values of the referenced answer.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CorpusError;
use crate::text::char_slice;

/// One of the five answer viewpoint categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Perspective {
    Information,
    Cause,
    Suggestion,
    Experience,
    Question,
}

impl Perspective {
    pub const ALL: [Perspective; 5] = [
        Perspective::Information,
        Perspective::Cause,
        Perspective::Suggestion,
        Perspective::Experience,
        Perspective::Question,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Perspective::Information => "Information",
            Perspective::Cause => "Cause",
            Perspective::Suggestion => "Suggestion",
            Perspective::Experience => "Experience",
            Perspective::Question => "Question",
        }
    }

    /// Position in [`Perspective::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Perspective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Perspective {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Perspective::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| CorpusError::UnknownLabel(s.to_string()))
    }
}

/// Dataset split tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(CorpusError::UnknownSplit(other.to_string())),
        }
    }
}

/// A labeled character interval over one answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerspectiveSpan {
    pub answer_index: usize,
    pub start: usize,
    pub end: usize,
    pub label: Perspective,
    pub text: String,
}

impl PerspectiveSpan {
    /// Builds a span over `answer`, checking bounds and filling in `text`.
    pub fn over(
        answer: &str,
        answer_index: usize,
        start: usize,
        end: usize,
        label: Perspective,
    ) -> Option<Self> {
        let text = char_slice(answer, start, end)?;
        if start >= end {
            return None;
        }
        Some(Self {
            answer_index,
            start,
            end,
            label,
            text: text.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CqaThread {
    pub id: String,
    pub question: String,
    pub context: Option<String>,
    pub answers: Vec<String>,
    pub gold_spans: Vec<PerspectiveSpan>,
    pub gold_summaries: BTreeMap<Perspective, String>,
}

impl CqaThread {
    /// Checks every thread invariant.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |message: String| CorpusError::Validation {
            thread_id: self.id.clone(),
            message,
        };
        if self.answers.is_empty() {
            return Err(invalid("answers must be non-empty".into()));
        }
        for (i, span) in self.gold_spans.iter().enumerate() {
            let answer = self.answers.get(span.answer_index).ok_or_else(|| {
                invalid(format!(
                    "spans[{i}].answer_index {} out of range ({} answers)",
                    span.answer_index,
                    self.answers.len()
                ))
            })?;
            let len = answer.chars().count();
            if span.start >= span.end || span.end > len {
                return Err(invalid(format!(
                    "spans[{i}] [{}, {}) out of bounds for answer {} of length {len}",
                    span.start, span.end, span.answer_index
                )));
            }
            if char_slice(answer, span.start, span.end) != Some(span.text.as_str()) {
                return Err(invalid(format!("spans[{i}].text does not match the answer")));
            }
        }
        for label in self.gold_summaries.keys() {
            if !self.gold_spans.iter().any(|s| s.label == *label) {
                return Err(invalid(format!(
                    "summaries.{label} present without any {label} span"
                )));
            }
        }
        Ok(())
    }

    /// Gold span texts carrying `label`, in answer order.
    pub fn span_texts(&self, label: Perspective) -> Vec<String> {
        self.gold_spans
            .iter()
            .filter(|s| s.label == label)
            .map(|s| s.text.clone())
            .collect()
    }

    pub fn to_record(&self) -> ThreadRecord {
        ThreadRecord {
            id: self.id.clone(),
            question: self.question.clone(),
            context: self.context.clone(),
            answers: self.answers.clone(),
            spans: self
                .gold_spans
                .iter()
                .map(|s| SpanRecord {
                    answer_index: s.answer_index,
                    start: s.start,
                    end: s.end,
                    label: s.label,
                    text: None,
                })
                .collect(),
            summaries: self.gold_summaries.clone(),
        }
    }
}

/// On-disk span shape; `text` is optional and checked when present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanRecord {
    pub answer_index: usize,
    pub start: usize,
    pub end: usize,
    pub label: Perspective,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// On-disk thread shape of the canonical corpus format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreadRecord {
    pub id: String,
    pub question: String,
    pub context: Option<String>,
    pub answers: Vec<String>,
    pub spans: Vec<SpanRecord>,
    pub summaries: BTreeMap<Perspective, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub split: Split,
    pub threads: Vec<CqaThread>,
}

impl Corpus {
    pub fn new(split: Split, threads: Vec<CqaThread>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for thread in &threads {
            thread.validate()?;
            if !seen.insert(thread.id.as_str()) {
                return Err(CorpusError::DuplicateId(thread.id.clone()));
            }
        }
        Ok(Self { split, threads })
    }

    pub fn get(&self, id: &str) -> Option<&CqaThread> {
        self.threads.iter().find(|t| t.id == id)
    }

    pub fn total_spans(&self) -> usize {
        self.threads.iter().map(|t| t.gold_spans.len()).sum()
    }

    pub fn total_summaries(&self) -> usize {
        self.threads.iter().map(|t| t.gold_summaries.len()).sum()
    }
}

/// Reads and validates a canonical corpus file.
pub fn load_corpus(path: &Path, split: Split) -> Result<Corpus, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    read_corpus(BufReader::new(file), split)
}

pub fn read_corpus<R: BufRead>(reader: R, split: Split) -> Result<Corpus, CorpusError> {
    let mut threads = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CorpusError::Io {
            path: format!("line {}", n + 1),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        threads.push(parse_thread(&line, n + 1)?);
    }
    Corpus::new(split, threads)
}

/// Parses one JSON line into a validated thread.
pub fn parse_thread(line: &str, line_no: usize) -> Result<CqaThread, CorpusError> {
    let value: Value = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
        line: line_no,
        thread_id: None,
        field: "<record>".into(),
        message: e.to_string(),
    })?;
    let id = value.get("id").and_then(Value::as_str).map(str::to_string);
    let fail = |field: &str, message: String| CorpusError::Parse {
        line: line_no,
        thread_id: id.clone(),
        field: field.to_string(),
        message,
    };
    let obj = value
        .as_object()
        .ok_or_else(|| fail("<record>", "expected a JSON object".into()))?;

    let id = match obj.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(fail("id", "expected a string".into())),
        None => return Err(fail("id", "missing field".into())),
    };
    let question = match obj.get("question") {
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(fail("question", "expected a string".into())),
        None => return Err(fail("question", "missing field".into())),
    };
    let context = match obj.get("context") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(fail("context", "expected a string or null".into())),
    };
    let answers = match obj.get("answers") {
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| fail(&format!("answers[{i}]"), "expected a string".into()))
            })
            .collect::<Result<Vec<_>, _>>()?,
        Some(_) => return Err(fail("answers", "expected an array of strings".into())),
        None => return Err(fail("answers", "missing field".into())),
    };
    let raw_spans = match obj.get("spans") {
        Some(Value::Array(items)) => items.clone(),
        None | Some(Value::Null) => Vec::new(),
        Some(_) => return Err(fail("spans", "expected an array".into())),
    };
    let mut gold_spans = Vec::with_capacity(raw_spans.len());
    for (i, raw) in raw_spans.into_iter().enumerate() {
        let field = format!("spans[{i}]");
        let label = raw.get("label").and_then(Value::as_str).map(str::to_string);
        let record: SpanRecord = serde_json::from_value(raw).map_err(|e| {
            // Labels get their own error kind so callers can tell typos from shape errors.
            match &label {
                Some(l) if l.parse::<Perspective>().is_err() => CorpusError::Validation {
                    thread_id: id.clone(),
                    message: format!("{field}.label: unknown perspective label {l:?}"),
                },
                _ => fail(&field, e.to_string()),
            }
        })?;
        let answer = answers.get(record.answer_index).ok_or_else(|| CorpusError::Validation {
            thread_id: id.clone(),
            message: format!(
                "{field}.answer_index {} out of range ({} answers)",
                record.answer_index,
                answers.len()
            ),
        })?;
        let span = PerspectiveSpan::over(
            answer,
            record.answer_index,
            record.start,
            record.end,
            record.label,
        )
        .ok_or_else(|| CorpusError::Validation {
            thread_id: id.clone(),
            message: format!(
                "{field} [{}, {}) out of bounds for answer {} of length {}",
                record.start,
                record.end,
                record.answer_index,
                answer.chars().count()
            ),
        })?;
        if let Some(text) = &record.text {
            if *text != span.text {
                return Err(CorpusError::Validation {
                    thread_id: id.clone(),
                    message: format!("{field}.text does not match the answer substring"),
                });
            }
        }
        gold_spans.push(span);
    }
    let mut gold_summaries = BTreeMap::new();
    match obj.get("summaries") {
        None | Some(Value::Null) => {}
        Some(Value::Object(map)) => {
            for (key, v) in map {
                let label: Perspective = key.parse().map_err(|_| CorpusError::Validation {
                    thread_id: id.clone(),
                    message: format!("summaries: unknown perspective label {key:?}"),
                })?;
                let text = v
                    .as_str()
                    .ok_or_else(|| fail(&format!("summaries.{key}"), "expected a string".into()))?;
                gold_summaries.insert(label, text.to_string());
            }
        }
        Some(_) => return Err(fail("summaries", "expected an object".into())),
    }

    let thread = CqaThread {
        id,
        question,
        context,
        answers,
        gold_spans,
        gold_summaries,
    };
    thread.validate()?;
    Ok(thread)
}

pub fn write_corpus<W: Write>(corpus: &Corpus, mut out: W) -> Result<(), CorpusError> {
    for thread in &corpus.threads {
        let line = serde_json::to_string(&thread.to_record()).expect("thread records serialize");
        writeln!(out, "{line}").map_err(|e| CorpusError::Io {
            path: "<writer>".into(),
            source: e,
        })?;
    }
    Ok(())
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    let io_err = |e| CorpusError::Io {
        path: path.display().to_string(),
        source: e,
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err)?;
    }
    let file = File::create(path).map_err(io_err)?;
    let mut out = BufWriter::new(file);
    write_corpus(corpus, &mut out)?;
    out.flush().map_err(io_err)
}

/// Per-perspective gold span tallies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub split: Split,
    pub total_threads: usize,
    pub total_spans: usize,
    pub span_counts: BTreeMap<Perspective, usize>,
    pub span_percentages: BTreeMap<Perspective, f64>,
}

impl StatsReport {
    /// Plain-text table, one row per perspective.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "split: {}\nthreads: {}\nspans: {}\n{:<12} {:>8} {:>9}\n",
            self.split, self.total_threads, self.total_spans, "perspective", "count", "percent"
        );
        for p in Perspective::ALL {
            out.push_str(&format!(
                "{:<12} {:>8} {:>8.2}%\n",
                p.as_str(),
                self.span_counts[&p],
                self.span_percentages[&p]
            ));
        }
        out
    }
}

pub fn corpus_stats(corpus: &Corpus) -> StatsReport {
    let mut span_counts: BTreeMap<Perspective, usize> =
        Perspective::ALL.into_iter().map(|p| (p, 0)).collect();
    for span in corpus.threads.iter().flat_map(|t| &t.gold_spans) {
        *span_counts.get_mut(&span.label).expect("all labels present") += 1;
    }
    let total: usize = span_counts.values().sum();
    let span_percentages = span_counts
        .iter()
        .map(|(p, &c)| {
            let pct = if total == 0 {
                0.0
            } else {
                c as f64 / total as f64 * 100.0
            };
            (*p, pct)
        })
        .collect();
    StatsReport {
        split: corpus.split,
        total_threads: corpus.threads.len(),
        total_spans: total,
        span_counts,
        span_percentages,
    }
}
