//! Perspective span identification from classifier probabilities.
//!
//! Each provider (a fine-tuned token classifier) emits one probability row per
//! word token of an answer, over the 11 BIO classes `B-X`, `I-X` for the five
//! perspectives plus `O`. Providers must pool their own subwords onto the word
//! grid produced by [`tokenize_words`]; the ensemble is the elementwise mean of
//! the member distributions, and spans are read off the per-token argmax.

use serde::{Deserialize, Serialize};
use unicode_normalization::char::is_combining_mark;

use crate::corpus::{Perspective, PerspectiveSpan};
use crate::error::SpanError;
use crate::text::char_slice;

/// `B-X` and `I-X` for each perspective, then `O`.
pub const NUM_CLASSES: usize = 2 * Perspective::ALL.len() + 1;

const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Word tokens of one answer, with offsets in scalar values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub source: String,
    pub tokens: Vec<Token>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }
}

fn is_punctuation(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace() && !is_combining_mark(c)
}

/// Splits on whitespace; every punctuation character becomes its own token.
pub fn tokenize_words(text: &str) -> TokenSeq {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut current_start = 0;

    let flush = |tokens: &mut Vec<Token>, current: &mut String, start: usize, end: usize| {
        if !current.is_empty() {
            tokens.push(Token {
                text: std::mem::take(current),
                start,
                end,
            });
        }
    };

    let mut pos = 0;
    for c in text.chars() {
        if c.is_whitespace() {
            flush(&mut tokens, &mut current, current_start, pos);
        } else if is_punctuation(c) {
            flush(&mut tokens, &mut current, current_start, pos);
            tokens.push(Token {
                text: c.to_string(),
                start: pos,
                end: pos + 1,
            });
        } else {
            if current.is_empty() {
                current_start = pos;
            }
            current.push(c);
        }
        pos += 1;
    }
    flush(&mut tokens, &mut current, current_start, pos);

    TokenSeq {
        source: text.to_string(),
        tokens,
    }
}

/// BIO tag over the five perspectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tag {
    Begin(Perspective),
    Inside(Perspective),
    Outside,
}

impl Tag {
    pub fn class_index(self) -> usize {
        match self {
            Tag::Begin(p) => 2 * p.index(),
            Tag::Inside(p) => 2 * p.index() + 1,
            Tag::Outside => NUM_CLASSES - 1,
        }
    }

    pub fn from_class_index(idx: usize) -> Option<Tag> {
        if idx == NUM_CLASSES - 1 {
            return Some(Tag::Outside);
        }
        let p = *Perspective::ALL.get(idx / 2)?;
        Some(if idx.is_multiple_of(2) {
            Tag::Begin(p)
        } else {
            Tag::Inside(p)
        })
    }

    pub fn label(self) -> String {
        match self {
            Tag::Begin(p) => format!("B-{p}"),
            Tag::Inside(p) => format!("I-{p}"),
            Tag::Outside => "O".to_string(),
        }
    }
}

/// Per-token class distributions from one provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbMatrix {
    provider_id: String,
    rows: Vec<Vec<f64>>,
}

impl ProbMatrix {
    pub fn new(provider_id: impl Into<String>, rows: Vec<Vec<f64>>) -> Result<Self, SpanError> {
        let provider_id = provider_id.into();
        let width = rows.first().map_or(0, Vec::len);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(SpanError::ShapeMismatch {
                    providers: vec![provider_id.clone()],
                    detail: format!("row {i} has {} classes, row 0 has {width}", row.len()),
                });
            }
            let sum: f64 = row.iter().sum();
            let in_range = row.iter().all(|v| (0.0..=1.0).contains(v));
            if !in_range || (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(SpanError::NotADistribution {
                    provider: provider_id,
                    row: i,
                });
            }
        }
        Ok(Self { provider_id, rows })
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn num_tokens(&self) -> usize {
        self.rows.len()
    }

    pub fn num_classes(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }
}

/// Averaged ensemble distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleOutput {
    pub rows: Vec<Vec<f64>>,
}

impl EnsembleOutput {
    pub fn tags(&self) -> Vec<Tag> {
        self.rows.iter().map(|row| argmax_tag(row)).collect()
    }
}

/// Elementwise mean of the member distributions.
///
/// Member values at each position are summed in sorted order, so the result
/// does not depend on member order at all.
pub fn average_probabilities(members: &[ProbMatrix]) -> Result<EnsembleOutput, SpanError> {
    let first = members.first().ok_or(SpanError::NoMembers)?;
    let (t, c) = (first.num_tokens(), first.num_classes());
    if members
        .iter()
        .any(|m| m.num_tokens() != t || (t > 0 && m.num_classes() != c))
    {
        return Err(SpanError::ShapeMismatch {
            providers: members.iter().map(|m| m.provider_id.clone()).collect(),
            detail: members
                .iter()
                .map(|m| format!("{}: {}x{}", m.provider_id, m.num_tokens(), m.num_classes()))
                .collect::<Vec<_>>()
                .join(", "),
        });
    }
    if members.len() == 1 {
        return Ok(EnsembleOutput {
            rows: first.rows.clone(),
        });
    }

    let k = members.len() as f64;
    let mut column = Vec::with_capacity(members.len());
    let rows = (0..t)
        .map(|i| {
            (0..c)
                .map(|j| {
                    column.clear();
                    column.extend(members.iter().map(|m| m.rows[i][j]));
                    column.sort_by(f64::total_cmp);
                    let mean = column.iter().sum::<f64>() / k;
                    mean.clamp(column[0], column[column.len() - 1])
                })
                .collect()
        })
        .collect();
    Ok(EnsembleOutput { rows })
}

/// Highest-probability tag; ties go to the lowest class index, `O` last.
pub fn argmax_tag(row: &[f64]) -> Tag {
    let mut best = 0;
    for (j, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = j;
        }
    }
    Tag::from_class_index(best).unwrap_or(Tag::Outside)
}

/// Rewrites every `I-X` that does not continue an `X` span as `B-X`.
pub fn repair_tags(tags: &[Tag]) -> Vec<Tag> {
    let mut out = Vec::with_capacity(tags.len());
    let mut open: Option<Perspective> = None;
    for &tag in tags {
        let fixed = match tag {
            Tag::Inside(p) if open != Some(p) => Tag::Begin(p),
            other => other,
        };
        open = match fixed {
            Tag::Begin(p) | Tag::Inside(p) => Some(p),
            Tag::Outside => None,
        };
        out.push(fixed);
    }
    out
}

/// Groups a tag sequence into labeled spans over `tokens`.
pub fn spans_from_tags(
    tags: &[Tag],
    tokens: &TokenSeq,
    answer_index: usize,
) -> Result<Vec<PerspectiveSpan>, SpanError> {
    if tags.len() != tokens.len() {
        return Err(SpanError::RowCount(tags.len(), tokens.len()));
    }
    let mut spans = Vec::new();
    let mut open: Option<(Perspective, usize, usize)> = None;

    let close = |open: &mut Option<(Perspective, usize, usize)>, spans: &mut Vec<PerspectiveSpan>| {
        if let Some((label, first, last)) = open.take() {
            let start = tokens.tokens[first].start;
            let end = tokens.tokens[last].end;
            let text = char_slice(&tokens.source, start, end).unwrap_or_default();
            spans.push(PerspectiveSpan {
                answer_index,
                start,
                end,
                label,
                text: text.to_string(),
            });
        }
    };

    for (i, tag) in repair_tags(tags).into_iter().enumerate() {
        match tag {
            Tag::Outside => close(&mut open, &mut spans),
            Tag::Begin(p) => {
                close(&mut open, &mut spans);
                open = Some((p, i, i));
            }
            Tag::Inside(_) => {
                if let Some((_, _, last)) = open.as_mut() {
                    *last = i;
                }
            }
        }
    }
    close(&mut open, &mut spans);
    Ok(spans)
}

/// Argmax decoding with BIO repair.
pub fn decode_spans(
    probs: &EnsembleOutput,
    tokens: &TokenSeq,
    answer_index: usize,
) -> Result<Vec<PerspectiveSpan>, SpanError> {
    if probs.rows.len() != tokens.len() {
        return Err(SpanError::RowCount(probs.rows.len(), tokens.len()));
    }
    if let Some(row) = probs.rows.iter().find(|r| r.len() != NUM_CLASSES) {
        return Err(SpanError::ClassCount {
            expected: NUM_CLASSES,
            actual: row.len(),
        });
    }
    spans_from_tags(&probs.tags(), tokens, answer_index)
}

/// BIO tags for `spans` over `tokens`; tokens outside every span get `O`.
pub fn encode_tags(spans: &[PerspectiveSpan], tokens: &TokenSeq) -> Vec<Tag> {
    let mut tags = vec![Tag::Outside; tokens.len()];
    for span in spans {
        let mut first = true;
        for (i, tok) in tokens.tokens.iter().enumerate() {
            if tok.start >= span.start && tok.end <= span.end {
                tags[i] = if first {
                    Tag::Begin(span.label)
                } else {
                    Tag::Inside(span.label)
                };
                first = false;
            }
        }
    }
    tags
}

/// One provider's output for one answer, as stored in probability files and
/// returned by token-probability endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbRecord {
    pub thread_id: String,
    pub answer_index: usize,
    pub provider_id: String,
    pub tokens: Vec<Token>,
    pub rows: Vec<Vec<f64>>,
}

impl ProbRecord {
    /// Validates the rows and checks the tokens against the kit tokenizer.
    pub fn into_matrix(self, expected: &TokenSeq) -> Result<ProbMatrix, SpanError> {
        if self.tokens != expected.tokens {
            return Err(SpanError::ShapeMismatch {
                providers: vec![self.provider_id],
                detail: format!(
                    "tokens of {} answer {} differ from the shared word tokenization",
                    self.thread_id, self.answer_index
                ),
            });
        }
        if self.rows.len() != expected.len() {
            return Err(SpanError::RowCount(self.rows.len(), expected.len()));
        }
        ProbMatrix::new(self.provider_id, self.rows)
    }
}
