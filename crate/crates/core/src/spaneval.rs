//! Span identification scoring.
//!
//! Three views of agreement between predicted and gold perspective spans:
//!
//! - **macro F1**: spans are projected onto word tokens (a token takes a
//!   label when it overlaps a span with that label) and a binary F1 is
//!   computed per perspective.
//! - **strict match F1**: a predicted span counts only if a gold span has the
//!   same answer, boundaries and label; each gold span is consumed once.
//! - **proportional match F1**: each predicted span earns the largest
//!   character-overlap fraction (over its own length) against a same-label
//!   gold span in the same answer; recall is the mirror image.
//!
//! All three macro-average over the perspectives that occur in the gold or
//! predicted spans. Perspectives absent from both are left out rather than
//! scored as perfect. When neither side has any span the score is 1.0.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{CqaThread, Perspective};
use crate::error::SpanError;
use crate::prf::Prf;
use crate::spanid::TokenSeq;

/// One answer of one thread.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DocKey {
    pub thread_id: String,
    pub answer_index: usize,
}

impl std::fmt::Display for DocKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}#{}", self.thread_id, self.answer_index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EvalSpan {
    pub doc: DocKey,
    pub start: usize,
    pub end: usize,
    pub label: Perspective,
}

impl EvalSpan {
    pub fn new(thread_id: &str, answer_index: usize, start: usize, end: usize, label: Perspective) -> Self {
        Self {
            doc: DocKey {
                thread_id: thread_id.to_string(),
                answer_index,
            },
            start,
            end,
            label,
        }
    }

    fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    fn overlap(&self, other: &EvalSpan) -> usize {
        if self.doc != other.doc {
            return 0;
        }
        self.end.min(other.end).saturating_sub(self.start.max(other.start))
    }
}

/// Gold spans of a thread as evaluation spans.
pub fn thread_eval_spans(thread: &CqaThread) -> Vec<EvalSpan> {
    thread
        .gold_spans
        .iter()
        .map(|s| EvalSpan::new(&thread.id, s.answer_index, s.start, s.end, s.label))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub token: Prf,
    pub strict: Prf,
    pub proportional: Prf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanScore {
    pub macro_f1: f64,
    pub strict_f1: f64,
    pub proportional_f1: f64,
    pub per_class: BTreeMap<Perspective, ClassScores>,
}

fn present_classes(pred: &[EvalSpan], gold: &[EvalSpan]) -> BTreeSet<Perspective> {
    pred.iter().chain(gold).map(|s| s.label).collect()
}

fn macro_average(scores: &BTreeMap<Perspective, Prf>) -> f64 {
    if scores.is_empty() {
        return 1.0;
    }
    scores.values().map(|p| p.f1).sum::<f64>() / scores.len() as f64
}

fn of_label(spans: &[EvalSpan], label: Perspective) -> Vec<&EvalSpan> {
    spans.iter().filter(|s| s.label == label).collect()
}

/// Per-class token-level scores.
pub fn token_scores(
    pred: &[EvalSpan],
    gold: &[EvalSpan],
    tokens: &HashMap<DocKey, TokenSeq>,
) -> Result<BTreeMap<Perspective, Prf>, SpanError> {
    let cover = |spans: &[&EvalSpan]| -> Result<HashSet<(DocKey, usize)>, SpanError> {
        let mut covered = HashSet::new();
        for span in spans {
            let seq = tokens
                .get(&span.doc)
                .ok_or_else(|| SpanError::MissingTokens(span.doc.to_string()))?;
            if span.start >= span.end || span.end > seq.source.chars().count() {
                return Err(SpanError::Misaligned {
                    doc: span.doc.to_string(),
                    start: span.start,
                    end: span.end,
                });
            }
            for (i, tok) in seq.tokens.iter().enumerate() {
                if tok.start < span.end && span.start < tok.end {
                    covered.insert((span.doc.clone(), i));
                }
            }
        }
        Ok(covered)
    };

    let mut out = BTreeMap::new();
    for label in present_classes(pred, gold) {
        let p = cover(&of_label(pred, label))?;
        let g = cover(&of_label(gold, label))?;
        let score = if p.is_empty() && g.is_empty() {
            Prf::perfect()
        } else {
            let hits = p.intersection(&g).count() as f64;
            Prf::from_counts(hits, p.len() as f64, g.len() as f64)
        };
        out.insert(label, score);
    }
    Ok(out)
}

pub fn macro_f1(
    pred: &[EvalSpan],
    gold: &[EvalSpan],
    tokens: &HashMap<DocKey, TokenSeq>,
) -> Result<f64, SpanError> {
    Ok(macro_average(&token_scores(pred, gold, tokens)?))
}

/// Per-class exact-match scores.
pub fn strict_scores(pred: &[EvalSpan], gold: &[EvalSpan]) -> BTreeMap<Perspective, Prf> {
    let mut out = BTreeMap::new();
    for label in present_classes(pred, gold) {
        let p = of_label(pred, label);
        let g = of_label(gold, label);
        let mut available: HashMap<&EvalSpan, usize> = HashMap::new();
        for span in &g {
            *available.entry(*span).or_default() += 1;
        }
        let mut hits = 0usize;
        for span in &p {
            if let Some(n) = available.get_mut(*span) {
                if *n > 0 {
                    *n -= 1;
                    hits += 1;
                }
            }
        }
        out.insert(label, Prf::from_counts(hits as f64, p.len() as f64, g.len() as f64));
    }
    out
}

pub fn strict_match_f1(pred: &[EvalSpan], gold: &[EvalSpan]) -> f64 {
    macro_average(&strict_scores(pred, gold))
}

/// Mean best-overlap fraction of `from` spans against `against`, each
/// fraction taken over the `from` span's own length.
fn mean_best_overlap(from: &[&EvalSpan], against: &[&EvalSpan]) -> f64 {
    if from.is_empty() {
        return 0.0;
    }
    let total: f64 = from
        .iter()
        .map(|a| {
            let best = against.iter().map(|b| a.overlap(b)).max().unwrap_or(0);
            if a.len() == 0 {
                0.0
            } else {
                best as f64 / a.len() as f64
            }
        })
        .sum();
    total / from.len() as f64
}

/// Per-class overlap-proportional scores.
pub fn proportional_scores(pred: &[EvalSpan], gold: &[EvalSpan]) -> BTreeMap<Perspective, Prf> {
    present_classes(pred, gold)
        .into_iter()
        .map(|label| {
            let p = of_label(pred, label);
            let g = of_label(gold, label);
            (label, Prf::new(mean_best_overlap(&p, &g), mean_best_overlap(&g, &p)))
        })
        .collect()
}

pub fn proportional_match_f1(pred: &[EvalSpan], gold: &[EvalSpan]) -> f64 {
    macro_average(&proportional_scores(pred, gold))
}

/// All three metrics plus the per-class breakdown.
pub fn score_spans(
    pred: &[EvalSpan],
    gold: &[EvalSpan],
    tokens: &HashMap<DocKey, TokenSeq>,
) -> Result<SpanScore, SpanError> {
    let token = token_scores(pred, gold, tokens)?;
    let strict = strict_scores(pred, gold);
    let proportional = proportional_scores(pred, gold);
    let per_class = token
        .iter()
        .map(|(label, t)| {
            (
                *label,
                ClassScores {
                    token: *t,
                    strict: strict[label],
                    proportional: proportional[label],
                },
            )
        })
        .collect();
    Ok(SpanScore {
        macro_f1: macro_average(&token),
        strict_f1: macro_average(&strict),
        proportional_f1: macro_average(&proportional),
        per_class,
    })
}
