//! Chain-of-thought prompt programs for perspective-aware summarization.
//!
//! A program runs as two model calls: a keyphrase-extraction call over the
//! perspective spans, then a summary call that feeds back the extracted
//! keyphrases and, for `cot_guide`, the perspective guide (tone, anchor
//! phrase, definition). The default wording lives in `docs/prompts/`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Perspective;
use crate::error::PromptError;

const SYSTEM_PROMPT: &str = include_str!("../../../docs/prompts/system.txt");
const DEFAULT_INSTRUCTIONS: &str = include_str!("../../../docs/prompts/instructions.json");
const DEFAULT_GUIDES: &str = include_str!("../../../docs/prompts/guides.json");

const LIST_FORMAT_HINT: &str = "Answer with one keyphrase per line, each line starting with \"- \".";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Vanilla,
    CotKeyphrase,
    CotGuide,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Vanilla, Strategy::CotKeyphrase, Strategy::CotGuide];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Vanilla => "vanilla",
            Strategy::CotKeyphrase => "cot_keyphrase",
            Strategy::CotGuide => "cot_guide",
        }
    }

    pub fn uses_keyphrases(self) -> bool {
        self != Strategy::Vanilla
    }

    /// Steps whose instruction text the program carries.
    pub fn steps(self) -> &'static [Step] {
        match self {
            Strategy::Vanilla => &[Step::SummaryGeneration],
            Strategy::CotKeyphrase => &[
                Step::KeyphraseExtraction,
                Step::KeyphraseIntegration,
                Step::SummaryGeneration,
            ],
            Strategy::CotGuide => &[
                Step::KeyphraseExtraction,
                Step::KeyphraseIntegration,
                Step::GuideIntegration,
                Step::SummaryGeneration,
            ],
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| PromptError::InvalidProgram(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    KeyphraseExtraction,
    KeyphraseIntegration,
    GuideIntegration,
    SummaryGeneration,
}

impl Step {
    pub fn as_str(self) -> &'static str {
        match self {
            Step::KeyphraseExtraction => "keyphrase_extraction",
            Step::KeyphraseIntegration => "keyphrase_integration",
            Step::GuideIntegration => "guide_integration",
            Step::SummaryGeneration => "summary_generation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuideSource {
    /// Established anchor phrasing used by reference summaries.
    Canonical,
    /// Written for this toolkit; replace through a registry override.
    KitDefault,
    /// Loaded from a user-supplied registry file.
    Override,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuideEntry {
    pub perspective: Perspective,
    pub tone: String,
    pub anchor: String,
    pub definition: String,
    pub source: GuideSource,
}

#[derive(Deserialize)]
struct GuideFields {
    tone: String,
    anchor: String,
    definition: String,
    #[serde(default)]
    source: Option<GuideSource>,
}

/// One guide per perspective.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GuideRegistry {
    entries: BTreeMap<Perspective, GuideEntry>,
}

impl Default for GuideRegistry {
    fn default() -> Self {
        let mut registry = GuideRegistry {
            entries: BTreeMap::new(),
        };
        registry
            .apply_json(DEFAULT_GUIDES, GuideSource::KitDefault)
            .expect("bundled guides.json is valid");
        assert_eq!(registry.entries.len(), Perspective::ALL.len());
        registry
    }
}

impl GuideRegistry {
    /// Default registry with the perspectives in `json` replaced.
    pub fn with_overrides(json: &str) -> Result<Self, PromptError> {
        let mut registry = Self::default();
        registry.apply_json(json, GuideSource::Override)?;
        Ok(registry)
    }

    fn apply_json(&mut self, json: &str, default_source: GuideSource) -> Result<(), PromptError> {
        let raw: BTreeMap<String, GuideFields> =
            serde_json::from_str(json).map_err(|e| PromptError::Registry(e.to_string()))?;
        for (label, fields) in raw {
            let perspective: Perspective = label
                .parse()
                .map_err(|_| PromptError::Registry(format!("unknown perspective {label:?}")))?;
            for (name, value) in [
                ("tone", &fields.tone),
                ("anchor", &fields.anchor),
                ("definition", &fields.definition),
            ] {
                if value.trim().is_empty() {
                    return Err(PromptError::Registry(format!("{label}.{name} is empty")));
                }
            }
            let source = match default_source {
                GuideSource::Override => GuideSource::Override,
                _ => fields.source.unwrap_or(default_source),
            };
            self.entries.insert(
                perspective,
                GuideEntry {
                    perspective,
                    tone: fields.tone,
                    anchor: fields.anchor,
                    definition: fields.definition,
                    source,
                },
            );
        }
        Ok(())
    }

    pub fn get(&self, perspective: Perspective) -> &GuideEntry {
        &self.entries[&perspective]
    }

    pub fn entries(&self) -> impl Iterator<Item = &GuideEntry> {
        self.entries.values()
    }
}

/// Guide from the bundled default registry.
pub fn guide_for(perspective: Perspective) -> GuideEntry {
    GuideRegistry::default().get(perspective).clone()
}

fn default_slots(strategy: Strategy) -> BTreeMap<String, String> {
    let all: BTreeMap<String, BTreeMap<String, String>> =
        serde_json::from_str(DEFAULT_INSTRUCTIONS).expect("bundled instructions.json is valid");
    all[strategy.as_str()].clone()
}

/// Instruction text per step plus an optional fixed guide.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptProgram {
    pub strategy: Strategy,
    pub instruction_slots: BTreeMap<String, String>,
    /// Overrides the registry guide for every perspective when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guide: Option<GuideEntry>,
}

impl PromptProgram {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            instruction_slots: default_slots(strategy),
            guide: None,
        }
    }

    /// Copy with the given slots replaced; unknown step names are rejected.
    pub fn with_instructions(&self, slots: &BTreeMap<String, String>) -> Result<Self, PromptError> {
        let mut next = self.clone();
        for (step, text) in slots {
            if !next.instruction_slots.contains_key(step) {
                return Err(PromptError::InvalidProgram(format!(
                    "{} has no {step} step",
                    self.strategy
                )));
            }
            next.instruction_slots.insert(step.clone(), text.clone());
        }
        Ok(next)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if self.strategy == Strategy::Vanilla && self.guide.is_some() {
            return Err(PromptError::InvalidProgram("vanilla programs take no guide".into()));
        }
        for step in self.strategy.steps() {
            match self.instruction_slots.get(step.as_str()) {
                Some(text) if !text.trim().is_empty() => {}
                _ => {
                    return Err(PromptError::InvalidProgram(format!(
                        "missing instruction for {}",
                        step.as_str()
                    )))
                }
            }
        }
        Ok(())
    }

    fn slot(&self, step: Step) -> Result<&str, PromptError> {
        self.instruction_slots
            .get(step.as_str())
            .map(String::as_str)
            .ok_or_else(|| PromptError::InvalidProgram(format!("missing instruction for {}", step.as_str())))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub system: String,
    pub user: String,
    pub step: Step,
}

/// Escapes one list item so it fits on a single line and cannot be read as a
/// placeholder or as a nested list marker.
pub fn escape_item(item: &str) -> String {
    let mut out = String::with_capacity(item.len());
    for (i, c) in item.chars().enumerate() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '<' => out.push_str("\\<"),
            '>' => out.push_str("\\>"),
            '-' if i == 0 => out.push_str("\\-"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape_item(item: &str) -> String {
    let mut out = String::with_capacity(item.len());
    let mut chars = item.chars().peekable();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.peek() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('<') => out.push('<'),
            Some('>') => out.push('>'),
            Some('-') => out.push('-'),
            _ => {
                out.push('\\');
                continue;
            }
        }
        chars.next();
    }
    out
}

pub fn format_dash_list<S: AsRef<str>>(items: &[S]) -> String {
    items
        .iter()
        .map(|s| format!("- {}", escape_item(s.as_ref())))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn format_numbered_list<S: AsRef<str>>(items: &[S]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {}", i + 1, escape_item(s.as_ref())))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Strips a list marker (`- `, `* `, `• `, `1. `, `1) `) from a line.
fn strip_marker(line: &str) -> Option<&str> {
    for marker in ["- ", "* ", "• "] {
        if let Some(rest) = line.strip_prefix(marker) {
            return Some(rest);
        }
    }
    let digits = line.len() - line.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits > 0 {
        let rest = &line[digits..];
        return rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") "));
    }
    None
}

/// Items of a rendered list, unescaped, without trimming.
pub fn parse_list(text: &str) -> Vec<String> {
    text.split('\n')
        .filter_map(strip_marker)
        .map(unescape_item)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct KeyphraseList {
    pub keyphrases: Vec<String>,
    /// Set when the completion had text but no list lines.
    pub warning: bool,
}

/// Keyphrases from a model completion: trimmed, non-empty, deduplicated
/// case-insensitively keeping the first spelling.
pub fn parse_keyphrases(completion: &str) -> KeyphraseList {
    let mut seen = HashSet::new();
    let mut keyphrases = Vec::new();
    let mut saw_list_line = false;
    for line in completion.lines() {
        let Some(rest) = strip_marker(line.trim_start()) else {
            continue;
        };
        saw_list_line = true;
        let item = unescape_item(rest.trim());
        let item = item.trim();
        if item.is_empty() {
            continue;
        }
        if seen.insert(item.to_lowercase()) {
            keyphrases.push(item.to_string());
        }
    }
    KeyphraseList {
        keyphrases,
        warning: !saw_list_line && !completion.trim().is_empty(),
    }
}

/// First `<name>` placeholder that is not backslash-escaped.
pub fn find_unresolved(text: &str) -> Option<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        if chars[i] == '<' && (i == 0 || chars[i - 1] != '\\') {
            let mut j = i + 1;
            while j < chars.len() && (chars[j].is_alphanumeric() || " _-".contains(chars[j])) {
                j += 1;
            }
            if j < chars.len()
                && chars[j] == '>'
                && j > i + 1
                && chars[i + 1].is_alphabetic()
            {
                return Some(chars[i..=j].iter().collect());
            }
        }
        i += 1;
    }
    None
}

fn substitute(template: &str, perspective: Perspective, guide: Option<&GuideEntry>) -> String {
    let mut out = template.replace("<perspective>", perspective.as_str());
    if let Some(g) = guide {
        out = out
            .replace("<anchor>", &g.anchor)
            .replace("<tone>", &g.tone)
            .replace("<perspective definition>", &g.definition);
    }
    out
}

fn checked(text: String, what: &str) -> Result<String, PromptError> {
    match find_unresolved(&text) {
        Some(p) => Err(PromptError::UnresolvedPlaceholder(p, what.to_string())),
        None => Ok(text),
    }
}

fn spans_block<S: AsRef<str>>(spans: &[S]) -> String {
    format!("Perspective spans:\n{}", format_numbered_list(spans))
}

/// First call of the chain: pull keyphrases out of the spans.
pub fn build_keyphrase_prompt<S: AsRef<str>>(
    spans: &[S],
    program: &PromptProgram,
) -> Result<RenderedPrompt, PromptError> {
    if spans.is_empty() {
        return Err(PromptError::NoSpans);
    }
    if !program.strategy.uses_keyphrases() {
        return Err(PromptError::NoKeyphraseStep(program.strategy.as_str()));
    }
    let instruction = checked(
        program.slot(Step::KeyphraseExtraction)?.to_string(),
        Step::KeyphraseExtraction.as_str(),
    )?;
    let user = format!("{}\n\n{instruction}\n{LIST_FORMAT_HINT}", spans_block(spans));
    Ok(RenderedPrompt {
        system: SYSTEM_PROMPT.trim_end().to_string(),
        user,
        step: Step::KeyphraseExtraction,
    })
}

/// Final call of the chain. An empty `keyphrases` list drops the keyphrase
/// paragraph entirely.
pub fn build_summary_prompt<S: AsRef<str>, K: AsRef<str>>(
    perspective: Perspective,
    spans: &[S],
    keyphrases: &[K],
    program: &PromptProgram,
    registry: &GuideRegistry,
) -> Result<RenderedPrompt, PromptError> {
    if spans.is_empty() {
        return Err(PromptError::NoSpans);
    }
    program.validate()?;
    let mut sections = vec![format!("Perspective: {perspective}"), spans_block(spans)];

    match program.strategy {
        Strategy::Vanilla => {
            if !keyphrases.is_empty() {
                return Err(PromptError::InvalidProgram(
                    "vanilla programs take no keyphrases".into(),
                ));
            }
        }
        Strategy::CotKeyphrase | Strategy::CotGuide => {
            if !keyphrases.is_empty() {
                let instruction = checked(
                    substitute(program.slot(Step::KeyphraseIntegration)?, perspective, None),
                    Step::KeyphraseIntegration.as_str(),
                )?;
                sections.push(format!("{instruction}\n{}", format_dash_list(keyphrases)));
            }
        }
    }

    if program.strategy == Strategy::CotGuide {
        let guide = program
            .guide
            .as_ref()
            .filter(|g| g.perspective == perspective)
            .unwrap_or_else(|| registry.get(perspective));
        sections.push(checked(
            substitute(program.slot(Step::GuideIntegration)?, perspective, Some(guide)),
            Step::GuideIntegration.as_str(),
        )?);
    }

    sections.push(checked(
        substitute(program.slot(Step::SummaryGeneration)?, perspective, None),
        Step::SummaryGeneration.as_str(),
    )?);

    Ok(RenderedPrompt {
        system: SYSTEM_PROMPT.trim_end().to_string(),
        user: sections.join("\n\n"),
        step: Step::SummaryGeneration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const NONE: [&str; 0] = [];

    #[test]
    fn canonical_anchors() {
        assert_eq!(guide_for(Perspective::Information).anchor, "For information purposes...");
        assert_eq!(guide_for(Perspective::Question).anchor, "It is inquired...");
        assert_eq!(guide_for(Perspective::Information).source, GuideSource::Canonical);
        let s = guide_for(Perspective::Suggestion);
        assert_eq!(s.source, GuideSource::KitDefault);
        assert!(!s.anchor.is_empty() && !s.tone.is_empty() && !s.definition.is_empty());
    }

    #[test]
    fn registry_is_total() {
        let reg = GuideRegistry::default();
        for p in Perspective::ALL {
            assert_eq!(reg.get(p).perspective, p);
        }
    }

    #[test]
    fn overrides_replace_single_entries() {
        let reg = GuideRegistry::with_overrides(
            r#"{"Cause": {"tone": "calm", "anchor": "Causes may be...", "definition": "why it happens"}}"#,
        )
        .unwrap();
        assert_eq!(reg.get(Perspective::Cause).anchor, "Causes may be...");
        assert_eq!(reg.get(Perspective::Cause).source, GuideSource::Override);
        assert_eq!(reg.get(Perspective::Information).source, GuideSource::Canonical);
        assert!(GuideRegistry::with_overrides(r#"{"Cause": {"tone": "", "anchor": "a", "definition": "d"}}"#).is_err());
        assert!(GuideRegistry::with_overrides(r#"{"Mood": {"tone": "t", "anchor": "a", "definition": "d"}}"#).is_err());
    }

    #[test]
    fn keyphrase_prompt_embeds_span_once() {
        let program = PromptProgram::new(Strategy::CotGuide);
        let p = build_keyphrase_prompt(&["take ibuprofen for the pain"], &program).unwrap();
        assert_eq!(p.user.matches("take ibuprofen for the pain").count(), 1);
        assert_eq!(p.step, Step::KeyphraseExtraction);
    }

    #[test]
    fn keyphrase_prompt_keeps_order() {
        let program = PromptProgram::new(Strategy::CotKeyphrase);
        let p = build_keyphrase_prompt(&["alpha one", "beta two", "gamma three"], &program).unwrap();
        let a = p.user.find("alpha one").unwrap();
        let b = p.user.find("beta two").unwrap();
        let c = p.user.find("gamma three").unwrap();
        assert!(a < b && b < c);
    }

    #[test]
    fn keyphrase_prompt_errors() {
        let program = PromptProgram::new(Strategy::CotGuide);
        assert_eq!(build_keyphrase_prompt(&NONE, &program), Err(PromptError::NoSpans));
        let vanilla = PromptProgram::new(Strategy::Vanilla);
        assert!(matches!(
            build_keyphrase_prompt(&["x"], &vanilla),
            Err(PromptError::NoKeyphraseStep(_))
        ));
    }

    #[test]
    fn delimiters_are_escaped_and_recovered() {
        let spans = ["see <doctor> now", "- not a bullet", "back\\slash\nnewline"];
        let program = PromptProgram::new(Strategy::CotGuide);
        let p = build_keyphrase_prompt(&spans, &program).unwrap();
        assert_eq!(find_unresolved(&p.user), None);
        let block = p.user.split("\n\n").next().unwrap();
        assert_eq!(parse_list(block), spans);
    }

    #[test]
    fn vanilla_has_no_guide_text() {
        let reg = GuideRegistry::default();
        let program = PromptProgram::new(Strategy::Vanilla);
        let p = build_summary_prompt(Perspective::Information, &["x y z"], &NONE, &program, &reg).unwrap();
        let g = reg.get(Perspective::Information);
        assert!(!p.user.contains(&g.anchor));
        assert!(!p.user.contains(&g.tone));
        assert!(!p.user.contains(&g.definition));
        assert!(build_summary_prompt(Perspective::Information, &["x"], &["k"], &program, &reg).is_err());
    }

    #[test]
    fn cot_guide_renders_guide_block() {
        let reg = GuideRegistry::default();
        let program = PromptProgram::new(Strategy::CotGuide);
        let p = build_summary_prompt(
            Perspective::Information,
            &["fever is common"],
            &["fever"],
            &program,
            &reg,
        )
        .unwrap();
        let g = reg.get(Perspective::Information);
        let block = format!(
            "Start with {} texts. Use the {} tone of this perspective. Consider the following definition when generating the summary: {}.",
            g.anchor, g.tone, g.definition
        );
        assert!(p.user.contains(&block));
        assert!(p.user.contains("For information purposes..."));
        assert!(p.user.ends_with(
            "Focus on Information-specific aspects in your summary. Now generate a concise and coherent summary."
        ));
        // spans, keyphrases, guide, closing
        let order = [
            p.user.find("fever is common").unwrap(),
            p.user.find("- fever").unwrap(),
            p.user.find("Start with").unwrap(),
            p.user.find("Focus on").unwrap(),
        ];
        assert!(order.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn cot_guide_resolves_every_placeholder() {
        let reg = GuideRegistry::default();
        let program = PromptProgram::new(Strategy::CotGuide);
        for p in Perspective::ALL {
            let r = build_summary_prompt(p, &["a <b> c"], &["k"], &program, &reg).unwrap();
            assert_eq!(find_unresolved(&r.user), None, "{p}");
        }
    }

    #[test]
    fn cot_keyphrase_skips_guide() {
        let reg = GuideRegistry::default();
        let program = PromptProgram::new(Strategy::CotKeyphrase);
        let r = build_summary_prompt(Perspective::Question, &["why?"], &["k"], &program, &reg).unwrap();
        assert!(!r.user.contains("It is inquired..."));
        assert!(r.user.contains("- k"));
    }

    #[test]
    fn unknown_placeholder_in_slot_is_an_error() {
        let reg = GuideRegistry::default();
        let mut slots = BTreeMap::new();
        slots.insert("summary_generation".to_string(), "Write about <topic>.".to_string());
        let program = PromptProgram::new(Strategy::CotGuide).with_instructions(&slots).unwrap();
        assert!(matches!(
            build_summary_prompt(Perspective::Cause, &["x"], &NONE, &program, &reg),
            Err(PromptError::UnresolvedPlaceholder(..))
        ));
        slots.insert("bogus".to_string(), "x".to_string());
        assert!(PromptProgram::new(Strategy::CotGuide).with_instructions(&slots).is_err());
    }

    #[test]
    fn parses_keyphrase_lists() {
        assert_eq!(
            parse_keyphrases("- pain relief\n- ibuprofen").keyphrases,
            vec!["pain relief", "ibuprofen"]
        );
        assert_eq!(parse_keyphrases(""), KeyphraseList::default());
        assert_eq!(parse_keyphrases("- Ibuprofen\n- ibuprofen").keyphrases, vec!["Ibuprofen"]);
        assert_eq!(parse_keyphrases("1. one\n2) two\n* three\n-   \n").keyphrases, vec!["one", "two", "three"]);
        let junk = parse_keyphrases("I cannot help with that");
        assert!(junk.keyphrases.is_empty() && junk.warning);
    }

    #[test]
    fn escaped_leading_dash_survives() {
        assert_eq!(parse_keyphrases(&format_dash_list(&["-5 mg dose"])).keyphrases, vec!["-5 mg dose"]);
    }
}
