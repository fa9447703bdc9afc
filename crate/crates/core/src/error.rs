use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: thread {}: field `{field}`: {message}", thread_id.as_deref().unwrap_or("<unknown>"))]
    Parse {
        line: usize,
        thread_id: Option<String>,
        field: String,
        message: String,
    },
    #[error("thread {thread_id}: {message}")]
    Validation { thread_id: String, message: String },
    #[error("duplicate thread id {0}")]
    DuplicateId(String),
    #[error("unknown perspective label {0:?}")]
    UnknownLabel(String),
    #[error("unknown split {0:?}; expected train, validation or test")]
    UnknownSplit(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error, PartialEq)]
pub enum SpanError {
    #[error("ensemble needs at least one member")]
    NoMembers,
    #[error("shape mismatch between providers {providers:?}: {detail}")]
    ShapeMismatch { providers: Vec<String>, detail: String },
    #[error("provider {provider}: row {row} is not a probability distribution")]
    NotADistribution { provider: String, row: usize },
    #[error("{0} probability rows for {1} tokens")]
    RowCount(usize, usize),
    #[error("expected {expected} classes, got {actual}")]
    ClassCount { expected: usize, actual: usize },
    #[error("span [{start}, {end}) in {doc} does not fit the token sequence")]
    Misaligned { doc: String, start: usize, end: usize },
    #[error("no token sequence for {0}")]
    MissingTokens(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("at least one span text is required")]
    NoSpans,
    #[error("the {0} strategy has no keyphrase step")]
    NoKeyphraseStep(&'static str),
    #[error("unresolved placeholder {0} in {1}")]
    UnresolvedPlaceholder(String, String),
    #[error("invalid prompt program: {0}")]
    InvalidProgram(String),
    #[error("guide registry: {0}")]
    Registry(String),
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("endpoint returned {status} after {attempts} attempt(s): {body}")]
    Status { status: u16, body: String, attempts: u32 },
    #[error("gave up after {attempts} attempt(s): {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("could not decode endpoint response: {0}")]
    Decode(String),
}

impl LlmError {
    pub fn attempts(&self) -> u32 {
        match self {
            LlmError::Status { attempts, .. } | LlmError::Exhausted { attempts, .. } => *attempts,
            _ => 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("missing sub-score {0}")]
    MissingSubScore(&'static str),
    #[error("bertscore needs non-empty candidate and reference")]
    EmptyText,
    #[error("embedding shape: {0}")]
    Embedding(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Error)]
pub enum SummarizeError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("empty minibatch")]
    EmptyMinibatch,
    #[error("dev split has no (thread, perspective) tasks with reference summaries")]
    NoTasks,
    #[error("invalid optimizer config: {0}")]
    Config(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("no endpoint named {0:?} in config")]
    UnknownEndpoint(String),
    #[error("endpoint {name:?} is a {actual} endpoint, expected {expected}")]
    WrongKind {
        name: String,
        expected: &'static str,
        actual: &'static str,
    },
    #[error("no {0} endpoint configured")]
    NoEndpoint(&'static str),
}
