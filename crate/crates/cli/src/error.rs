use perspectra_core::error::{
    ConfigError, CorpusError, ExportError, LlmError, MetricError, OptimizeError, PromptError, SpanError,
    SummarizeError,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Span(#[from] SpanError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error("{task}: {source}")]
    Task {
        task: String,
        #[source]
        source: SummarizeError,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Json { path: String, line: usize, message: String },
    #[error("{0}")]
    Input(String),
}

impl CliError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Stable machine-readable category for the error line.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Corpus(_) => "corpus",
            CliError::Span(_) => "span",
            CliError::Prompt(_) => "prompt",
            CliError::Llm(_)
            | CliError::Task {
                source: SummarizeError::Llm(_),
                ..
            } => "llm",
            CliError::Task { .. } => "prompt",
            CliError::Metric(_) => "metric",
            CliError::Optimize(_) => "optimize",
            CliError::Export(_) => "export",
            CliError::Io { .. } => "io",
            CliError::Json { .. } => "json",
            CliError::Input(_) => "input",
        }
    }
}
