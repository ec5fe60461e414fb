use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("state error: {0}")]
    State(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("sampling error: {what}: required {required}, available {available}")]
    Sampling {
        what: String,
        required: usize,
        available: usize,
    },

    #[error("ingestion error: {reason}: {}", paths_display(.paths))]
    Ingestion { reason: String, paths: Vec<PathBuf> },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("selection error: requested {requested} checkpoints, {available} available")]
    Selection { requested: usize, available: usize },

    #[error("statistics error: {0}")]
    Statistics(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn paths_display(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

impl Error {
    /// Short stable identifier, used for machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Index { .. } => "index",
            Error::State(_) => "state",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Sampling { .. } => "sampling",
            Error::Ingestion { .. } => "ingestion",
            Error::Integrity(_) => "integrity",
            Error::Selection { .. } => "selection",
            Error::Statistics(_) => "statistics",
            Error::Format(_) => "format",
            Error::Context { source, .. } => source.kind(),
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
