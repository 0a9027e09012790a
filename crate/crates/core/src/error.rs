use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema error in sample `{sample_id}`, field `{field}`: {reason}")]
    Schema {
        sample_id: String,
        field: String,
        reason: String,
    },

    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),

    #[error("frame for video `{video_id}` at {timestamp_s:.3}s cannot be resolved")]
    FrameUnresolvable { video_id: String, timestamp_s: f64 },

    #[error("frame extractor failed ({status}): {stderr}")]
    ExtractorFailed { status: String, stderr: String },

    #[error("authentication rejected by backend `{backend}` (HTTP {status})")]
    AuthFailed { backend: String, status: u16 },

    #[error("backend `{backend}` still rate limited after {retries} retries")]
    RateLimited { backend: String, retries: u32 },

    #[error("transport error talking to `{backend}`: {message}")]
    Transport { backend: String, message: String },

    #[error("unparseable response from `{backend}`: {message}")]
    BadResponse { backend: String, message: String },

    #[error("request to `{backend}` timed out after {retries} retries")]
    Timeout { backend: String, retries: u32 },

    #[error("no fixture for request `{0}`")]
    MissingFixture(String),

    #[error("sample `{0}` has no gold label")]
    NoGoldLabel(String),

    #[error("model returned no usable text for sample `{sample_id}` segment {segment_index}")]
    EmptyExtraction {
        sample_id: String,
        segment_index: usize,
    },

    #[error("sample `{sample_id}`{}: {source}", segment_suffix(.segment_index))]
    Annotated {
        sample_id: String,
        segment_index: Option<usize>,
        #[source]
        source: Box<Error>,
    },

    #[error("request carries {count} images, backend limit is {limit}")]
    TooManyImages { count: usize, limit: usize },

    #[error("no parseable answer for sample `{0}` after re-ask")]
    UnparseableAfterRetry(String),

    #[error("cannot take a vote over zero answers")]
    EmptyVote,

    #[error("every planning run for sample `{0}` failed to produce an answer")]
    AllRunsUnparseable(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("run stopped after {completed} new samples; re-run to resume")]
    Interrupted { completed: usize },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

fn segment_suffix(segment: &Option<usize>) -> String {
    match segment {
        Some(i) => format!(" segment {i}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::FileNotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn schema(sample_id: &str, field: &str, reason: impl Into<String>) -> Self {
        Error::Schema {
            sample_id: sample_id.to_string(),
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    /// Attach the sample (and segment) a pipeline failure belongs to.
    pub fn annotate(self, sample_id: &str, segment_index: Option<usize>) -> Self {
        Error::Annotated {
            sample_id: sample_id.to_string(),
            segment_index,
            source: Box::new(self),
        }
    }

    /// Strips [`Error::Annotated`] wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Annotated { source, .. } => source.root(),
            other => other,
        }
    }
}
