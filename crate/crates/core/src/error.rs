use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument for {what}: {detail}")]
    InvalidArgument { what: &'static str, detail: String },

    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },

    #[error("checkpoint format error in {path}: {detail}")]
    CheckpointFormat { path: String, detail: String },

    #[error("csv format error in {path}: {detail}")]
    CsvFormat { path: String, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{what} failed at {stage}: {source}")]
    Stage {
        what: &'static str,
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            what,
            detail: detail.into(),
        }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn at_stage(self, what: &'static str, stage: impl Into<String>) -> Self {
        Error::Stage {
            what,
            stage: stage.into(),
            source: Box::new(self),
        }
    }
}
