use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] emoguard_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("stage `{stage}` failed (config {config_hash}): {source}")]
    Stage {
        stage: String,
        config_hash: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Error {
        let path = path.into();
        move |source| Error::Json { path, source }
    }
}

/// Attaches a stage name and config hash to errors of one pipeline step.
pub trait StageExt<T> {
    fn stage(self, stage: &str, config_hash: &str) -> Result<T>;
}

impl<T, E: Into<Error>> StageExt<T> for std::result::Result<T, E> {
    fn stage(self, stage: &str, config_hash: &str) -> Result<T> {
        self.map_err(|e| match e.into() {
            staged @ Error::Stage { .. } => staged,
            other => Error::Stage {
                stage: stage.to_string(),
                config_hash: config_hash.to_string(),
                source: Box::new(other),
            },
        })
    }
}
