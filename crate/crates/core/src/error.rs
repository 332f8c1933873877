use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("value outside domain: {0}")]
    Domain(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("model selection failed: {0}")]
    Selection(String),
    #[error("seed ensemble failed for seed {seed}: {source}")]
    Ensemble {
        seed: u64,
        #[source]
        source: alloc::boxed::Box<Error>,
    },
    #[error("attack protocol violated: {0}")]
    Protocol(String),
    #[error("metric undefined: {0}")]
    Metric(String),
}
