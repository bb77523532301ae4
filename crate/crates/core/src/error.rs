use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a shape or structural precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("training failed: {0}")]
    Training(String),
    /// Generated data does not meet one of the regularity assumptions.
    #[error("assumption violated for {constant}: {detail}")]
    Assumption { constant: &'static str, detail: String },
    #[error("hard routing required: localization checks are undefined under soft routing")]
    HardRoutingRequired,
}

pub type Result<T> = std::result::Result<T, Error>;
