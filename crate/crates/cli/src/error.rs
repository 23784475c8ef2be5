use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("stage {stage} failed at {}: {source}", path.display())]
    Stage {
        stage: String,
        path: PathBuf,
        #[source]
        source: Box<CliError>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}: schema version {found}, expected {expected}", path.display())]
    Schema {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] ffkv_core::Error),

    #[error(transparent)]
    Service(#[from] ffkv_service::ServiceError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub trait StageContext<T> {
    /// Attach the failing stage and the artifact it was producing.
    fn stage(self, stage: &str, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T, E: Into<CliError>> StageContext<T> for std::result::Result<T, E> {
    fn stage(self, stage: &str, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|e| match e.into() {
            // keep the innermost stage
            s @ CliError::Stage { .. } => s,
            e => CliError::Stage {
                stage: stage.to_string(),
                path: path.into(),
                source: Box::new(e),
            },
        })
    }
}
