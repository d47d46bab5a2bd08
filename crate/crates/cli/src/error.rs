use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] gnss_fsl::Error),
    #[error("{stage}: missing upstream artifact {}", path.display())]
    MissingArtifact { stage: String, path: PathBuf },
    #[error("{}: content hash differs from the manifest", path.display())]
    Tampered { path: PathBuf },
    #[error("config hash {found} differs from upstream stage {stage} ({expected}); pass --allow-config-change to override")]
    ConfigMismatch { stage: String, expected: String, found: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
}

impl CliError {
    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(gnss_fsl::Error::InvalidArgument(_)) => "invalid_argument",
            CliError::Core(gnss_fsl::Error::Numerical(_)) => "numerical",
            CliError::Core(_) => "core",
            CliError::MissingArtifact { .. } => "missing_artifact",
            CliError::Tampered { .. } => "tampered_artifact",
            CliError::ConfigMismatch { .. } => "config_mismatch",
            CliError::Config(_) => "invalid_config",
            CliError::Io { .. } => "io",
            CliError::Json { .. } => "json",
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }
}
