use thiserror::Error;

/// Errors raised by the reconstruction library.
#[derive(Debug, Error)]
pub enum TomoError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("layer at altitude {altitude} m lies at or above the laser beacon at {beacon} m")]
    LayerAboveBeacon { altitude: f64, beacon: f64 },

    #[error("source point for star {star}, layer {layer} falls outside the layer grid")]
    GridCoverage { star: usize, layer: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid profile: {0}")]
    InvalidProfile(String),

    #[error("invalid cluster partition: {0}")]
    InvalidPartition(String),

    #[error("covariance factorization failed for a {nodes}-node grid even with jitter {jitter:e}")]
    IllConditionedCovariance { nodes: usize, jitter: f64 },

    #[error("grid with {nodes} nodes exceeds the dense cap of {cap}")]
    TooLarge { nodes: usize, cap: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("layer {layer} is nonzero but its weight is zero")]
    ConstraintViolation { layer: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("linear solve failed: {0}")]
    Solver(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("seed {seed}: {source}")]
    InRun {
        seed: u64,
        #[source]
        source: Box<TomoError>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl TomoError {
    /// Process exit code used by the command line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            TomoError::Config(_)
            | TomoError::InvalidProfile(_)
            | TomoError::InvalidPartition(_)
            | TomoError::InvalidGeometry(_)
            | TomoError::LayerAboveBeacon { .. }
            | TomoError::GridCoverage { .. }
            | TomoError::TooLarge { .. } => 2,
            TomoError::Io { .. } => 4,
            TomoError::InRun { source, .. } => source.exit_code(),
            _ => 3,
        }
    }
}

impl TomoError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        TomoError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, TomoError>;
