use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid config field `{field}`: {reason}")]
    ConfigField { field: String, reason: String },

    #[error("unknown backbone id `{0}`")]
    UnknownBackbone(String),

    #[error("pretrained trunk for {backbone} unavailable: {reason}")]
    PretrainedUnavailable { backbone: String, reason: String },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("kernel spec error: {0}")]
    KernelSpec(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is not finite")]
    Divergence { epoch: usize, batch: usize },

    #[error("calibration needs both labels; missing {missing} samples")]
    MissingLabel { missing: &'static str },

    #[error("insufficient pool: requested {requested} {class} samples, pool has {available}")]
    InsufficientPool {
        class: &'static str,
        requested: usize,
        available: usize,
    },

    #[error("duplicate frame id `{0}`")]
    DuplicateFrame(String),

    #[error("overlapping risk-weight ranges [{a_start}, {a_end}) and [{b_start}, {b_end})")]
    OverlappingRanges {
        a_start: f64,
        a_end: f64,
        b_start: f64,
        b_end: f64,
    },

    #[error("insufficient history: bucket {bucket} has {entries} entries, need at least 2")]
    InsufficientHistory { bucket: i64, entries: usize },

    #[error("unreadable frame source {path}: {reason}")]
    UnreadableSource { path: PathBuf, reason: String },

    #[error("weight file error: {0}")]
    WeightFile(String),

    #[error("store error: {0}")]
    Store(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::ConfigField { .. } => "config_field",
            Error::UnknownBackbone(_) => "unknown_backbone",
            Error::PretrainedUnavailable { .. } => "pretrained_unavailable",
            Error::Shape { .. } => "shape",
            Error::Dimension { .. } => "dimension",
            Error::Precondition(_) => "precondition",
            Error::Geometry(_) => "geometry",
            Error::KernelSpec(_) => "kernel_spec",
            Error::Divergence { .. } => "divergence",
            Error::MissingLabel { .. } => "missing_label",
            Error::InsufficientPool { .. } => "insufficient_pool",
            Error::DuplicateFrame(_) => "duplicate_frame",
            Error::OverlappingRanges { .. } => "overlapping_ranges",
            Error::InsufficientHistory { .. } => "insufficient_history",
            Error::UnreadableSource { .. } => "unreadable_source",
            Error::WeightFile(_) => "weight_file",
            Error::Store(_) => "store",
            Error::Io { .. } => "io",
            Error::Image(_) => "image",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Attach a path to an [`std::io::Error`].
pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
