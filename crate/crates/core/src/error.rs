use std::path::PathBuf;

/// Errors raised by the toolkit.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    /// An invalid configuration value or combination.
    #[error("invalid config: {0}")]
    Config(String),

    /// A tensor arrived with the wrong dimensions.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// Synthetic sample generation gave up after the retry budget.
    #[error("generation failed for seed {seed}: {reason}")]
    Generation { seed: u64, reason: String },

    /// A dataset on disk is missing, inconsistent, or corrupt.
    #[error("dataset error{}: {reason}", sample_id.map(|id| format!(" (sample {id:06})")).unwrap_or_default())]
    Dataset {
        sample_id: Option<u64>,
        reason: String,
    },

    /// An attack tag or level outside the supported grid.
    #[error("invalid attack spec '{spec}': valid tags are BASE, BC1-3, CA1-3, CR1-3, IB1-3, NA1-3, JC1-9")]
    AttackSpec { spec: String },

    /// A checkpoint could not be read or does not match the requested schema.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Learning-rate schedule queried outside its domain.
    #[error("schedule error: iter {iter} exceeds maxiter {maxiter}")]
    Schedule { iter: u64, maxiter: u64 },

    /// Training aborted (non-finite loss, empty split, ...).
    #[error("training error: {0}")]
    Training(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },

    #[error("jpeg encode error: {0}")]
    JpegEncode(#[from] jpeg_encoder::EncodingError),

    #[error("jpeg decode error: {0}")]
    JpegDecode(image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }

    pub fn dataset(sample_id: impl Into<Option<u64>>, reason: impl Into<String>) -> Self {
        Error::Dataset {
            sample_id: sample_id.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
