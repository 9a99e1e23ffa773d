use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec error at {path}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("malformed {what} at {path}: {reason}")]
    Format {
        what: &'static str,
        path: PathBuf,
        reason: String,
    },
    #[error("no records found under {0}")]
    NoRecords(PathBuf),
    #[error("missing annotation for image `{0}`")]
    MissingAnnotation(String),
    #[error("missing grade for image `{0}`")]
    MissingGrade(String),
    #[error("unknown grade `{0}` (expected benign or malignant)")]
    UnknownGrade(String),
    #[error("raster shape mismatch in {op}: {expected:?} vs {got:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("could not place {requested} glands after {attempts} attempts on image {image}")]
    InfeasiblePacking {
        image: String,
        requested: usize,
        attempts: usize,
    },
    #[error("weight manifest mismatch: {}", .0.join("; "))]
    WeightMismatch(Vec<String>),
    #[error("missing {what} at {path}; run `{command}` first")]
    MissingArtifact {
        what: &'static str,
        path: PathBuf,
        command: &'static str,
    },
    #[error("{0} already exists; pass --force to overwrite")]
    WouldOverwrite(PathBuf),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] gradeprompt_autograd::TensorError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
