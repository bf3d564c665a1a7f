use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: truncated record at byte offset {offset} (file length {len} is not a multiple of {record})")]
    TruncatedRecord {
        path: PathBuf,
        offset: usize,
        len: usize,
        record: usize,
    },

    #[error("{path}: expected {expected} label records, found {found}")]
    LabelCountMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("raw class ids not present in the remap table: {0:?}")]
    UnmappedClass(Vec<u32>),

    #[error("invalid remap table line {line}: {msg}")]
    RemapSyntax { line: usize, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("input is not unit-norm (row {row} has norm {norm})")]
    NotNormalized { row: usize, norm: f64 },

    #[error("sinkhorn kernel underflowed ({0}); increase epsilon")]
    KernelUnderflow(String),

    #[error("transport plan row {0} is all zeros")]
    DegeneratePlan(usize),

    #[error("class id {class} out of range for {classes} classes")]
    InvalidClass { class: usize, classes: usize },

    #[error("class {0} has no initialized prototypes")]
    UninitializedClass(usize),

    #[error("negative probability {value} at pixel {pixel:?}")]
    NegativeProbability { pixel: (usize, usize), value: f64 },

    #[error("no ORIGINAL labels to compute class statistics from")]
    NoLabels,

    #[error(
        "non-finite loss at epoch {epoch}, step {step}: focal={focal} lovasz={lovasz} nce={nce}"
    )]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        focal: f64,
        lovasz: f64,
        nce: f64,
    },

    #[error("bad file format in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
