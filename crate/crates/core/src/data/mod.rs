//! Synthetic phantoms, dataset and checkpoint persistence, quality metrics and
//! image export.

mod dataset;
mod image;
mod io;
mod metrics;
mod phantom;

pub use dataset::{
    derive_seed, generate_samples, load_dataset, simulate_dataset, Dataset, DatasetManifest, FileEntry,
    GeometryRecord, SampleEntry, DATASET_FORMAT_VERSION,
};
pub use image::{export_pgm, mip, read_pgm, slice, Axis, Image, Normalization, PGM_MAXVAL};
pub use io::{
    meta_path, read_array, read_traces, read_volume, sha256_hex, verify_checksum, write_array, write_atomic, write_traces,
    write_volume, ArrayMeta, ArrayKind,
};
pub use metrics::{mse, psnr};
pub use phantom::{gen_phantom, PhantomSpec};

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed JSON in {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("checksum mismatch for {path}: manifest {expected}, file {actual}")]
    Checksum { path: PathBuf, expected: String, actual: String },
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid phantom spec: {0}")]
    Phantom(String),
    #[error("index {index} out of bounds for axis of length {len}")]
    OutOfBounds { index: usize, len: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Wave(#[from] crate::wave::WaveError),
}

pub type Result<T> = std::result::Result<T, DataError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> DataError {
    let path = path.into();
    move |source| DataError::Io { path, source }
}

pub(crate) fn format_err(path: impl Into<PathBuf>, message: impl Into<String>) -> DataError {
    DataError::Format { path: path.into(), message: message.into() }
}
