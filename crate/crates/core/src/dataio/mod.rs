//! MNIST ingestion, paired-digit synthesis and the binary archive format.

mod archive;
mod idx;
mod pairs;

use std::path::PathBuf;

use thiserror::Error;

use crate::network::NetworkError;
use crate::tensor::TensorError;

pub use archive::{
    load_model, load_pairs, save_model, save_pairs, ArchiveKind, ModelArchive, PairArchive, ARCHIVE_MAGIC,
    ARCHIVE_VERSION,
};
pub use idx::{find_idx_pair, load_idx, write_idx, IdxDataset, IMAGES_MAGIC, LABELS_MAGIC};
pub use pairs::{
    is_target_class, remap_pixel, synthesize_pairs, PairConfig, PairMeta, PairedSample, CANVAS_COLS, CANVAS_ROWS,
    DIGIT_SIDE, POSITIVE_TARGET,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: bad magic number 0x{found:08x} at offset {offset} (expected 0x{expected:08x})", path.display())]
    BadMagic {
        path: PathBuf,
        offset: usize,
        found: u32,
        expected: u32,
    },
    #[error("{}: truncated at offset {offset}: need {needed} bytes, file has {available}", path.display())]
    Truncated {
        path: PathBuf,
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("{}: {extra} unexpected trailing bytes at offset {offset}", path.display())]
    TrailingBytes { path: PathBuf, offset: usize, extra: usize },
    #[error("{}: {reason}", path.display())]
    Malformed { path: PathBuf, reason: String },
    #[error(
        "{} holds {images} images but {} holds {labels} labels",
        images_path.display(),
        labels_path.display()
    )]
    CountMismatch {
        images_path: PathBuf,
        images: usize,
        labels_path: PathBuf,
        labels: usize,
    },
    #[error("{}: archive format version {found} is not supported (expected {expected})", path.display())]
    UnsupportedVersion { path: PathBuf, found: u32, expected: u32 },
    #[error("{}: archive holds kind {found}, expected {expected}", path.display())]
    WrongKind { path: PathBuf, found: u32, expected: u32 },
    #[error("{}: checksum mismatch, file is corrupt", path.display())]
    ChecksumMismatch { path: PathBuf },
    #[error("{}: missing entry {name:?}", path.display())]
    MissingEntry { path: PathBuf, name: String },
    #[error("dataset has no digits of class {0}")]
    EmptyClassGroup(&'static str),
    #[error("digits must be 28x28, dataset has {0:?}")]
    UnsupportedImageSize((usize, usize)),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}
