//! Image buffers and files, transfer functions, PSNR, paired datasets and the
//! synthetic dataset generator.
//!
//! Everything operates on display-encoded values in `[0, 1]`.

mod dataset;
mod image;
mod metrics;
pub mod synth;
pub mod transfer;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use dataset::{build_dataset, split_ids, Direction, ImagePair, PairEntry, PairedDataset, Split, MANIFEST_FILE, TRAIN_FRACTION};
pub use image::{decode_image, encode_jpeg, encode_png, load_image, save_image, BitDepth, ImageBuffer, Pixel};
pub use metrics::{mse, psnr, psnr_label, Psnr};
pub use synth::{generate_synthetic, SynthDataset, SynthSpec};
pub use transfer::{pq_decode, pq_encode, srgb_decode, srgb_encode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImagingError {
    #[error("image has zero width or height")]
    EmptyImage,
    #[error("{len} pixels do not fill a {width}x{height} image")]
    PixelCount { width: usize, height: usize, len: usize },
    #[error("non-finite pixel value")]
    NonFinite,
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
    #[error("cannot decode {what}: {message}")]
    Decode { what: String, message: String },
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("cannot encode image: {0}")]
    Encode(String),
    #[error("image dimensions differ: {left:?} vs {right:?}")]
    DimensionMismatch { left: (usize, usize), right: (usize, usize) },
    #[error("{function}: {value} is outside the domain")]
    TransferDomain { function: &'static str, value: f64 },
    #[error("not a directory: {}", .0.display())]
    MissingDirectory(PathBuf),
    #[error("no matching pairs between {} and {}", source_dir.display(), target_dir.display())]
    NoPairs { source_dir: PathBuf, target_dir: PathBuf },
    #[error("source and target dimensions differ for pairs: {}", .0.join(", "))]
    PairDimensions(Vec<String>),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
}

impl ImagingError {
    pub(crate) fn io(path: &Path, err: std::io::Error) -> Self {
        ImagingError::Io {
            path: path.to_path_buf(),
            message: err.to_string(),
        }
    }
}
