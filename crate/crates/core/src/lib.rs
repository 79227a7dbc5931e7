//! Learned global color-style mapping between paired images.
//!
//! A small conditional invertible network maps every target pixel, conditioned
//! on a polynomial expansion of the matching source pixel, into a 2–4
//! dimensional latent. Averaging those latents over a frame distills the whole
//! color mapping of the pair into one short style vector, which can be applied
//! to new frames, edited, or swept interactively.
//!
//! Modules:
//! - [`autodiff`]: dense 2-D tensors, a reverse-mode tape and Adam.
//! - [`pcc`]: polynomial color correction basis, least-squares style
//!   matrices and the PCA baseline.
//! - [`flow`]: the conditional invertible network and its fast batch evaluator.
//! - [`training`]: likelihood and reconstruction losses, the training loop and
//!   evaluation.
//! - [`style`]: extract, apply, grid and map style vectors.
//! - [`imaging`]: image buffers, transfer functions, PSNR, paired datasets
//!   and the synthetic dataset generator.
//! - [`container`]: the versioned binary model file.

pub mod autodiff;
pub mod container;
pub mod flow;
pub mod imaging;
pub mod pcc;
mod real;
pub mod style;
pub mod training;

pub use real::Real;

pub use autodiff::{AdamState, Gradients, ParamId, ParamStore, Tape, Tensor2D, Var};
pub use container::{ContainerError, ModelContainer};
pub use flow::{FlowConfig, FlowError, FlowModel, LatentResult, Variant};
pub use imaging::{ImageBuffer, PairedDataset, Psnr};
pub use pcc::{PcaReducer, PccBasisVector, StyleMatrix};
pub use style::{Provenance, StyleRecord, StyleVector};
pub use training::{TrainConfig, TrainReport};
