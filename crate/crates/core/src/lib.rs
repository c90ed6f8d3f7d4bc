//! Segmentation toolkit for the SE-connection pyramid U-Net family.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense tensors, a reverse-mode tape and a finite-difference checker
//! - [`blocks`]: double-conv stage, squeeze-and-excitation block, SEC fusion
//! - [`networks`]: the six model variants (plain U-Net through the full cascade)
//! - [`training`]: cross-entropy SGD with inverse-time decay, staged training, checkpoints
//! - [`data`]: synthetic head-and-neck phantoms, sample files, resizing, patient folds
//! - [`metrics`]: Dice / Jaccard and fold-level reports
//! - [`cli`]: command-line front end and overlay rendering

pub mod blocks;
mod bytes;
pub mod cli;
pub mod data;
mod error;
pub mod mask;
pub mod metrics;
pub mod networks;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use mask::Mask;
pub use tensor::{Graph, ParamId, ParamStore, Parameter, Real, Tensor, Var};
