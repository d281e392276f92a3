//! Sequential image mosaicing with a learned homography regressor.
//!
//! The crate builds wide-field mosaics from narrow-field grayscale frame
//! sequences. A transform between adjacent frames is carried as a 6-DoF
//! affine map parameterized by the displacements of three patch corners;
//! the fourth corner follows from the parallelogram identity. Per-frame
//! relative transforms accumulate into global ones that place every frame
//! on a common canvas, and drift metrics expose how registration error
//! grows along the chain.
//!
//! Modules, bottom up:
//!
//! - [`tensor`]: dense f64 kernels (matmul, conv2d, softmax, bilinear
//!   sampling) with fixed accumulation order.
//! - [`frame`]: grayscale rasters and PGM/PPM I/O.
//! - [`homography`]: three-point transform algebra and inverse warping.
//! - [`pig`]: synthetic data with ground truth known by construction:
//!   bounded rigid perturbations of single frames and full spiral, circular
//!   or freehand sequences.
//! - [`fusion`]: the non-local query/key/value fusion head with analytic
//!   gradients.
//! - [`regressor`]: the trainable corner-displacement regressor (shared
//!   convolutional stem, fusion head, fully connected head), momentum-SGD
//!   training, sequence estimation and checkpointing.
//! - [`mosaic`]: transform accumulation, canvas rendering and the
//!   least-squares correspondence estimator.
//! - [`metrics`]: MRE drift curves and RMSE/APE photometric errors.
//! - [`gradcheck`]: finite-difference verification of every gradient.
//! - [`cli`]: the `seqmosaic` binary's subcommands.
//!
//! Everything downstream of a seed is deterministic: datasets, training
//! runs and rendered mosaics are byte-reproducible. See the `examples/`
//! directory for one runnable walkthrough per capability.

pub mod cli;
pub mod error;
pub mod frame;
pub mod fusion;
pub mod gradcheck;
pub mod homography;
pub mod metrics;
pub mod mosaic;
pub mod pig;
pub mod regressor;
pub mod rng;
pub mod tensor;

mod fsutil;

pub use error::{Error, Result};
pub use frame::ImageFrame;
pub use homography::{AffineTransform, PatchCorners, ThreePointDelta};
pub use pig::{PigParams, PigRecord, SequenceSpec};
pub use regressor::{RegressorModel, TrainConfig};
pub use tensor::Tensor;
