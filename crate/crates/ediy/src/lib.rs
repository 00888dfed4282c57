//! Desk-scale self-supervised visual pre-training with region-level
//! diversity and invariance objectives (E-DIY).
//!
//! The crate trains small convolutional encoders on unlabeled images by
//! combining three losses: a BYOL-style instance alignment term between an
//! online network and its EMA target, a region diversity term that pushes
//! the most similar-looking dissimilar regions of one augmented view apart,
//! and a region invariance term that pulls the most similar regions across
//! two augmented views together. Region pairs are selected by ranking cosine
//! similarities of a frozen teacher encoder's final feature map, with random
//! and cross-instance sampling variants available for ablations.
//!
//! Everything runs on CPU with explicit seeds: augmentation, init, shuffling
//! and samplers all derive from the run seed, so runs are reproducible and
//! resumable bit for bit.
//!
//! Modules:
//! - [`data`]: image I/O, deterministic synthetic datasets, paired-view
//!   augmentation.
//! - [`nn`]: tensors, differentiable layers, the gradient tape, optimizers.
//! - [`model`]: encoder, global/local projectors, predictor, model state.
//! - [`matching`]: similarity matrices and region-pair selection strategies.
//! - [`losses`]: the three loss components and their weighted composition.
//! - [`train`]: two-stage pipeline (teacher bootstrap, then pre-training),
//!   checkpoints and the JSON-lines loss log.
//! - [`eval`]: collapse diagnostics, saliency maps, linear probe, and the
//!   match inspector.
//!
//! See the `examples/` directory for one runnable example per capability;
//! the `ediy` binary exposes the same operations as subcommands.

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod matching;
pub mod model;
pub mod nn;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
