//! Federated multimodal bird's-eye-view vehicle detection, simulated at desk
//! scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`grad`]: reverse-mode autodiff tape, parameter store and SGD.
//! * [`scene`]: synthetic lidar/radar scenes with controllable heterogeneity.
//! * [`eval`]: rotated-box IoU, matching, AP and AR.
//! * [`detector`]: twin extractors, cross-attention fusion, rotated-anchor RPN,
//!   second stage and the masked cross-entropy loss.
//! * [`impute`]: cross-modal autoencoders that fill in a missing modality.
//! * [`fed`]: clients, k-d-tree client selection, aggregation, round reports.
//! * [`runner`]: experiment configuration, presets and the CLI commands.

pub mod checkpoint;
pub mod detector;
pub mod error;
pub mod eval;
pub mod fed;
pub mod geom;
pub mod grad;
pub mod impute;
pub mod persist;
pub mod runner;
pub mod scene;
pub mod seed;

pub use error::{Error, ErrorKind, Result};
