//! Domain-adversarial fingerprint pore detection.
//!
//! * [`porenet`] — residual pore-map regressor, domain classifier, checkpoints.
//! * [`dataprep`] — label images, patch grids, file formats, synthetic domains.
//! * [`trainer`] — adversarial training and last-layer fine-tuning.
//! * [`detector`] — tiled inference and local-maxima pore extraction.
//! * [`evalkit`] — bidirectional matching, detection rates, ROC sweeps.

pub mod error;
pub mod fsutil;
pub mod plane;
pub mod dataprep;
pub mod detector;
pub mod evalkit;
pub mod porenet;
pub mod trainer;

pub use error::{Error, Result};
pub use plane::Plane;
