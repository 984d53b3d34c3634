//! CoviLearn: a self-contained chest X-ray screening stack.
//!
//! From-scratch f64 tensor math with reverse-mode differentiation, the four
//! ResNet/DenseNet classifier variants with a transfer-learning head, a
//! data pipeline with DICOM-lite ingestion and augmentation, Adam + binary
//! cross-entropy head training, ROC/AUC evaluation, and an HTTP screening
//! service. The backbone stays frozen; only the head trains. Everything is
//! seeded and deterministic: the same (seed, data, config) gives bitwise-
//! identical weights and history.
//!
//! ## Examples
//!
//! Each major capability has a runnable example:
//!
//! - **`inspect_architectures`** — parameter accounting for every variant
//! - **`train_micro`** — synthetic dataset on disk, 25-epoch head training,
//!   weights + history files
//! - **`evaluate_model`** — confusion matrix, metrics, ROC/AUC report
//! - **`screen_image`** — train, write a PNG, re-ingest, classify
//! - **`serve_http`** — the screening API on localhost
//! - **`dicom_roundtrip`** — DICOM-lite write/parse and ingestion
//! - **`augmentation_pipeline`** — the augmentation set and its determinism
//! - **`gradient_check`** — tape gradients vs central finite differences
//!
//! ```bash
//! cargo run --release --example train_micro
//! cargo run --release --example serve_http
//! ```
//!
//! The `covilearn` binary wraps the same library as subcommands:
//! `train`, `eval`, `predict`, `serve`, `inspect`.
//!
//! ## Module map
//!
//! - [`tensor`] — `Tensor`, layer kernels, [`tensor::autodiff::GradientTape`]
//! - [`arch`] — layer graphs, the variant builders, parameter stores, the
//!   `CVLW` weights container
//! - [`data`] — manifests, the 80:20 split, DICOM-lite, preprocessing,
//!   augmentation, synthetic fixtures
//! - [`train`] — Adam, the training loop, prediction
//! - [`eval`] — confusion matrix, accuracy/sensitivity/specificity, ROC/AUC
//! - [`service`] — the HTTP API, audit log, model registry
//! - [`cli`] — the command-line front end

pub mod arch;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod service;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
