//! Frozen-backbone transfer learning for small image classification datasets.
//!
//! The pipeline runs in stages, each producing a persisted artifact:
//!
//! 1. [`dataset`]: ingest a class-per-folder tree and split it 70/15/15 per class.
//! 2. [`augment`]: materialize seeded rotation/zoom/shift/flip variants of the train split.
//! 3. [`backbone`]: run a frozen ONNX feature extractor (pooling included) over each split.
//! 4. [`tuner`]: random search over optimizer, learning rate and dropout, training a
//!    softmax [`head`] with [`optim`] through the [`trainer`] loop.
//! 5. [`metrics`]: confusion matrix, per-class and averaged precision/recall/F1, ROC/AUC.
//!
//! [`pipeline`] wires the stages with content-hash caching.
//!
//! Data-parallel loops go through rayon when the `parallel` feature is on
//! (the default) and fall back to plain iterators otherwise. Results are
//! identical either way.

pub mod augment;
pub mod backbone;
pub mod dataset;
pub mod error;
pub mod head;
pub mod metrics;
pub mod optim;
mod par;
pub mod pipeline;
pub mod provenance;
pub mod seeding;
pub mod trainer;
pub mod tuner;

pub use error::{Error, Result};
