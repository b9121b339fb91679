//! Video panoptic segmentation with autoregressive query propagation.
//!
//! A mask-classification network decodes a set of object queries per frame.
//! Output embeddings of detected and tracked objects are fed back as queries
//! for the next frame, so identities follow objects through a video. The
//! crate covers the full loop: a small autodiff engine, STEP-style data
//! ingestion and synthetic videos, episode sampling with the
//! stuff/detected/tracked ground-truth split, the matching-based training
//! loss, online tracking with a consecutive-miss budget, and STQ scoring.

pub mod dataset;
pub mod episode;
pub mod error;
pub mod kv;
pub mod loss;
pub mod network;
pub mod pipeline;
pub mod stq;
pub mod tensor;
pub mod tracker;
pub mod training;

pub use error::{Error, Result};
