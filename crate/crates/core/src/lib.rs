//! A compact multi-modal multi-task transformer.
//!
//! Peripherals turn raw text, images, and video into spatio-temporal feature
//! tensors; a shared central processor writes them into temporal and spatial
//! caches linked by a per-call index array, and a decoder with
//! temporally-gated spatial attention reads both caches to serve any number
//! of registered tasks. Training runs single-threaded round-robin
//! (deterministic) or lock-free asynchronous with one worker per task.

pub mod attention;
pub mod cache;
pub mod checkpoint;
pub mod cnp;
pub mod nn;
pub mod metrics;
pub mod peripherals;
pub mod rng;
pub mod scalar;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use scalar::{AtomicScalar, Scalar};
pub use tensor::Tensor;
