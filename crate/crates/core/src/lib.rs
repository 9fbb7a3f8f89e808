//! Int8 SWIN transformer inference pipeline with explicit fused-operation
//! boundaries, a ReLU-substitution procedure driven by iterative knowledge
//! distillation, and a latency ablation harness.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — dense f32/int8/int32 tensors, quantization, nonlinearities
//! * [`autodiff`] — reverse-mode tape and SGD-with-momentum
//! * [`swin`] — the float (teacher/reference) windowed-attention model
//! * [`quant`] — the int8 execution path: six int8 GEMMs bracketed by six
//!   fused float ops, plus the GELU-less mode that removes the activation
//!   fused op entirely
//! * [`distill`] — per-block GELU→ReLU replacement with knowledge
//!   distillation, and the procedural toy task used to exercise it
//! * [`bench`] — latency measurement, per-fused-op ablation, speedup tables

pub mod autodiff;
pub mod bench;
pub mod dataset;
pub mod distill;
pub mod error;
pub mod quant;
pub mod swin;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{AccTensor, QuantTensor, Tensor};
