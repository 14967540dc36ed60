//! Multi-task mixture-of-experts training framework.
//!
//! The crate is organized around a small dense-tensor autodiff engine
//! ([`tensor`], [`tape`]) on top of which the layer blocks ([`layers`]) and
//! the model family ([`arch`]) are built. Each architecture variant
//! (shared-bottom, MMoE, CGC, HoME) implements the [`arch::Architecture`]
//! trait and is registered by name, so callers select a variant at runtime
//! through [`arch::ModelConfig`].
//!
//! The remaining modules provide the rest of an end-to-end workbench:
//! synthetic multi-task datasets ([`data`]), the training loop ([`train`]),
//! ranking metrics ([`metrics`]), gate-weight diagnostics with pathology
//! detection ([`diagnostics`]), gradient verification ([`verify`]), and
//! model checkpointing ([`checkpoint`]).

pub mod arch;
pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod layers;
pub mod metrics;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use arch::{build_model, Architecture, ModelConfig, TaskCategory, TaskSpec};
pub use tape::{Mode, Tape, Var};
pub use tensor::Tensor;
