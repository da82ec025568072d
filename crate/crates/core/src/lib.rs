//! Hybrid-attention decoder engine: persistent global attention over a
//! conditioning prefix plus a fixed sliding window over generated tokens,
//! with the curriculum-scheduled distillation procedure that adapts a
//! full-attention model to the windowed regime, an attention-mass
//! analyzer, and an analytical KV/FLOPs cost model.
//!
//! Everything runs on the CPU at desk scale: the engine, the training
//! harness with its synthetic sequence task, and the analysis tooling are
//! all exercised end to end by the `acceptance` test suite in the CLI
//! crate.

pub mod analysis;
pub mod distill;
pub mod error;
pub mod harness;
pub mod kvcache;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod schedule;

mod backprop;

pub use error::{Error, Result};
pub use kvcache::{cache_bytes_formula, HybridKVCache};
pub use masking::{causal_full_mask, curriculum_mask, hybrid_mask, AdditiveMask, WindowSpec};
pub use model::{
    sample_greedy, sample_topk, ForwardOutput, Model, ModelConfig, SequenceLayout, Token,
};
pub use numerics::{cross_entropy, masked_softmax, matmul, Matrix, Rng};
pub use schedule::{alpha, tau_at, window_at, CurriculumSchedule};
