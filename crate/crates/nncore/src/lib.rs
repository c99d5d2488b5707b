//! Minimal deterministic differentiable-computation core.
//!
//! Every layer has a hand-written forward and backward pass over flat
//! row-major buffers. The whole stack is generic over [`Real`] so the same
//! graph can be trained in `f32` and verified in `f64` against central
//! finite differences ([`gradcheck`]).

pub mod attention;
pub mod block;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod real;

pub use attention::{AttnCache, AttnMask, MultiHeadAttention};
pub use block::{Block, BlockCache, BlockConfig, Context, Dropout};
pub use checkpoint::{Checkpoint, RngState, TensorMeta};
pub use error::{NnError, Result};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ScalarGraph};
pub use layers::{cross_entropy, gelu, softmax, Embedding, LayerNorm, Linear};
pub use optim::{clip_global_norm, AdamW, AdamWConfig, LrSchedule};
pub use params::{Init, ParamId, ParamStore};
pub use real::Real;
