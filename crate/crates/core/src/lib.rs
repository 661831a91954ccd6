//! CPU reference implementation of shared-prompt attention for RL
//! post-training.
//!
//! A prompt group of `N` responses normally replicates its `P` prompt
//! tokens `N` times. The two-region kernel in [`dualkv`] keeps one copy of
//! the prompt KV and lets every response attend to it, producing the same
//! outputs and gradients as the baseline varlen kernel in [`fa2`]. The
//! remaining modules package the data ([`packing`], [`pipeline`]), prove the
//! equivalence end to end on a toy decoder ([`layer`]) and estimate the
//! savings analytically ([`costmodel`]).

pub mod bench;
pub mod costmodel;
pub mod dualkv;
pub mod error;
pub mod fa2;
mod kernel;
pub mod layer;
pub mod packing;
pub mod pipeline;
pub mod refattn;
pub mod rollout;
pub mod tensor;
pub mod verify;

pub use dualkv::{convert_dkv_context, dualkv_bwd, dualkv_fwd, ContextGradScratch, DualKVGrads, DualKVInput};
pub use error::{Error, Result};
pub use fa2::{fa2_varlen_bwd, fa2_varlen_fwd, VarlenBatch};
pub use kernel::Compute;
pub use tensor::{Precision, Tensor};

#[cfg(test)]
pub(crate) mod testutil;
