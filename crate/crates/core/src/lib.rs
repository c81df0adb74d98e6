//! Contextual channel sparsity for LoRA fine-tuning.
//!
//! The frozen main branch of each linear layer runs on a per-batch subset of
//! channels, chosen from cheap low-rank estimates of its activations, while
//! the LoRA branch stays dense. Loss-bearing output tokens can be routed
//! through the dense path. Every matmul is charged to a FLOP ledger that is
//! checked against a closed-form model.

pub mod container;
pub mod data;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod harness;
pub mod linalg;
pub mod lora;
pub mod model;
pub mod plan;
pub mod sparse_exec;
pub mod sparsity;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use flops::{analytic_step, AnalyticInput, FlopCounts, FlopPath, KeptWidths, StepGeometry};
pub use linalg::{col_l2_norms, estimator_apply, svd_jacobi, svd_topk, topk_indices, ScoreGranularity, ScoreVector, SvdFactors};
pub use lora::{attach_lora, lora_delta, merged_linear, AdapterBank, LoraAdapter, Proj};
pub use model::{build_model, ActivationTap, Model, ModelConfig, TokenBatch};
pub use plan::{Criteria, Granularity, LayerSparsity, Metric, SparsityPlan, TokenSplit};
pub use sparse_exec::{slice_gather, split_tokens_compute, SliceCache, TokenPartition};
pub use sparsity::{select_mask, mask_overlap, ChannelMask, EstimatorBank, Group, SparseStep};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};
