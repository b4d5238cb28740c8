//! Structured sparse attention: masks, rotary positions, the attention
//! layer with query pruning, a block-wise kernel and a FLOPs estimator.

pub mod flops;
pub mod kernel;
pub mod layer;
pub mod mask;
pub mod rope;

pub use flops::{flops_estimate, FlopsBreakdown, SeqComposition};
pub use kernel::{blockwise_masked_attention, dense_masked_attention, BlockStats, Matrix};
pub use layer::{
    attention_layer_backward, attention_layer_forward, plan_query_rows, prune_queries,
    AttentionCache, AttentionLayerParams, LayerInputs, PruneSchedule,
};
pub use mask::{build_mask, build_mask_for_queries, Mask, MaskSpec};
pub use rope::{rope_rotate, Rope};
