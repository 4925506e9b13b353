//! Graph attention over entity nodes and a multi-head Transformer encoder.

pub mod graph;
pub mod transformer;

pub use graph::{
    graph_attention_backward, graph_attention_forward, self_attention_forward, vanilla_self_attention,
    GraphAttentionCache, GraphAttentionGrads, GraphAttentionOutput, GraphAttentionParams, NodeStates,
};
pub use transformer::{
    transformer_backward, transformer_forward, transformer_forward_segments, NormPlacement, TransformerCache,
    TransformerGrads, TransformerLayerParams, TransformerOutput, TransformerParams,
};
