//! Numerical laboratory for graph attention over entity graphs and its
//! fully connected self-attention form.
//!
//! Modules map onto the pipeline: [`entity_graph`] builds co-occurrence
//! graphs from annotated contexts, [`attention`] holds the graph-attention
//! layer and a small Transformer encoder with analytic gradients,
//! [`fusion`] bridges tokens and graph nodes, and [`probe`] scores
//! attention heads for entity-centred patterns.

pub mod attention;
pub mod checkpoint;
pub mod entity_graph;
pub mod error;
pub mod fusion;
pub mod numerics;
pub mod probe;

pub use error::{Error, Result};
