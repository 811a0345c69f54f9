//! GCN and DNA graph layers, jumping-knowledge aggregators and the full
//! node-classification network.

mod conv;
mod grouped;
mod model;

pub use conv::{check_dna_shape, dna_conv, gcn_conv, AttentionRecord, DnaLayerParams};
pub use grouped::{Dense, GroupedWeight};
pub use model::{
    jk_concat, jk_pool, DropoutPlacement, ForwardOutput, JkMode, LayerKind, LayerParams, Model, ModelConfig,
    ModelParams,
};
