//! Layers, the small CNN, and the transfer-learning head.

pub mod layers;
mod network;

pub(crate) use network::spec_hash as network_spec_hash;
pub use network::{
    build_head, build_head_spatial, build_small_cnn, build_small_cnn_with, InputKind, InputShape, LayerSpec, Mode,
    Network, TensorEntry, Trace, DEFAULT_DROPOUT,
};
