//! Layer graphs, parameters, forward/backward evaluation and Adam.

mod adam;
mod exec;
mod graph;
pub mod ops;
mod params;

pub use adam::{Adam, AdamConfig};
pub use exec::{backward, forward, forward_probs, forward_tape, Tape};
pub use graph::{
    build_network, scale_channels, Activation, LayerKind, LayerSpec, NetworkGraph, NetworkKind, Shape3, Source,
    WidthScale, LEAKY_SLOPE,
};
pub use params::{LayerParams, Params};
