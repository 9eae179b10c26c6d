//! The point-convolution backbone: a reverse-mode tape, kernel-point
//! convolutions, the encoder-decoder, SGD and checkpoints.

pub mod checkpoint;
pub mod conv;
pub mod network;
pub mod optim;
pub mod tape;

pub use conv::{kernel_point_positions, Neighborhood, KERNEL_POINTS};
pub use network::{
    FeatureTap, Moments, Network, NetworkConfig, NormMode, NormStats, Parameter, TileGeometry, TileOutput, NORM_MOMENTUM,
};
pub use optim::{learning_rate, Sgd};
pub use tape::{Gradients, Matrix, Tape, Var};
