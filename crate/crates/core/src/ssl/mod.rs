//! Self-supervised training of the backbone with alternating deep
//! clustering, temporal consistency and contrastive objectives.

pub mod losses;
mod train;

pub use losses::{
    cluster_weights, contrastive_loss, deep_clustering_loss, derangement, nearest_pairing, pseudo_labels,
    temporal_consistency_loss, ClusterWeights, DeepClusteringLoss, PairLoss,
};
pub use train::{train, write_loss_log, AppliedLoss, LossReport, TrainConfig, LOSS_LOG_HEADER};
