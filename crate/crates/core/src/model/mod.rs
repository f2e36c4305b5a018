//! The tri-stage denoiser.

pub mod adaptive;
pub mod attention;
pub mod denoiser;
pub mod refinement;

pub use adaptive::{
    build_interaction_weights, distance_loss, distance_loss_var, graph_reasoning, gt_distance_profile, gt_profile_of,
    predict_distance, AdaptiveStage, AdjacencyMode, DistancePredictor, DistanceProfile, InteractionGraph, ProfileKind,
};
pub use attention::{MixedAttention, SelfLearningStage};
pub use denoiser::{FineDual, ForwardOutput, ModelConfig, TextBundle};
pub use refinement::{Highlight, RefinementStage};
