//! Inference-time proposal ranking and localization metrics.

mod inference;
mod metrics;

pub use inference::{
    eval_mask, predict_dataset, rank_proposals, rank_scored, read_predictions, score_proposals, write_predictions, Prediction,
    RoleLoss, ScoredProposals,
};
pub use metrics::{evaluate, evaluate_with, iou, vote_select, EvalReport, Segment, RANKS, THRESHOLDS};
