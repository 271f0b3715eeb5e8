//! Losses, target assignment, optimisation and the two training stages.

mod adam;
mod loss;
mod targets;
mod trainer;

pub use adam::{Adam, AdamConfig};
pub use loss::{caption_loss, head_loss, proposal_loss, smoothed_target, LossCoefficients};
pub use targets::{assign_targets, closest_anchor, Assignment, Positive};
pub use trainer::{
    caption_eval_loss, caption_item_loss, prepare_videos, proposal_item_loss, train_captioner,
    train_proposal_generator, CaptionExample, EpochRecord, History, LoopSettings, PreparedVideo, ProposalExample,
};
