//! Segmentation fine-tuning: token grid extraction, the upsampling head and
//! the two training objectives.

pub mod config;
pub mod losses;
pub mod model;

pub use config::{LossKind, Monitor, SegConfig};
pub use losses::{dice_loss, dice_loss_value, predict_mask, weighted_ce, weighted_ce_value};
pub use model::{augment, tokens_to_grid, tokens_to_grid_on, Flip, SegBatch, SegHead, SegmentationModel};
