//! Masked autoencoder over 4×4 tokens of multispectral patches.

pub mod config;
pub mod loss;
pub mod mask;
pub mod model;
pub mod patch;

pub use config::{MaskMode, ModelConfig};
pub use loss::{normalize_targets, recon_loss, recon_loss_value};
pub use mask::{consistent_mask, random_mask, visible_count, MaskPlan};
pub use model::{encoder_parameter_count, pretrain_step, Encoder, MaeDecoder, MaskedAutoencoder, PatchBatch, PretrainBatch};
pub use patch::{patchify, patchify_batch, unpatchify};
