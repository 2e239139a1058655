use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mae::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    WeightedCe,
    Dice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    BalancedAccuracy,
    PositiveIou,
}

impl LossKind {
    /// The validation metric paired with this objective.
    pub fn monitor(self) -> Monitor {
        match self {
            LossKind::WeightedCe => Monitor::BalancedAccuracy,
            LossKind::Dice => Monitor::PositiveIou,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegConfig {
    pub n_classes: usize,
    pub decoder_channels: Vec<usize>,
    pub residual_blocks_per_stage: usize,
    pub class_weights: (f64, f64),
    pub dice_eps: f64,
    pub loss_kind: LossKind,
    pub monitor: Monitor,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            n_classes: 2,
            decoder_channels: vec![256, 128],
            residual_blocks_per_stage: 1,
            class_weights: (1.0, 1.0),
            dice_eps: 1.0,
            loss_kind: LossKind::WeightedCe,
            monitor: Monitor::BalancedAccuracy,
        }
    }
}

impl SegConfig {
    pub fn with_loss(loss_kind: LossKind) -> Self {
        SegConfig { loss_kind, monitor: loss_kind.monitor(), ..Self::default() }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.n_classes != 2 {
            return Err(Error::invalid(format!("only binary segmentation is supported, got {} classes", self.n_classes)));
        }
        if self.monitor != self.loss_kind.monitor() {
            return Err(Error::invalid(format!("{:?} must be monitored with {:?}", self.loss_kind, self.loss_kind.monitor())));
        }
        let up = 1usize << self.decoder_channels.len();
        if model.grid() * up != model.image_size {
            return Err(Error::invalid(format!(
                "{} upsampling stages take a {}-cell grid to {}, not {}",
                self.decoder_channels.len(),
                model.grid(),
                model.grid() * up,
                model.image_size
            )));
        }
        if self.decoder_channels.contains(&0) {
            return Err(Error::invalid("decoder channels must be positive"));
        }
        let (w0, w1) = self.class_weights;
        if !(w0 > 0.0 && w1 > 0.0 && w0.is_finite() && w1.is_finite()) {
            return Err(Error::invalid(format!("class weights {w0}, {w1} must be positive")));
        }
        if !(self.dice_eps > 0.0) {
            return Err(Error::invalid(format!("dice eps {} must be positive", self.dice_eps)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monitor_pairing_enforced() {
        let m = ModelConfig::default();
        SegConfig::default().validate(&m).unwrap();
        SegConfig::with_loss(LossKind::Dice).validate(&m).unwrap();
        let bad = SegConfig { monitor: Monitor::PositiveIou, ..SegConfig::default() };
        assert!(bad.validate(&m).is_err());
    }

    #[test]
    fn stage_count_must_reach_image_size() {
        let m = ModelConfig::default();
        let bad = SegConfig { decoder_channels: vec![64], ..SegConfig::default() };
        assert!(bad.validate(&m).is_err());
    }
}
