//! Training objectives: class-balanced and perceptual losses, their mix, and the
//! forecastor's composite schedule.

mod lcb;
mod perceptual;
mod schedule;
mod weights;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

pub use lcb::{bce_loss, cb_loss, l1_loss, lcb_loss, Lcb, LcbConfig};
pub use perceptual::{
    ConvFeatureExtractor, FeatureExtractor, PerceptualDistance, DEFAULT_EXTRACTOR_SEED,
    DEFAULT_WIDTHS,
};
pub use schedule::{
    active_terms, alpha_schedule, composite_loss, composite_loss_tensor, CompositeLossConfig,
};
pub use weights::{class_weight, ClassWeightTable};

use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Lcb,
    L1,
    Bce,
}

impl LossKind {
    pub fn tag(self) -> &'static str {
        match self {
            LossKind::Lcb => "lcb",
            LossKind::L1 => "l1",
            LossKind::Bce => "bce",
        }
    }
}

/// A pixel objective ready to apply to `(pred, target)` pairs.
#[derive(Debug, Clone)]
pub enum Objective {
    Lcb(Lcb),
    L1,
    Bce,
}

impl Objective {
    pub fn new(kind: LossKind, lcb: Lcb) -> Self {
        match kind {
            LossKind::Lcb => Objective::Lcb(lcb),
            LossKind::L1 => Objective::L1,
            LossKind::Bce => Objective::Bce,
        }
    }

    pub fn kind(&self) -> LossKind {
        match self {
            Objective::Lcb(_) => LossKind::Lcb,
            Objective::L1 => LossKind::L1,
            Objective::Bce => LossKind::Bce,
        }
    }

    pub fn loss(&self, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
        match self {
            Objective::Lcb(l) => l.loss(pred, target),
            Objective::L1 => l1_loss(pred, target),
            Objective::Bce => bce_loss(pred, target),
        }
    }
}
