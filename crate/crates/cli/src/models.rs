//! Stage names, checkpoint locations and model construction from the config.

use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use candle_core::DType;

use nowcast_core::losses::{ConvFeatureExtractor, Lcb, LossKind, Objective, PerceptualDistance};
use nowcast_core::networks::{restore_checkpoint, ConvLSTMConfig, ConvLstm, UNet};

use crate::config::ExperimentConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Stage {
    Interpolator,
    Forecastor,
    /// Alias for `convlstm-lcb`.
    Convlstm,
    ConvlstmLcb,
    ConvlstmBce,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Interpolator => "interpolator",
            Stage::Forecastor => "forecastor",
            Stage::Convlstm | Stage::ConvlstmLcb => "convlstm_lcb",
            Stage::ConvlstmBce => "convlstm_bce",
        }
    }

    pub fn canonical(self) -> Stage {
        match self {
            Stage::Convlstm => Stage::ConvlstmLcb,
            s => s,
        }
    }
}

/// Models that `evaluate` knows how to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModelTag {
    Dyffusion,
    Persistence,
    ConvlstmLcb,
    ConvlstmBce,
}

impl ModelTag {
    pub const ALL: [ModelTag; 4] = [
        ModelTag::Dyffusion,
        ModelTag::ConvlstmLcb,
        ModelTag::ConvlstmBce,
        ModelTag::Persistence,
    ];

    /// Row label in reports.
    pub fn label(self, cfg: &ExperimentConfig) -> String {
        match self {
            ModelTag::Dyffusion => format!("dyffusion_{}", cfg.loss.objective.tag()),
            ModelTag::Persistence => "persistence".into(),
            ModelTag::ConvlstmLcb => "convlstm_lcb".into(),
            ModelTag::ConvlstmBce => "convlstm_bce".into(),
        }
    }
}

pub fn checkpoint_path(cfg: &ExperimentConfig, stage: Stage) -> PathBuf {
    cfg.output
        .dir
        .join("checkpoints")
        .join(format!("{}.safetensors", stage.canonical().name()))
}

pub fn perceptual(cfg: &ExperimentConfig) -> Result<PerceptualDistance> {
    Ok(match &cfg.loss.perceptual_weights {
        Some(p) => PerceptualDistance::new(Arc::new(ConvFeatureExtractor::from_safetensors(p)?)),
        None => PerceptualDistance::default(),
    })
}

fn lcb(cfg: &ExperimentConfig) -> Result<Lcb> {
    Ok(Lcb::new(cfg.loss.lcb, cfg.loss.class_weights.clone(), cfg.spec(), perceptual(cfg)?)?)
}

/// Objective of a training stage: the configured one for DYffusion, fixed per
/// ConvLSTM variant.
pub fn objective(cfg: &ExperimentConfig, stage: Stage) -> Result<Objective> {
    let kind = match stage.canonical() {
        Stage::Interpolator | Stage::Forecastor => cfg.loss.objective,
        Stage::ConvlstmLcb => LossKind::Lcb,
        _ => LossKind::Bce,
    };
    Ok(Objective::new(kind, lcb(cfg)?))
}

/// Parameter-initialization seed of a stage, decorrelated from the run seed.
pub fn init_seed(cfg: &ExperimentConfig, stage: Stage) -> u64 {
    let salt = match stage.canonical() {
        Stage::Interpolator => 0x1,
        Stage::Forecastor => 0x2,
        Stage::ConvlstmLcb => 0x3,
        _ => 0x4,
    };
    cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt
}

pub fn convlstm_config(cfg: &ExperimentConfig, stage: Stage) -> ConvLSTMConfig {
    match stage.canonical() {
        Stage::ConvlstmBce => cfg.model.convlstm_bce,
        _ => cfg.model.convlstm_lcb,
    }
}

pub fn new_unet(cfg: &ExperimentConfig, stage: Stage, frozen: bool) -> Result<UNet> {
    let ucfg = match stage.canonical() {
        Stage::Interpolator => cfg.model.interpolator,
        Stage::Forecastor => cfg.model.forecastor,
        s => bail!("{} is not a U-Net stage", s.name()),
    };
    let seed = init_seed(cfg, stage);
    Ok(if frozen {
        UNet::new_frozen(ucfg, seed, DType::F32)?
    } else {
        UNet::new(ucfg, seed, DType::F32)?
    })
}

fn restore(cfg: &ExperimentConfig, stage: Stage, store: &nowcast_core::networks::ParamStore) -> Result<usize> {
    let path = checkpoint_path(cfg, stage);
    if !path.exists() {
        bail!(
            "missing {} checkpoint at {}; run `nowcast train --stage {}` first",
            stage.name(),
            path.display(),
            stage.name().replace('_', "-")
        );
    }
    let meta = restore_checkpoint(&path, store, stage.canonical().name(), &cfg.model_hash(), &cfg.spec().fingerprint())
        .with_context(|| format!("loading {}", path.display()))?;
    Ok(meta.epoch)
}

/// A trained U-Net stage with parameters frozen.
pub fn load_unet(cfg: &ExperimentConfig, stage: Stage) -> Result<UNet> {
    let net = new_unet(cfg, stage, true)?;
    restore(cfg, stage, net.store())?;
    Ok(net)
}

pub fn load_convlstm(cfg: &ExperimentConfig, stage: Stage) -> Result<ConvLstm> {
    let net = ConvLstm::new(convlstm_config(cfg, stage), init_seed(cfg, stage), DType::F32)?;
    restore(cfg, stage, net.store())?;
    Ok(net)
}

/// Restores a trainable model for resumption; returns the epochs already done.
pub fn resume_into(cfg: &ExperimentConfig, stage: Stage, store: &nowcast_core::networks::ParamStore) -> Result<usize> {
    restore(cfg, stage, store)
}
