//! `train`: one stage per invocation, epoch-seeded so resumption replays the same
//! batches and dropout masks.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nowcast_core::baselines::train_convlstm_step;
use nowcast_core::data::{chronological_split, read_dataset, RainSequence};
use nowcast_core::dyffusion::{train_forecastor_step, train_interpolator_step};
use nowcast_core::networks::{save_checkpoint, CheckpointMeta, ConvLstm, ParamStore};

use crate::config::ExperimentConfig;
use crate::models::{self, Stage};
use crate::run::{RunLock, RunManifest};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Mean loss of each epoch run by this invocation.
    pub losses: Vec<f64>,
    /// Total epochs completed, including earlier runs when resuming.
    pub epochs_done: usize,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

/// Loads the dataset and returns the chronological splits.
pub fn load_splits(cfg: &ExperimentConfig) -> Result<[Vec<RainSequence>; 3]> {
    let path = cfg.dataset_path();
    let (sequences, sidecar) = read_dataset(&path)
        .with_context(|| format!("loading {}; run `nowcast synth` or `nowcast ingest` first", path.display()))?;
    if sidecar.spec_fingerprint != cfg.spec().fingerprint() {
        bail!(
            "dataset {} was normalized with {} but the config implies {}",
            path.display(),
            sidecar.spec_fingerprint,
            cfg.spec().fingerprint()
        );
    }
    if sidecar.horizon != cfg.data.horizon || sidecar.history != cfg.data.history {
        bail!(
            "dataset has horizon {} and history {}, config asks for {} and {}",
            sidecar.horizon,
            sidecar.history,
            cfg.data.horizon,
            cfg.data.history
        );
    }
    Ok(chronological_split(sequences, cfg.data.split)?)
}

/// RNG for one epoch of one stage.
fn epoch_rng(cfg: &ExperimentConfig, stage: Stage, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(models::init_seed(cfg, stage));
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn loss_log_path(cfg: &ExperimentConfig, stage: Stage) -> PathBuf {
    cfg.output.dir.join("logs").join(format!("{}_loss.csv", stage.name()))
}

/// Keeps the header and the rows for epochs before `keep`.
fn prepare_log(path: &Path, keep: usize) -> Result<std::fs::File> {
    std::fs::create_dir_all(path.parent().expect("log lives in a directory"))?;
    let mut text = String::from("epoch,loss\n");
    if keep > 0 {
        if let Ok(old) = std::fs::read_to_string(path) {
            for line in old.lines().skip(1) {
                let epoch: Option<usize> = line.split(',').next().and_then(|e| e.parse().ok());
                if epoch.is_some_and(|e| e < keep) {
                    text.push_str(line);
                    text.push('\n');
                }
            }
        }
    }
    std::fs::write(path, text)?;
    Ok(std::fs::OpenOptions::new().append(true).open(path)?)
}

enum Trainee {
    Interpolator(nowcast_core::networks::UNet),
    Forecastor {
        interp: nowcast_core::networks::UNet,
        net: nowcast_core::networks::UNet,
    },
    Convlstm(ConvLstm),
}

impl Trainee {
    fn store(&self) -> &ParamStore {
        match self {
            Trainee::Interpolator(n) => n.store(),
            Trainee::Forecastor { net, .. } => net.store(),
            Trainee::Convlstm(n) => n.store(),
        }
    }
}

pub fn train(cfg: &ExperimentConfig, stage: Stage, resume: bool) -> Result<TrainOutcome> {
    let stage = stage.canonical();
    let _lock = RunLock::acquire(&cfg.output.dir)?;
    let started = Instant::now();
    let [train_set, _, _] = load_splits(cfg)?;
    if train_set.is_empty() {
        bail!("the training split is empty");
    }
    let objective = models::objective(cfg, stage)?;
    let trainee = match stage {
        Stage::Interpolator => Trainee::Interpolator(models::new_unet(cfg, stage, false)?),
        Stage::Forecastor => Trainee::Forecastor {
            interp: models::load_unet(cfg, Stage::Interpolator)?,
            net: models::new_unet(cfg, stage, false)?,
        },
        _ => Trainee::Convlstm(ConvLstm::new(
            models::convlstm_config(cfg, stage),
            models::init_seed(cfg, stage),
            candle_core::DType::F32,
        )?),
    };
    let epochs = match stage {
        Stage::Interpolator => cfg.train.epochs.interpolator,
        Stage::Forecastor => cfg.train.epochs.forecastor,
        _ => cfg.train.epochs.convlstm,
    };
    let start = if resume {
        models::resume_into(cfg, stage, trainee.store())?
    } else {
        0
    };
    let ckpt = models::checkpoint_path(cfg, stage);
    let log_path = loss_log_path(cfg, stage);
    let mut log = prepare_log(&log_path, start)?;
    // optimizer moments start fresh on resume
    let mut opt = AdamW::new(
        trainee.store().vars(),
        ParamsAdamW {
            lr: cfg.train.learning_rate,
            weight_decay: cfg.train.weight_decay,
            ..Default::default()
        },
    )?;
    let meta = |epoch: usize| CheckpointMeta {
        kind: stage.name().into(),
        config: cfg.to_json(),
        config_hash: cfg.model_hash(),
        spec_fingerprint: cfg.spec().fingerprint(),
        epoch,
    };

    let mut losses = Vec::new();
    for epoch in start..epochs {
        let mut rng = epoch_rng(cfg, stage, epoch);
        let mut order: Vec<&RainSequence> = train_set.iter().collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let batches = order.chunks(cfg.train.batch_size);
        let n_batches = batches.len();
        for batch in batches {
            total += match &trainee {
                Trainee::Interpolator(net) => train_interpolator_step(net, &mut opt, batch, &objective, &mut rng)?,
                Trainee::Forecastor { interp, net } => train_forecastor_step(
                    interp,
                    net,
                    &mut opt,
                    batch,
                    &objective,
                    &cfg.loss.composite,
                    epoch,
                    &mut rng,
                )?,
                Trainee::Convlstm(net) => train_convlstm_step(net, &mut opt, batch, &objective, &mut rng)?,
            };
        }
        let mean = total / n_batches as f64;
        if !mean.is_finite() {
            bail!("{} loss diverged at epoch {epoch}", stage.name());
        }
        writeln!(log, "{epoch},{mean}")?;
        log.flush()?;
        losses.push(mean);
        let done = epoch + 1;
        if done % cfg.train.checkpoint_every == 0 || done == epochs {
            save_checkpoint(&ckpt, trainee.store(), &meta(done))?;
        }
    }
    if start >= epochs && !ckpt.exists() {
        save_checkpoint(&ckpt, trainee.store(), &meta(start))?;
    }

    let mut m = RunManifest::new("train", Some(stage.name()), cfg.model_hash(), cfg.seed);
    m.checkpoints.push(ckpt.clone());
    m.outputs.push(log_path.clone());
    m.timings.insert("train".into(), started.elapsed().as_secs_f64());
    m.write(&cfg.output.dir)?;
    Ok(TrainOutcome {
        losses,
        epochs_done: epochs.max(start),
        checkpoint: ckpt,
        loss_log: log_path,
    })
}
