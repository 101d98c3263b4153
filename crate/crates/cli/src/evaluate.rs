//! `evaluate`: forecasts on the test split, scored per lead time.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use candle_core::{Device, Tensor};
use chrono::{DateTime, Utc};
use ndarray::{s, Array6, Axis};
use ndarray_npy::WriteNpyExt;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use nowcast_core::baselines::{convlstm_rollout, persistence_forecast, BaselineTag};
use nowcast_core::data::{FrameSource, RainSequence};
use nowcast_core::dyffusion::{lead_times, rollout_with_seeds, DyffusionState};
use nowcast_core::metrics::{render_csv, Evaluator, MetricReport};

use crate::config::ExperimentConfig;
use crate::models::{self, ModelTag, Stage};
use crate::run::{write_atomic, RunLock, RunManifest};
use crate::train::load_splits;

/// Describes a saved forecast array so `plot` can align it with the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastManifest {
    pub model: String,
    /// `[N, X, h, C, H, W]`.
    pub shape: Vec<usize>,
    pub lead_times_minutes: Vec<i64>,
    /// Start time of each scored test sequence, in array order.
    pub start_times: Vec<DateTime<Utc>>,
    pub probabilistic: bool,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub reports: Vec<MetricReport>,
    pub table: PathBuf,
    pub report_paths: Vec<PathBuf>,
    pub forecast_paths: Vec<PathBuf>,
}

pub fn eval_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.dir.join("eval")
}

pub fn forecast_paths(cfg: &ExperimentConfig, label: &str) -> (PathBuf, PathBuf) {
    let dir = eval_dir(cfg).join("forecasts");
    (dir.join(format!("{label}.npy")), dir.join(format!("{label}.json")))
}

/// Member seeds of test sample `index`; fixed by the run seed.
pub fn member_seeds(cfg: &ExperimentConfig, index: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x00e7_a15e_ed00);
    rng.set_stream(index as u64);
    (0..cfg.eval.members).map(|_| rng.next_u64()).collect()
}

fn available(cfg: &ExperimentConfig) -> Vec<ModelTag> {
    ModelTag::ALL
        .into_iter()
        .filter(|m| match m {
            ModelTag::Dyffusion => models::checkpoint_path(cfg, Stage::Forecastor).exists(),
            ModelTag::ConvlstmLcb => models::checkpoint_path(cfg, Stage::ConvlstmLcb).exists(),
            ModelTag::ConvlstmBce => models::checkpoint_path(cfg, Stage::ConvlstmBce).exists(),
            ModelTag::Persistence => true,
        })
        .collect()
}

fn x0_tensor(s: &RainSequence) -> Result<Tensor> {
    let x0 = s.lead(0);
    let (c, h, w) = x0.dim();
    Ok(Tensor::from_iter(x0.iter().copied(), &Device::Cpu)?.reshape((1, c, h, w))?)
}

/// Produces `(X, h, C, H, W)` forecasts for every sample, returning them with the
/// total generation time in seconds.
fn generate(cfg: &ExperimentConfig, tag: ModelTag, samples: &[RainSequence]) -> Result<(Array6<f32>, f64)> {
    let h = cfg.data.horizon;
    let (c, hh, ww) = samples[0].spatial_dims();
    let x = if tag == ModelTag::Dyffusion { cfg.eval.members } else { 1 };
    let mut out = Array6::<f32>::zeros((samples.len(), x, h, c, hh, ww));
    let mut seconds = 0.0;
    match tag {
        ModelTag::Dyffusion => {
            let interp = models::load_unet(cfg, Stage::Interpolator)?;
            let fc = models::load_unet(cfg, Stage::Forecastor)?;
            let state = DyffusionState::new(&interp, &fc, h)?;
            for (i, s) in samples.iter().enumerate() {
                let x0 = x0_tensor(s)?;
                let t = Instant::now();
                let f = rollout_with_seeds(&x0, &state, &member_seeds(cfg, i))?;
                seconds += t.elapsed().as_secs_f64();
                out.slice_mut(s![i, .., .., .., .., ..]).assign(&f.members);
            }
        }
        ModelTag::ConvlstmLcb | ModelTag::ConvlstmBce => {
            let (stage, btag) = if tag == ModelTag::ConvlstmLcb {
                (Stage::ConvlstmLcb, BaselineTag::ConvlstmLcb)
            } else {
                (Stage::ConvlstmBce, BaselineTag::ConvlstmBce)
            };
            let net = models::load_convlstm(cfg, stage)?;
            let ctx = net.config().context_frames;
            for (i, s) in samples.iter().enumerate() {
                let context = s.context(ctx)?;
                let t = Instant::now();
                let f = convlstm_rollout(&net, context, h, btag, None)?;
                seconds += t.elapsed().as_secs_f64();
                out.slice_mut(s![i, 0, .., .., .., ..]).assign(&f.frames);
            }
        }
        ModelTag::Persistence => {
            for (i, s) in samples.iter().enumerate() {
                let t = Instant::now();
                let f = persistence_forecast(s.lead(0), h)?;
                seconds += t.elapsed().as_secs_f64();
                out.slice_mut(s![i, 0, .., .., .., ..]).assign(&f.frames);
            }
        }
    }
    Ok((out, seconds))
}

fn write_npy(path: &Path, a: &Array6<f32>) -> Result<()> {
    std::fs::create_dir_all(path.parent().expect("file lives in a directory"))?;
    let tmp = path.with_extension("partial");
    let mut w = BufWriter::new(File::create(&tmp)?);
    a.write_npy(&mut w).map_err(|e| anyhow::anyhow!("writing {}: {e}", path.display()))?;
    drop(w);
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn evaluate(cfg: &ExperimentConfig, requested: Option<&[ModelTag]>) -> Result<EvalOutcome> {
    let _lock = RunLock::acquire(&cfg.output.dir)?;
    let started = Instant::now();
    let tags: Vec<ModelTag> = match requested {
        Some(t) if !t.is_empty() => t.to_vec(),
        _ => available(cfg),
    };
    let [_, _, mut test] = load_splits(cfg)?;
    if let Some(n) = cfg.eval.max_samples {
        test.truncate(n);
    }
    if test.is_empty() {
        bail!("the test split is empty");
    }
    let perceptual = models::perceptual(cfg)?;
    let spec = cfg.spec();
    let mut reports = Vec::new();
    let mut report_paths = Vec::new();
    let mut forecast_files = Vec::new();
    let mut manifest = RunManifest::new("evaluate", None, cfg.model_hash(), cfg.seed);
    for tag in tags {
        let label = tag.label(cfg);
        let (forecasts, seconds) =
            generate(cfg, tag, &test).with_context(|| format!("generating {label} forecasts"))?;
        let mut eval = Evaluator::new(label.clone(), cfg.eval.metrics.clone(), &spec, Some(&perceptual))?;
        for (f, s) in forecasts.outer_iter().zip(&test) {
            if tag == ModelTag::Dyffusion {
                eval.add_ensemble(f, s.targets())?;
            } else {
                eval.add_deterministic(f.index_axis(Axis(0), 0), s.targets())?;
            }
        }
        let per_forecast = seconds / test.len() as f64;
        let report = eval.finish(cfg.eval.record_wall_time.then_some(per_forecast))?;
        manifest.timings.insert(format!("{label}_seconds_per_forecast"), per_forecast);

        let json = eval_dir(cfg).join(format!("{label}.json"));
        write_atomic(&json, report.to_json()?.as_bytes())?;
        let (npy, side) = forecast_paths(cfg, &label);
        write_npy(&npy, &forecasts)?;
        let fm = ForecastManifest {
            model: label.clone(),
            shape: forecasts.shape().to_vec(),
            lead_times_minutes: lead_times(cfg.data.horizon),
            start_times: test.iter().map(|s| s.start_time).collect(),
            probabilistic: report.probabilistic,
        };
        write_atomic(&side, &serde_json::to_vec_pretty(&fm)?)?;
        report_paths.push(json);
        forecast_files.push(npy);
        reports.push(report);
    }
    let table = eval_dir(cfg).join("table.csv");
    write_atomic(&table, render_csv(&reports)?.as_bytes())?;

    manifest.reports = report_paths.iter().cloned().chain([table.clone()]).collect();
    manifest.outputs = forecast_files.clone();
    manifest.timings.insert("evaluate".into(), started.elapsed().as_secs_f64());
    manifest.write(&cfg.output.dir)?;
    Ok(EvalOutcome {
        reports,
        table,
        report_paths,
        forecast_paths: forecast_files,
    })
}
