//! `ingest` and `synth`: produce the dataset container.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};

use nowcast_core::data::{
    count_gaps, crop_boxes, read_granule, synth_advection, window_sequences, write_dataset, RainField,
    RainSequence,
};

use crate::config::ExperimentConfig;
use crate::run::{RunLock, RunManifest};

#[derive(Debug, Clone, PartialEq)]
pub struct IngestSummary {
    pub granules: usize,
    pub gaps: usize,
    pub sequences: usize,
    pub dataset: PathBuf,
}

fn granule_paths(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let dir = cfg.granule_dir();
    let entries = std::fs::read_dir(&dir).with_context(|| format!("reading granule directory {}", dir.display()))?;
    let mut paths = Vec::new();
    for e in entries {
        let p = e?.path();
        let ext = p.extension().and_then(|s| s.to_str()).unwrap_or("");
        if p.is_file() && cfg.data.granule_extensions.iter().any(|x| x == ext) {
            paths.push(p);
        }
    }
    if paths.is_empty() {
        bail!("no granules found in {}", dir.display());
    }
    Ok(paths)
}

/// Reads every granule, crops the configured boxes and windows each box's time
/// series into sequences. Windows spanning a gap are dropped.
pub fn ingest(cfg: &ExperimentConfig) -> Result<IngestSummary> {
    let _lock = RunLock::acquire(&cfg.data.root)?;
    let started = std::time::Instant::now();
    let mut fields: Vec<RainField> = granule_paths(cfg)?
        .iter()
        .map(|p| read_granule(p, &cfg.data.layout).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<_>>()?;
    fields.sort_by_key(|f| f.timestamp);
    if let Some(w) = fields.windows(2).find(|w| w[0].timestamp == w[1].timestamp) {
        bail!("two granules share the timestamp {}", w[0].timestamp);
    }
    let gaps = count_gaps(&fields);
    let full_frame;
    let boxes = if cfg.data.boxes.is_empty() {
        let (h, w) = fields[0].values.dim();
        if h != w {
            bail!("data.boxes is empty and the {h}x{w} grid is not square; configure crop boxes");
        }
        full_frame = [nowcast_core::data::GridBox::with_size(0, 0, h)];
        &full_frame[..]
    } else {
        &cfg.data.boxes[..]
    };

    let spec = cfg.spec();
    let mut per_box: Vec<Vec<RainField>> = vec![Vec::with_capacity(fields.len()); boxes.len()];
    for f in &fields {
        for (slot, crop) in per_box.iter_mut().zip(crop_boxes(f, boxes)?) {
            slot.push(crop);
        }
    }
    let mut sequences: Vec<RainSequence> = Vec::new();
    for series in &per_box {
        match window_sequences(series, cfg.data.horizon, cfg.data.stride, cfg.data.history, &spec) {
            Ok(s) => sequences.extend(s),
            Err(nowcast_core::Error::InsufficientFrames { .. }) => {}
            Err(e) => return Err(e.into()),
        }
    }
    if sequences.is_empty() {
        bail!(
            "no gap-free window of {} frames among {} granules ({gaps} gaps)",
            cfg.data.history + 1 + cfg.data.horizon,
            fields.len()
        );
    }
    // box-major then time order; the split later sorts by time, stably
    let dataset = cfg.dataset_path();
    write_dataset(&dataset, &sequences, &cfg.granule_dir().display().to_string())?;

    let mut m = RunManifest::new("ingest", None, cfg.model_hash(), cfg.seed);
    m.outputs.push(dataset.clone());
    m.timings.insert("ingest".into(), started.elapsed().as_secs_f64());
    m.write(&cfg.data.root)?;
    Ok(IngestSummary {
        granules: fields.len(),
        gaps,
        sequences: sequences.len(),
        dataset,
    })
}

pub fn synth(cfg: &ExperimentConfig) -> Result<(usize, PathBuf)> {
    let _lock = RunLock::acquire(&cfg.data.root)?;
    let started = std::time::Instant::now();
    let sequences = synth_advection(&cfg.synthetic())?;
    let dataset = cfg.dataset_path();
    write_dataset(&dataset, &sequences, "synthetic")?;
    let mut m = RunManifest::new("synth", None, cfg.model_hash(), cfg.seed);
    m.outputs.push(dataset.clone());
    m.timings.insert("synth".into(), started.elapsed().as_secs_f64());
    m.write(&cfg.data.root)?;
    Ok((sequences.len(), dataset))
}
