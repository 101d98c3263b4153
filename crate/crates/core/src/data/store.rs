//! On-disk dataset container: one `.npy` array `(N, S, C, H, W)` plus a JSON sidecar.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use ndarray::{s, Array5, Axis};
use ndarray_npy::{ReadNpyExt, WriteNpyExt};
use serde::{Deserialize, Serialize};

use super::{NormalizationSpec, RainSequence, CADENCE_MINUTES};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub spec: NormalizationSpec,
    pub spec_fingerprint: String,
    pub history: usize,
    pub horizon: usize,
    pub cadence_minutes: i64,
    /// `[N, S, C, H, W]`.
    pub shape: Vec<usize>,
    pub start_times: Vec<DateTime<Utc>>,
    /// Free-form provenance, e.g. `synthetic` or the granule directory.
    pub source: String,
}

pub fn sidecar_path(array_path: &Path) -> PathBuf {
    array_path.with_extension("json")
}

pub fn write_dataset(path: &Path, sequences: &[RainSequence], source: &str) -> Result<DatasetSidecar> {
    let first = sequences
        .first()
        .ok_or(Error::InsufficientFrames { needed: 1, available: 0 })?;
    let (s_len, c, h, w) = first.frames.dim();
    let mut stack = Array5::<f32>::zeros((sequences.len(), s_len, c, h, w));
    for (i, seq) in sequences.iter().enumerate() {
        if seq.frames.dim() != (s_len, c, h, w) || seq.history != first.history || seq.spec != first.spec {
            return Err(Error::ShapeMismatch {
                expected: vec![s_len, c, h, w],
                actual: seq.frames.shape().to_vec(),
            });
        }
        stack.slice_mut(s![i, .., .., .., ..]).assign(&seq.frames);
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    stack
        .write_npy(&mut writer)
        .map_err(|e| Error::Npy(e.to_string()))?;
    writer.flush().map_err(|e| Error::io(path, e))?;

    let sidecar = DatasetSidecar {
        spec: first.spec,
        spec_fingerprint: first.spec.fingerprint(),
        history: first.history,
        horizon: s_len - 1 - first.history,
        cadence_minutes: CADENCE_MINUTES,
        shape: stack.shape().to_vec(),
        start_times: sequences.iter().map(|s| s.start_time).collect(),
        source: source.to_string(),
    };
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))?;
    Ok(sidecar)
}

pub fn read_sidecar(path: &Path) -> Result<DatasetSidecar> {
    let side = sidecar_path(path);
    let bytes = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn read_dataset(path: &Path) -> Result<(Vec<RainSequence>, DatasetSidecar)> {
    let sidecar = read_sidecar(path)?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let stack = Array5::<f32>::read_npy(BufReader::new(file)).map_err(|e| Error::Npy(e.to_string()))?;
    if stack.shape() != sidecar.shape.as_slice() || sidecar.start_times.len() != stack.len_of(Axis(0)) {
        return Err(Error::ShapeMismatch {
            expected: sidecar.shape.clone(),
            actual: stack.shape().to_vec(),
        });
    }
    let sequences = stack
        .outer_iter()
        .zip(&sidecar.start_times)
        .map(|(frames, &start)| RainSequence::new(frames.to_owned(), start, sidecar.spec, sidecar.history))
        .collect::<Result<Vec<_>>>()?;
    Ok((sequences, sidecar))
}

/// Chronological train/val/test split by sequence start time.
pub fn chronological_split(
    mut sequences: Vec<RainSequence>,
    fractions: (f64, f64, f64),
) -> Result<[Vec<RainSequence>; 3]> {
    let (a, b, c) = fractions;
    if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::config("split fractions must be non-negative and sum to 1"));
    }
    sequences.sort_by_key(|s| s.start_time);
    let n = sequences.len();
    let n_train = (a * n as f64).round() as usize;
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);
    let test = sequences.split_off(n_train + n_val);
    let val = sequences.split_off(n_train);
    Ok([sequences, val, test])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_advection, SyntheticConfig};

    #[test]
    fn write_then_read_preserves_sequences() {
        let seqs = synth_advection(&SyntheticConfig {
            n_sequences: 3,
            height: 8,
            width: 8,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data/synth.npy");
        let side = write_dataset(&path, &seqs, "synthetic").unwrap();
        assert_eq!(side.shape, vec![3, 12, 1, 8, 8]);
        let (back, side2) = read_dataset(&path).unwrap();
        assert_eq!(back, seqs);
        assert_eq!(side, side2);
    }

    #[test]
    fn split_is_chronological() {
        let seqs = synth_advection(&SyntheticConfig {
            n_sequences: 10,
            height: 4,
            width: 4,
            ..Default::default()
        })
        .unwrap();
        let mut shuffled = seqs.clone();
        shuffled.reverse();
        let [train, val, test] = chronological_split(shuffled, (0.8, 0.1, 0.1)).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (8, 1, 1));
        assert!(train.last().unwrap().start_time < val[0].start_time);
        assert!(val[0].start_time < test[0].start_time);
        assert!(chronological_split(seqs, (0.5, 0.1, 0.1)).is_err());
    }
}
