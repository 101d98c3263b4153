use std::path::Path;

use chrono::{Duration, TimeZone, Utc};
use ndarray::Array2;

use nowcast_cli::config::{ExperimentConfig, Preset};
use nowcast_cli::models::{ModelTag, Stage};
use nowcast_cli::{data_cmd, evaluate, plot, train};
use nowcast_core::data::{write_granule, GranuleLayout, GridGeometry, RainField};

const TINY: &str = r#"
seed = 9

[data]
horizon = 4

[data.synthetic]
n_sequences = 20
height = 16
width = 16

[model.interpolator]
base_channels = 8
depth = 2
time_embedding_dim = 8

[model.forecastor]
base_channels = 8
depth = 2
time_embedding_dim = 8

[train]
batch_size = 4
checkpoint_every = 1

[train.epochs]
interpolator = 2
forecastor = 1

[eval]
members = 2
record_wall_time = false
"#;

fn config(dir: &Path, text: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml(Preset::Synth, text, dir, None, None).unwrap()
}

fn with_epochs(interp: usize) -> String {
    TINY.replace("interpolator = 2", &format!("interpolator = {interp}"))
}

#[test]
fn forecastor_needs_a_trained_interpolator() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    data_cmd::synth(&cfg).unwrap();
    let err = format!("{:#}", train::train(&cfg, Stage::Forecastor, false).unwrap_err());
    assert!(err.contains("nowcast train --stage interpolator"), "{err}");
}

#[test]
fn resume_continues_the_epoch_counter() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    data_cmd::synth(&cfg).unwrap();
    let first = train::train(&cfg, Stage::Interpolator, false).unwrap();
    assert_eq!(first.losses.len(), 2);
    assert_eq!(first.epochs_done, 2);

    let longer = config(dir.path(), &with_epochs(3));
    assert_eq!(longer.model_hash(), cfg.model_hash());
    let resumed = train::train(&longer, Stage::Interpolator, true).unwrap();
    assert_eq!(resumed.losses.len(), 1);
    assert_eq!(resumed.epochs_done, 3);
    let log = std::fs::read_to_string(&resumed.loss_log).unwrap();
    let rows: Vec<&str> = log.lines().collect();
    assert_eq!(rows[0], "epoch,loss");
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[1], format!("0,{}", first.losses[0]));
    assert!(rows[3].starts_with("2,"));

    // a changed architecture cannot resume from the old checkpoint
    let other = config(dir.path(), &TINY.replacen("base_channels = 8", "base_channels = 4", 1));
    assert!(train::train(&other, Stage::Interpolator, true).is_err());
}

#[test]
fn persistence_only_evaluation_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    data_cmd::synth(&cfg).unwrap();
    let out = evaluate::evaluate(&cfg, Some(&[ModelTag::Persistence])).unwrap();
    assert_eq!(out.reports.len(), 1);
    let table = std::fs::read_to_string(&out.table).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("persistence,"));

    let first = plot::plot(&cfg, 0).unwrap();
    let bytes: Vec<Vec<u8>> = first.iter().map(|p| std::fs::read(p).unwrap()).collect();
    let second = plot::plot(&cfg, 0).unwrap();
    for (p, b) in second.iter().zip(&bytes) {
        assert_eq!(&std::fs::read(p).unwrap(), b, "{} changed", p.display());
    }
    assert!(plot::plot(&cfg, 999).is_err());

    // the default model set is whatever has checkpoints, plus persistence
    let again = evaluate::evaluate(&cfg, None).unwrap();
    assert_eq!(again.reports.len(), 1);
    assert_eq!(std::fs::read_to_string(&again.table).unwrap(), table);
}

#[test]
fn runs_lock_their_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    data_cmd::synth(&cfg).unwrap();
    let _held = nowcast_cli::run::RunLock::acquire(&cfg.output.dir).unwrap();
    assert!(train::train(&cfg, Stage::Interpolator, false).is_err());
}

fn granules(dir: &Path, offsets: &[i64]) {
    let layout = GranuleLayout::default();
    let start = Utc.with_ymd_and_hms(2020, 6, 1, 0, 0, 0).unwrap();
    let geometry = GridGeometry {
        lat0: 10.0,
        lon0: 20.0,
        dlat: 0.1,
        dlon: 0.1,
    };
    std::fs::create_dir_all(dir).unwrap();
    for &k in offsets {
        let values = Array2::from_shape_fn((16, 16), |(i, j)| ((i + j) as f32 * 0.7 + k as f32) % 40.0);
        let field = RainField::new(values, start + Duration::minutes(30 * k), geometry).unwrap();
        write_granule(&dir.join(format!("g{k:03}.HDF5")), &field, &layout).unwrap();
    }
}

const INGEST: &str = r#"
seed = 1

[data]
history = 0

[model.convlstm_lcb]
context_frames = 1

[model.convlstm_bce]
context_frames = 1
"#;

#[test]
fn ingest_windows_contiguous_granules() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), INGEST);
    granules(&cfg.granule_dir(), &(0..9).collect::<Vec<_>>());
    let s = data_cmd::ingest(&cfg).unwrap();
    assert_eq!((s.granules, s.gaps, s.sequences), (9, 0, 1));

    let bytes = std::fs::read(&s.dataset).unwrap();
    data_cmd::ingest(&cfg).unwrap();
    assert_eq!(std::fs::read(&s.dataset).unwrap(), bytes);
}

#[test]
fn ingest_skips_windows_across_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), INGEST);
    // ten contiguous frames, a missing slot, then four more
    let offsets: Vec<i64> = (0..10).chain(11..15).collect();
    granules(&cfg.granule_dir(), &offsets);
    let s = data_cmd::ingest(&cfg).unwrap();
    assert_eq!(s.gaps, 1);
    assert_eq!(s.sequences, 2);
}

#[test]
fn ingest_without_a_full_window_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), INGEST);
    granules(&cfg.granule_dir(), &[0, 1, 2, 4, 5, 6, 7, 8, 9]);
    let err = format!("{:#}", data_cmd::ingest(&cfg).unwrap_err());
    assert!(err.contains("gap"), "{err}");
}
