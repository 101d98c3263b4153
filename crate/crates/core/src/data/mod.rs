//! Ingestion, preprocessing, windowing and synthetic data.

mod field;
mod granule;
mod normalize;
mod sequence;
mod store;
mod synth;

pub use field::{crop_boxes, BoundingBox, GridBox, GridGeometry, RainField, DEFAULT_BOX_SIZE};
pub use granule::{read_granule, write_granule, GranuleLayout};
pub use normalize::{NormalizationSpec, UNIT_RANGE_TOLERANCE};
pub use sequence::{
    cadence, count_gaps, window_sequences, FrameSource, RainSequence, CADENCE_MINUTES,
    DEFAULT_HORIZON,
};
pub use store::{
    chronological_split, read_dataset, read_sidecar, sidecar_path, write_dataset, DatasetSidecar,
};
pub use synth::{synth_advection, SyntheticConfig};
