//! Experiment configuration: built-in presets deep-merged with a user TOML file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use nowcast_core::data::{GranuleLayout, GridBox, NormalizationSpec, SyntheticConfig};
use nowcast_core::losses::{ClassWeightTable, CompositeLossConfig, LcbConfig, LossKind};
use nowcast_core::metrics::MetricConfig;
use nowcast_core::networks::{ConvLSTMConfig, UNetConfig};

/// Overrides the configured data root.
pub const DATA_ROOT_ENV: &str = "NOWCAST_DATA_ROOT";

const SYNTH_PRESET: &str = include_str!("../presets/synth.toml");
const FULL_PRESET: &str = include_str!("../presets/full.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Synth,
    Full,
}

impl Preset {
    fn source(self) -> &'static str {
        match self {
            Preset::Synth => SYNTH_PRESET,
            Preset::Full => FULL_PRESET,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding datasets and granules.
    pub root: PathBuf,
    /// Dataset container, relative to `root`.
    pub dataset: PathBuf,
    /// Granule directory for `ingest`, relative to `root`.
    pub granule_dir: PathBuf,
    /// File extensions treated as granules.
    pub granule_extensions: Vec<String>,
    pub layout: GranuleLayout,
    pub boxes: Vec<GridBox>,
    pub clip_max: f64,
    pub horizon: usize,
    /// Frames kept before x0; the ConvLSTM needs `context_frames - 1`.
    pub history: usize,
    pub stride: usize,
    /// Train, validation and test fractions.
    pub split: (f64, f64, f64),
    pub synthetic: SyntheticConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Objective for both DYffusion stages.
    pub objective: LossKind,
    pub lcb: LcbConfig,
    pub composite: CompositeLossConfig,
    pub class_weights: ClassWeightTable,
    /// Safetensors weights for the perceptual extractor; the seeded default when absent.
    pub perceptual_weights: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub interpolator: UNetConfig,
    pub forecastor: UNetConfig,
    pub convlstm_lcb: ConvLSTMConfig,
    pub convlstm_bce: ConvLSTMConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochConfig {
    pub interpolator: usize,
    pub forecastor: usize,
    pub convlstm: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: EpochConfig,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Write a checkpoint every this many epochs; the final epoch is always saved.
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub members: usize,
    pub metrics: MetricConfig,
    /// Score at most this many test sequences.
    pub max_samples: Option<usize>,
    /// Put forecast generation time into the reports. Timing is not reproducible,
    /// so reports are byte-identical across runs only with this off.
    pub record_wall_time: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl ExperimentConfig {
    /// Parses `user` over the preset. `base_dir` anchors relative paths.
    pub fn from_toml(
        preset: Preset,
        user: &str,
        base_dir: &Path,
        seed: Option<u64>,
        data_root: Option<PathBuf>,
    ) -> Result<Self> {
        let mut value: toml::Value = toml::from_str(preset.source()).context("parsing the built-in preset")?;
        let over: toml::Value = toml::from_str(user).context("parsing the config file")?;
        merge(&mut value, over);
        if let Some(s) = seed {
            let table = value.as_table_mut().expect("a TOML document is a table");
            let s = i64::try_from(s).context("seed must fit in a signed 64-bit integer")?;
            table.insert("seed".into(), toml::Value::Integer(s));
        }
        if value.get("seed").is_none() {
            bail!("a seed is required: set `seed` in the config or pass --seed");
        }
        let mut cfg: ExperimentConfig = value.try_into().context("invalid configuration")?;
        cfg.data.root = match data_root {
            Some(r) => r,
            None => resolve(base_dir, &cfg.data.root),
        };
        cfg.output.dir = resolve(base_dir, &cfg.output.dir);
        if let Some(w) = &cfg.loss.perceptual_weights {
            cfg.loss.perceptual_weights = Some(resolve(base_dir, w));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads the config file, honouring the data-root environment override.
    pub fn load(path: &Path, preset: Preset, seed: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let env_root = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from);
        Self::from_toml(preset, &text, base, seed, env_root)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.horizon < 2 {
            bail!("data.horizon must be at least 2");
        }
        if d.stride == 0 {
            bail!("data.stride must be positive");
        }
        if !(d.clip_max > 0.0) {
            bail!("data.clip_max must be positive");
        }
        self.spec().validate()?;
        let ctx = self.model.convlstm_lcb.context_frames.max(self.model.convlstm_bce.context_frames);
        if d.history + 1 < ctx {
            bail!("data.history must be at least {} for a {ctx}-frame ConvLSTM context", ctx - 1);
        }
        self.model.interpolator.validate()?;
        self.model.forecastor.validate()?;
        self.model.convlstm_lcb.validate()?;
        self.model.convlstm_bce.validate()?;
        self.loss.lcb.validate()?;
        self.loss.class_weights.validate()?;
        self.eval.metrics.validate()?;
        if self.train.batch_size == 0 || self.train.checkpoint_every == 0 {
            bail!("train.batch_size and train.checkpoint_every must be positive");
        }
        if !(self.train.learning_rate > 0.0) {
            bail!("train.learning_rate must be positive");
        }
        if self.eval.members == 0 {
            bail!("eval.members must be positive");
        }
        if let Some(w) = &self.loss.perceptual_weights {
            if !w.exists() {
                bail!("perceptual weights {} do not exist", w.display());
            }
        }
        Ok(())
    }

    pub fn spec(&self) -> NormalizationSpec {
        NormalizationSpec::analytic(self.data.clip_max)
    }

    pub fn dataset_path(&self) -> PathBuf {
        resolve(&self.data.root, &self.data.dataset)
    }

    pub fn granule_dir(&self) -> PathBuf {
        resolve(&self.data.root, &self.data.granule_dir)
    }

    /// The synthetic generator settings with the shared data fields applied.
    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            seed: self.data.synthetic.seed ^ self.seed,
            horizon: self.data.horizon,
            history: self.data.history,
            clip_max: self.data.clip_max,
            ..self.data.synthetic.clone()
        }
    }

    /// Hash of everything that determines model weights: seed, data, loss and
    /// model sections. Paths, training length and evaluation settings are left out,
    /// so stages can be extended or re-evaluated without invalidating checkpoints.
    pub fn model_hash(&self) -> String {
        let mut data = serde_json::to_value(&self.data).expect("config serializes");
        let obj = data.as_object_mut().expect("data is a table");
        for k in ["root", "dataset", "granule_dir", "granule_extensions", "layout"] {
            obj.remove(k);
        }
        let mut loss = serde_json::to_value(&self.loss).expect("config serializes");
        if let Some(w) = &self.loss.perceptual_weights {
            let bytes = std::fs::read(w).unwrap_or_default();
            loss["perceptual_weights"] = hex::encode(Sha256::digest(bytes)).into();
        }
        let doc = serde_json::json!({
            "seed": self.seed,
            "data": data,
            "loss": loss,
            "model": self.model,
        });
        hex::encode(Sha256::digest(doc.to_string().as_bytes()))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(user: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::from_toml(Preset::Synth, user, Path::new("/cfg"), None, None)
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(load("").is_err());
        assert_eq!(load("seed = 3").unwrap().seed, 3);
        let c = ExperimentConfig::from_toml(Preset::Synth, "", Path::new("/"), Some(9), None).unwrap();
        assert_eq!(c.seed, 9);
    }

    #[test]
    fn user_values_merge_over_preset() {
        let c = load("seed = 1\n[model.interpolator]\nbase_channels = 8\n").unwrap();
        let p = load("seed = 1").unwrap();
        assert_eq!(c.model.interpolator.base_channels, 8);
        assert_eq!(c.model.interpolator.depth, p.model.interpolator.depth);
        assert_ne!(c.model_hash(), p.model_hash());
    }

    #[test]
    fn paths_resolve_against_config_dir() {
        let c = load("seed = 1\n[data]\nroot = \"d\"\n").unwrap();
        assert_eq!(c.data.root, Path::new("/cfg/d"));
        let e = ExperimentConfig::from_toml(Preset::Synth, "seed = 1", Path::new("/cfg"), None, Some("/env".into()))
            .unwrap();
        assert_eq!(e.data.root, Path::new("/env"));
        assert_eq!(e.model_hash(), load("seed = 1").unwrap().model_hash());
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(load("seed = 1\n[train]\nbatchsize = 3\n").is_err());
        assert!(load("seed = 1\n[data]\nhorizon = 1\n").is_err());
        assert!(load("seed = 1\n[data]\nhistory = 1\n").is_err());
    }

    #[test]
    fn both_presets_parse() {
        for p in [Preset::Synth, Preset::Full] {
            ExperimentConfig::from_toml(p, "seed = 0", Path::new("/"), None, None).unwrap();
        }
    }

    #[test]
    fn training_length_does_not_change_hash() {
        let a = load("seed = 1").unwrap();
        let b = load("seed = 1\n[train.epochs]\ninterpolator = 99\n").unwrap();
        assert_eq!(a.model_hash(), b.model_hash());
    }
}
