//! Feature-space perceptual distance with a pluggable extractor.
//!
//! Each extractor stage yields a feature map; features are unit-normalized across
//! channels per pixel, squared differences are summed over channels, averaged over
//! space, then averaged over stages.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::conv::conv2d;
use crate::{Error, Result};

/// Seed of the default desk-scale extractor.
pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x5eed_1915;
pub const DEFAULT_WIDTHS: [usize; 3] = [16, 32, 64];
const NORM_EPS: f64 = 1e-10;

pub trait FeatureExtractor: Send + Sync {
    /// Channel count the extractor expects; single-channel inputs are replicated.
    fn in_channels(&self) -> usize;

    /// Feature maps, one per stage, each `(B, C_l, H_l, W_l)`.
    fn features(&self, x: &Tensor) -> candle_core::Result<Vec<Tensor>>;
}

#[derive(Debug, Clone)]
struct Stage {
    weight: Tensor,
    bias: Tensor,
    weight_f32: Tensor,
    bias_f32: Tensor,
}

/// Stack of stride-2 3x3 convolutions with ReLU. Parameters are frozen after
/// construction.
#[derive(Debug, Clone)]
pub struct ConvFeatureExtractor {
    in_channels: usize,
    stages: Vec<Stage>,
}

impl ConvFeatureExtractor {
    /// Deterministic random extractor (He-normal weights, zero bias).
    pub fn seeded(seed: u64, in_channels: usize, widths: &[usize]) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = in_channels;
        let mut params = Vec::new();
        for &c_out in widths {
            let fan_in = (c_in * 9) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let w: Vec<f64> = (0..c_out * c_in * 9).map(|_| normal.sample(&mut rng)).collect();
            let weight = Tensor::from_vec(w, (c_out, c_in, 3, 3), &Device::Cpu)?;
            let bias = Tensor::zeros(c_out, DType::F64, &Device::Cpu)?;
            params.push((weight, bias));
            c_in = c_out;
        }
        Self::from_parameters(in_channels, params)
    }

    pub fn default_desk() -> Self {
        Self::seeded(DEFAULT_EXTRACTOR_SEED, 3, &DEFAULT_WIDTHS).expect("valid default extractor")
    }

    fn from_parameters(in_channels: usize, params: Vec<(Tensor, Tensor)>) -> Result<Self> {
        let mut c_in = in_channels;
        let mut stages = Vec::with_capacity(params.len());
        for (weight, bias) in params {
            let (c_out, ci, kh, kw) = weight.dims4()?;
            if ci != c_in || kh != 3 || kw != 3 || bias.dims() != [c_out] {
                return Err(Error::ShapeMismatch {
                    expected: vec![c_out, c_in, 3, 3],
                    actual: weight.dims().to_vec(),
                });
            }
            let weight = weight.to_dtype(DType::F64)?;
            let bias = bias.to_dtype(DType::F64)?;
            stages.push(Stage {
                weight_f32: weight.to_dtype(DType::F32)?,
                bias_f32: bias.to_dtype(DType::F32)?,
                weight,
                bias,
            });
            c_in = c_out;
        }
        if stages.is_empty() {
            return Err(Error::config("feature extractor needs at least one stage"));
        }
        Ok(Self { in_channels, stages })
    }

    /// Loads `stage{i}.weight` / `stage{i}.bias` tensors, e.g. converted pretrained
    /// weights with the same stage structure.
    pub fn from_safetensors(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let tensors = candle_core::safetensors::load(path, &Device::Cpu)?;
        let mut params = Vec::new();
        for i in 0.. {
            match (tensors.get(&format!("stage{i}.weight")), tensors.get(&format!("stage{i}.bias"))) {
                (Some(w), Some(b)) => params.push((w.clone(), b.clone())),
                _ => break,
            }
        }
        let in_channels = params
            .first()
            .map(|(w, _)| w.dims()[1])
            .ok_or_else(|| Error::config(format!("no stage tensors in {}", path.display())))?;
        Self::from_parameters(in_channels, params)
    }

    pub fn save_safetensors(&self, path: &Path) -> Result<()> {
        let mut map = HashMap::new();
        for (i, s) in self.stages.iter().enumerate() {
            map.insert(format!("stage{i}.weight"), s.weight.clone());
            map.insert(format!("stage{i}.bias"), s.bias.clone());
        }
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// `(shape, weights, biases)` per stage, row-major, for independent reference
    /// implementations.
    pub fn stage_parameters(&self) -> Vec<([usize; 4], Vec<f64>, Vec<f64>)> {
        self.stages
            .iter()
            .map(|s| {
                let (a, b, c, d) = s.weight.dims4().expect("4-d weight");
                (
                    [a, b, c, d],
                    s.weight.flatten_all().and_then(|t| t.to_vec1()).expect("f64 weight"),
                    s.bias.to_vec1().expect("f64 bias"),
                )
            })
            .collect()
    }
}

impl FeatureExtractor for ConvFeatureExtractor {
    fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn features(&self, x: &Tensor) -> candle_core::Result<Vec<Tensor>> {
        let mut h = x.clone();
        let mut out = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let (w, b) = match x.dtype() {
                DType::F64 => (&s.weight, &s.bias),
                _ => (&s.weight_f32, &s.bias_f32),
            };
            h = conv2d(&h, w, 2, 1)?
                .broadcast_add(&b.reshape((1, b.dims()[0], 1, 1))?)?
                .relu()?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

/// Perceptual distance between single-channel fields in `[0, 1]`.
#[derive(Clone)]
pub struct PerceptualDistance {
    extractor: Arc<dyn FeatureExtractor>,
}

impl std::fmt::Debug for PerceptualDistance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PerceptualDistance")
            .field("in_channels", &self.extractor.in_channels())
            .finish()
    }
}

impl Default for PerceptualDistance {
    fn default() -> Self {
        Self::new(Arc::new(ConvFeatureExtractor::default_desk()))
    }
}

impl PerceptualDistance {
    pub fn new(extractor: Arc<dyn FeatureExtractor>) -> Self {
        Self { extractor }
    }

    fn prepare(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let want = self.extractor.in_channels();
        let x = match x.rank() {
            3 => x.unsqueeze(1)?,
            _ => x.clone(),
        };
        let (_, c, _, _) = x.dims4()?;
        let x = if c == 1 && want > 1 {
            x.repeat((1, want, 1, 1))?
        } else {
            x
        };
        // extractors expect inputs centred on zero
        x.affine(2.0, -1.0)
    }

    /// Distance per batch element, shape `(B,)`.
    pub fn per_sample(&self, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
        if pred.dims() != target.dims() {
            return Err(Error::ShapeMismatch {
                expected: target.dims().to_vec(),
                actual: pred.dims().to_vec(),
            });
        }
        let batch = pred.dims()[0];
        let both = Tensor::cat(&[self.prepare(pred)?, self.prepare(target)?], 0)?;
        let feats = self.extractor.features(&both)?;
        let mut total: Option<Tensor> = None;
        for f in &feats {
            let norm = f.sqr()?.sum_keepdim(1)?.affine(1.0, NORM_EPS)?.sqrt()?;
            let unit = f.broadcast_div(&norm)?;
            let a = unit.narrow(0, 0, batch)?;
            let b = unit.narrow(0, batch, batch)?;
            let d = (a - b)?.sqr()?.sum(1)?.mean(D::Minus1)?.mean(D::Minus1)?;
            total = Some(match total {
                None => d,
                Some(t) => (t + d)?,
            });
        }
        let total = total.expect("at least one stage");
        Ok((total / feats.len() as f64)?)
    }

    /// Batch-mean distance, a scalar tensor.
    pub fn distance(&self, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
        Ok(self.per_sample(pred, target)?.mean_all()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(seed: u64, n: usize) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..n * n).map(|_| rng.random::<f32>()).collect();
        Tensor::from_vec(v, (1, 1, n, n), &Device::Cpu).unwrap()
    }

    fn scalar(t: Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
    }

    #[test]
    fn identical_inputs_have_zero_distance() {
        let d = PerceptualDistance::default();
        let a = field(1, 32);
        assert_eq!(scalar(d.distance(&a, &a).unwrap()), 0.0);
    }

    #[test]
    fn symmetric_and_deterministic() {
        let a = field(1, 32);
        let b = field(2, 32);
        let d1 = PerceptualDistance::default();
        let d2 = PerceptualDistance::default();
        let ab = scalar(d1.distance(&a, &b).unwrap());
        assert_eq!(ab, scalar(d1.distance(&b, &a).unwrap()));
        assert_eq!(ab, scalar(d2.distance(&a, &b).unwrap()));
        assert!(ab > 0.0);
    }

    #[test]
    fn patch_perturbation_is_detected() {
        let a = Tensor::zeros((1, 1, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let patch = Tensor::ones((1, 1, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let b = a.slice_assign(&[0..1, 0..1, 24..40, 24..40], &patch).unwrap();
        let d = scalar(PerceptualDistance::default().distance(&a, &b).unwrap());
        assert!(d > 0.0, "{d}");
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let d = PerceptualDistance::default();
        assert!(d.distance(&field(1, 16), &field(1, 32)).is_err());
    }

    #[test]
    fn safetensors_round_trip() {
        let e = ConvFeatureExtractor::seeded(7, 3, &[4, 8]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ext.safetensors");
        e.save_safetensors(&path).unwrap();
        let back = ConvFeatureExtractor::from_safetensors(&path).unwrap();
        assert_eq!(e.stage_parameters(), back.stage_parameters());
    }
}
