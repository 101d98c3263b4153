use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::NormalizationSpec;
use crate::{Error, Result};

/// Piecewise-constant rainfall weights. A rate on a band edge belongs to the lower band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeightTable {
    /// Band edges in mm/h, strictly ascending.
    pub thresholds: Vec<f64>,
    /// One weight per band, `thresholds.len() + 1` entries.
    pub weights: Vec<f64>,
}

impl Default for ClassWeightTable {
    fn default() -> Self {
        Self {
            thresholds: vec![0.5, 2.0, 6.0, 10.0, 18.0, 30.0],
            weights: vec![1.0, 2.0, 5.0, 10.0, 20.0, 30.0, 50.0],
        }
    }
}

impl ClassWeightTable {
    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.thresholds.len() + 1 {
            return Err(Error::config("class weights need exactly one more entry than thresholds"));
        }
        if self.thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("class thresholds must be strictly ascending"));
        }
        if self.weights.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("class weights must be strictly increasing"));
        }
        Ok(())
    }

    /// Index of the band containing `rate`.
    pub fn band(&self, rate: f64) -> Result<usize> {
        if rate.is_nan() {
            return Err(Error::NonFinite { index: 0, value: rate });
        }
        if rate < 0.0 {
            return Err(Error::NegativeRate(rate));
        }
        Ok(self.thresholds.partition_point(|&edge| edge < rate))
    }

    /// Weight for a rain rate in mm/h.
    pub fn weight(&self, rate: f64) -> Result<f64> {
        Ok(self.weights[self.band(rate)?])
    }

    /// Per-pixel weights for a normalized target, same shape and dtype. Weights are
    /// constants: they carry no gradient.
    pub fn weights_for_target(&self, target: &Tensor, spec: &NormalizationSpec) -> Result<Tensor> {
        let values: Vec<f64> = target.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1()?;
        let mut out = Vec::with_capacity(values.len());
        for y in values {
            // targets produced by sampling may sit a hair outside [0, 1]
            let rate = spec.inverse_value(y.clamp(0.0, 1.0))?;
            out.push(self.weight(rate)?);
        }
        Ok(Tensor::from_vec(out, target.shape(), target.device())?.to_dtype(target.dtype())?)
    }
}

pub fn class_weight(rate: f64, table: &ClassWeightTable) -> Result<f64> {
    table.weight(rate)
}
