use ndarray::{Array, ArrayBase, Data, Dimension};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Inputs to the inverse transform may drift this far outside `[0, 1]`
/// (float round-off from network outputs) before they are rejected.
pub const UNIT_RANGE_TOLERANCE: f64 = 1e-6;

/// Invertible preprocessing chain: clip to `[0, clip_max]`, `log(log_offset + x)`,
/// then min-max scaling into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    /// Upper clip in mm/h.
    pub clip_max: f64,
    pub log_offset: f64,
    pub minmax_lo: f64,
    pub minmax_hi: f64,
}

impl Default for NormalizationSpec {
    fn default() -> Self {
        Self::analytic(100.0)
    }
}

impl NormalizationSpec {
    /// Constants fixed from the clip value alone: `lo = 0`, `hi = ln(1 + clip_max)`.
    pub fn analytic(clip_max: f64) -> Self {
        Self {
            clip_max,
            log_offset: 1.0,
            minmax_lo: 0.0,
            minmax_hi: (1.0 + clip_max).ln(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.minmax_hi > self.minmax_lo) {
            return Err(Error::config(format!(
                "degenerate normalization: hi {} <= lo {}",
                self.minmax_hi, self.minmax_lo
            )));
        }
        if !(self.clip_max > 0.0) || !(self.log_offset > 0.0) {
            return Err(Error::config("clip_max and log_offset must be positive"));
        }
        Ok(())
    }

    /// Rain rate (mm/h) to model space.
    pub fn forward_value(&self, rate: f64) -> Result<f64> {
        if rate.is_nan() {
            return Err(Error::NonFinite { index: 0, value: rate });
        }
        if rate < 0.0 {
            return Err(Error::NegativeRate(rate));
        }
        let logged = (self.log_offset + rate.min(self.clip_max)).ln();
        let y = (logged - self.minmax_lo) / (self.minmax_hi - self.minmax_lo);
        Ok(y.clamp(0.0, 1.0))
    }

    /// Model space back to mm/h.
    pub fn inverse_value(&self, y: f64) -> Result<f64> {
        if !(-UNIT_RANGE_TOLERANCE..=1.0 + UNIT_RANGE_TOLERANCE).contains(&y) {
            return Err(Error::OutOfUnitRange { index: 0, value: y });
        }
        let rate = (y * (self.minmax_hi - self.minmax_lo) + self.minmax_lo).exp() - self.log_offset;
        Ok(rate.max(0.0))
    }

    /// Threshold in mm/h expressed in model space, without clamping.
    pub fn threshold_to_unit(&self, rate: f64) -> f64 {
        ((self.log_offset + rate.min(self.clip_max)).ln() - self.minmax_lo)
            / (self.minmax_hi - self.minmax_lo)
    }

    pub fn forward<S, D>(&self, x: &ArrayBase<S, D>) -> Result<Array<f32, D>>
    where
        S: Data<Elem = f32>,
        D: Dimension,
    {
        self.validate()?;
        let mut out = Array::zeros(x.raw_dim());
        for (i, (o, &v)) in out.iter_mut().zip(x.iter()).enumerate() {
            *o = self.forward_value(v as f64).map_err(|e| with_index(e, i))? as f32;
        }
        Ok(out)
    }

    pub fn inverse<S, D>(&self, y: &ArrayBase<S, D>) -> Result<Array<f32, D>>
    where
        S: Data<Elem = f32>,
        D: Dimension,
    {
        self.validate()?;
        let mut out = Array::zeros(y.raw_dim());
        for (i, (o, &v)) in out.iter_mut().zip(y.iter()).enumerate() {
            *o = self.inverse_value(v as f64).map_err(|e| with_index(e, i))? as f32;
        }
        Ok(out)
    }

    /// Short stable digest used to tie checkpoints to the dataset they were trained on.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for v in [self.clip_max, self.log_offset, self.minmax_lo, self.minmax_hi] {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(&hasher.finalize()[..8])
    }
}

fn with_index(e: Error, index: usize) -> Error {
    match e {
        Error::NonFinite { value, .. } => Error::NonFinite { index, value },
        Error::OutOfUnitRange { value, .. } => Error::OutOfUnitRange { index, value },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use proptest::prelude::*;

    #[test]
    fn zero_maps_to_zero() {
        let spec = NormalizationSpec::analytic(100.0);
        let y = spec.forward(&arr2(&[[0.0f32, 0.0], [0.0, 0.0]])).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clip_max_maps_to_one() {
        let spec = NormalizationSpec::analytic(100.0);
        assert_eq!(spec.forward_value(100.0).unwrap(), 1.0);
        assert_eq!(spec.forward_value(250.0).unwrap(), 1.0);
    }

    #[test]
    fn scalar_hand_values() {
        let spec = NormalizationSpec::analytic(100.0);
        let expected = 6f64.ln() / 101f64.ln();
        assert!((spec.forward_value(5.0).unwrap() - expected).abs() < 1e-15);
        // exp(0.5 ln 101) - 1 = sqrt(101) - 1
        let back = spec.inverse_value(0.5).unwrap();
        assert!((back - (101f64.sqrt() - 1.0)).abs() < 1e-12);
        assert!((back - 9.05).abs() < 5e-3);
        assert_eq!(spec.inverse_value(0.0).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let spec = NormalizationSpec::analytic(100.0);
        assert!(matches!(spec.forward_value(-0.1), Err(Error::NegativeRate(_))));
        assert!(matches!(spec.inverse_value(1.01), Err(Error::OutOfUnitRange { .. })));
        let degenerate = NormalizationSpec {
            minmax_hi: 0.0,
            ..spec
        };
        assert!(degenerate.forward(&arr2(&[[1.0f32]])).is_err());
    }

    #[test]
    fn fingerprint_is_stable_and_sensitive() {
        let a = NormalizationSpec::analytic(100.0);
        assert_eq!(a.fingerprint(), NormalizationSpec::analytic(100.0).fingerprint());
        assert_ne!(a.fingerprint(), NormalizationSpec::analytic(50.0).fingerprint());
    }

    proptest! {
        #[test]
        fn round_trip(x in 0.0f64..=100.0) {
            let spec = NormalizationSpec::analytic(100.0);
            let back = spec.inverse_value(spec.forward_value(x).unwrap()).unwrap();
            prop_assert!((back - x).abs() < 1e-5 * x.max(1.0));
        }

        #[test]
        fn strictly_increasing(a in 0.0f64..100.0, d in 1e-6f64..10.0) {
            let spec = NormalizationSpec::analytic(100.0);
            let b = (a + d).min(100.0);
            prop_assume!(b > a);
            prop_assert!(spec.forward_value(b).unwrap() > spec.forward_value(a).unwrap());
        }
    }
}
