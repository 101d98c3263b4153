use candle_core::{DType, Tensor};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Monte Carlo dropout state: one RNG stream per batch row, or inactive.
///
/// Cloning copies the stream positions, so a clone replays the same masks.
#[derive(Debug, Clone, Default)]
pub struct Dropout {
    streams: Option<Vec<ChaCha8Rng>>,
}

impl Dropout {
    pub fn off() -> Self {
        Self { streams: None }
    }

    pub fn from_seeds(seeds: &[u64]) -> Self {
        Self {
            streams: Some(seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect()),
        }
    }

    /// Derives one child stream per row from `rng`.
    pub fn from_rng(rng: &mut impl RngCore, rows: usize) -> Self {
        let seeds: Vec<u64> = (0..rows).map(|_| rng.next_u64()).collect();
        Self::from_seeds(&seeds)
    }

    pub fn is_active(&self) -> bool {
        self.streams.is_some()
    }

    /// Zeroes each element with probability `rate` and rescales survivors by
    /// `1 / (1 - rate)`. Identity when inactive or `rate == 0`; no randomness is
    /// consumed in that case.
    pub fn apply(&mut self, x: &Tensor, rate: f64) -> Result<Tensor> {
        let Some(streams) = self.streams.as_mut() else {
            return Ok(x.clone());
        };
        if rate == 0.0 {
            return Ok(x.clone());
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let rows = x.dims()[0];
        if streams.len() != rows {
            return Err(Error::Contract(format!(
                "dropout has {} streams for a batch of {rows}",
                streams.len()
            )));
        }
        let per_row = x.elem_count() / rows.max(1);
        let keep = 1.0 / (1.0 - rate);
        let mut mask = Vec::with_capacity(x.elem_count());
        for rng in streams.iter_mut() {
            mask.extend((0..per_row).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }));
        }
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?;
        let mask = match x.dtype() {
            DType::F64 => mask,
            dt => mask.to_dtype(dt)?,
        };
        Ok((x * mask)?)
    }
}
