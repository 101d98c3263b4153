//! Two-stage interpolator/forecaster training, cold-sampling rollout and
//! Monte Carlo dropout ensembles.

mod sampling;
pub mod stubs;
mod train;

use candle_core::Tensor;

pub use sampling::{
    cold_sampling_delta, cold_sampling_update, ensemble_mean, interpolate_at, lead_times, rollout,
    rollout_with_seeds, EnsembleForecast,
};
pub use train::{
    forecastor_loss, interpolator_loss, stack_leads, train_forecastor_step,
    train_interpolator_step,
};

use crate::networks::{Dropout, UNet};
use crate::{Error, Result};

/// Default ensemble size at evaluation.
pub const DEFAULT_MEMBERS: usize = 10;

/// `I(x0, horizon, t)`: estimate of the frame at fraction `t` of the horizon.
pub trait Interpolator {
    fn interpolate(&self, x0: &Tensor, horizon: &Tensor, time: &[f64], dropout: &mut Dropout) -> Result<Tensor>;

    /// Monte Carlo dropout rate; the ensemble's only source of spread.
    fn dropout_rate(&self) -> f64;
}

/// `F(x0, cond, t)`: estimate of the horizon frame given a frame at fraction `t`.
pub trait Forecaster {
    fn forecast(&self, x0: &Tensor, cond: &Tensor, time: &[f64], dropout: &mut Dropout) -> Result<Tensor>;
}

impl Interpolator for UNet {
    fn interpolate(&self, x0: &Tensor, horizon: &Tensor, time: &[f64], dropout: &mut Dropout) -> Result<Tensor> {
        self.forward(x0, horizon, time, dropout)
    }

    fn dropout_rate(&self) -> f64 {
        UNet::dropout_rate(self)
    }
}

impl Forecaster for UNet {
    fn forecast(&self, x0: &Tensor, cond: &Tensor, time: &[f64], dropout: &mut Dropout) -> Result<Tensor> {
        self.forward(x0, cond, time, dropout)
    }
}

/// A trained interpolator/forecaster pair.
pub struct DyffusionState<'a, I: ?Sized, F: ?Sized> {
    pub interpolator: &'a I,
    pub forecaster: &'a F,
    pub horizon: usize,
}

impl<'a, I: Interpolator + ?Sized, F: Forecaster + ?Sized> DyffusionState<'a, I, F> {
    pub fn new(interpolator: &'a I, forecaster: &'a F, horizon: usize) -> Result<Self> {
        if horizon < 2 {
            return Err(Error::config(format!("horizon {horizon} must be at least 2")));
        }
        Ok(Self {
            interpolator,
            forecaster,
            horizon,
        })
    }
}
