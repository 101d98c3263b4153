//! Stand-in components and instrumentation for exercising the framework without
//! trained networks.

use std::cell::RefCell;
use std::collections::BTreeSet;

use candle_core::Tensor;
use ndarray::ArrayView3;

use super::{Forecaster, Interpolator};
use crate::data::FrameSource;
use crate::networks::Dropout;
use crate::{Error, Result};

/// Interpolator defined by a closure `(x0, horizon, time) -> frame`.
pub struct FnInterpolator<Fx> {
    rate: f64,
    f: Fx,
}

impl<Fx> FnInterpolator<Fx>
where
    Fx: Fn(&Tensor, &Tensor, &[f64]) -> Result<Tensor>,
{
    /// `rate` is only reported, no dropout is applied.
    pub fn new(rate: f64, f: Fx) -> Self {
        Self { rate, f }
    }
}

impl<Fx> Interpolator for FnInterpolator<Fx>
where
    Fx: Fn(&Tensor, &Tensor, &[f64]) -> Result<Tensor>,
{
    fn interpolate(&self, x0: &Tensor, horizon: &Tensor, time: &[f64], _: &mut Dropout) -> Result<Tensor> {
        (self.f)(x0, horizon, time)
    }

    fn dropout_rate(&self) -> f64 {
        self.rate
    }
}

/// Forecaster defined by a closure `(x0, cond, time) -> frame`.
pub struct FnForecaster<Fx> {
    f: Fx,
}

impl<Fx> FnForecaster<Fx>
where
    Fx: Fn(&Tensor, &Tensor, &[f64]) -> Result<Tensor>,
{
    pub fn new(f: Fx) -> Self {
        Self { f }
    }
}

impl<Fx> Forecaster for FnForecaster<Fx>
where
    Fx: Fn(&Tensor, &Tensor, &[f64]) -> Result<Tensor>,
{
    fn forecast(&self, x0: &Tensor, cond: &Tensor, time: &[f64], _: &mut Dropout) -> Result<Tensor> {
        (self.f)(x0, cond, time)
    }
}

/// Returns the true frame at the requested time, ignoring its inputs.
/// `truth` is `(B, h + 1, C, H, W)`: x0 followed by the targets of each row.
pub struct Oracle {
    truth: Tensor,
    horizon: usize,
    rate: f64,
}

impl Oracle {
    pub fn new(truth: Tensor, rate: f64) -> Result<Self> {
        let (_, s, _, _, _) = truth.dims5()?;
        if s < 3 {
            return Err(Error::InsufficientFrames { needed: 3, available: s });
        }
        Ok(Self {
            truth,
            horizon: s - 1,
            rate,
        })
    }

    fn at(&self, time: &[f64], like: &Tensor) -> Result<Tensor> {
        let rows: Vec<Tensor> = time
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let k = (t * self.horizon as f64).round() as usize;
                self.truth.get(i)?.get(k)
            })
            .collect::<candle_core::Result<_>>()?;
        Ok(Tensor::stack(&rows, 0)?.to_dtype(like.dtype())?)
    }
}

impl Interpolator for Oracle {
    fn interpolate(&self, x0: &Tensor, _: &Tensor, time: &[f64], _: &mut Dropout) -> Result<Tensor> {
        self.at(time, x0)
    }

    fn dropout_rate(&self) -> f64 {
        self.rate
    }
}

/// As a forecaster the oracle always returns the horizon frame.
impl Forecaster for Oracle {
    fn forecast(&self, x0: &Tensor, _: &Tensor, time: &[f64], _: &mut Dropout) -> Result<Tensor> {
        self.at(&vec![1.0; time.len()], x0)
    }
}

/// One recorded forward pass.
#[derive(Debug, Clone)]
pub struct Call {
    pub role: &'static str,
    pub inputs: Vec<Tensor>,
    pub time: Vec<f64>,
}

/// Wraps a component and records every input it receives.
pub struct Recorder<T> {
    pub inner: T,
    calls: RefCell<Vec<Call>>,
}

impl<T> Recorder<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            calls: RefCell::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> Vec<Call> {
        self.calls.borrow().clone()
    }

    pub fn clear(&self) {
        self.calls.borrow_mut().clear();
    }

    fn record(&self, role: &'static str, inputs: [&Tensor; 2], time: &[f64]) {
        self.calls.borrow_mut().push(Call {
            role,
            inputs: inputs.iter().map(|t| t.detach()).collect(),
            time: time.to_vec(),
        });
    }
}

impl<T: Interpolator> Interpolator for Recorder<T> {
    fn interpolate(&self, x0: &Tensor, horizon: &Tensor, time: &[f64], d: &mut Dropout) -> Result<Tensor> {
        self.record("interpolator", [x0, horizon], time);
        self.inner.interpolate(x0, horizon, time, d)
    }

    fn dropout_rate(&self) -> f64 {
        self.inner.dropout_rate()
    }
}

impl<T: Forecaster> Forecaster for Recorder<T> {
    fn forecast(&self, x0: &Tensor, cond: &Tensor, time: &[f64], d: &mut Dropout) -> Result<Tensor> {
        self.record("forecaster", [x0, cond], time);
        self.inner.forecast(x0, cond, time, d)
    }
}

/// Frame source that remembers which frames were read.
pub struct CountingSource<'a, S> {
    inner: &'a S,
    touched: RefCell<BTreeSet<usize>>,
}

impl<'a, S: FrameSource> CountingSource<'a, S> {
    pub fn new(inner: &'a S) -> Self {
        Self {
            inner,
            touched: RefCell::new(BTreeSet::new()),
        }
    }

    /// Distinct absolute frame indices read so far.
    pub fn touched(&self) -> BTreeSet<usize> {
        self.touched.borrow().clone()
    }
}

impl<S: FrameSource> FrameSource for CountingSource<'_, S> {
    fn history(&self) -> usize {
        self.inner.history()
    }

    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    fn frame(&self, index: usize) -> ArrayView3<'_, f32> {
        self.touched.borrow_mut().insert(index);
        self.inner.frame(index)
    }
}
