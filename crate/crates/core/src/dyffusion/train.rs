use candle_core::{DType, Device, Tensor};
use candle_nn::Optimizer;
use rand::{Rng, RngCore};

use super::sampling::{cold_sampling_rows, interpolate_at};
use super::{Forecaster, Interpolator};
use crate::data::FrameSource;
use crate::losses::{active_terms, composite_loss_tensor, CompositeLossConfig, Objective};
use crate::networks::{Dropout, UNet};
use crate::{Error, Result};

/// Stacks one frame per sample into `(B, C, H, W)`. `pick(i)` is the lead step to
/// read from sample `i`.
pub fn stack_leads<S: FrameSource>(batch: &[S], pick: impl Fn(usize) -> usize) -> Result<Tensor> {
    let first = batch.first().ok_or(Error::InsufficientFrames { needed: 1, available: 0 })?;
    let (c, h, w) = first.lead(0).dim();
    let mut values = Vec::with_capacity(batch.len() * c * h * w);
    for (i, s) in batch.iter().enumerate() {
        let f = s.lead(pick(i));
        if f.dim() != (c, h, w) {
            return Err(Error::ShapeMismatch {
                expected: vec![c, h, w],
                actual: f.shape().to_vec(),
            });
        }
        values.extend(f.iter().copied());
    }
    Ok(Tensor::from_vec(values, (batch.len(), c, h, w), &Device::Cpu)?)
}

fn common_horizon<S: FrameSource>(batch: &[S]) -> Result<usize> {
    let h = batch
        .first()
        .ok_or(Error::InsufficientFrames { needed: 1, available: 0 })?
        .horizon();
    if batch.iter().any(|s| s.horizon() != h) {
        return Err(Error::Contract("all samples in a batch must share the horizon".into()));
    }
    if h < 2 {
        return Err(Error::config(format!("horizon {h} leaves no interior step")));
    }
    Ok(h)
}

/// Stage 1: for each sample draw `n` in `1..h` and score `I(x0, x_h, n/h)` against
/// `x_n`. Reads three frames per sample.
pub fn interpolator_loss<I, S>(
    interp: &I,
    batch: &[S],
    objective: &Objective,
    rng: &mut impl RngCore,
) -> Result<Tensor>
where
    I: Interpolator + ?Sized,
    S: FrameSource,
{
    let h = common_horizon(batch)?;
    let steps: Vec<usize> = batch.iter().map(|_| rng.random_range(1..h)).collect();
    let mut dropout = Dropout::from_rng(rng, batch.len());
    let x0 = stack_leads(batch, |_| 0)?;
    let xh = stack_leads(batch, |_| h)?;
    let target = stack_leads(batch, |i| steps[i])?;
    let pred = interpolate_at(interp, &x0, &xh, &steps, h, &mut dropout)?;
    objective.loss(&pred, &target.to_dtype(pred.dtype())?)
}

pub fn train_interpolator_step<S: FrameSource, O: Optimizer>(
    net: &UNet,
    opt: &mut O,
    batch: &[S],
    objective: &Objective,
    rng: &mut impl RngCore,
) -> Result<f64> {
    let loss = interpolator_loss(net, batch, objective, rng)?;
    opt.backward_step(&loss)?;
    Ok(loss.to_dtype(DType::F64)?.to_scalar()?)
}

/// Stage 2 objective. The ground-truth horizon only ever appears as a loss target:
///
/// 1. `xhat_init = F(x0, x0, 0)` scored against `x_h`;
/// 2. `xhat_n = I(x0, xhat_init, n/h)` with dropout on and no gradient;
/// 3. `xhat_h = F(x0, xhat_n, n/h)` scored against `x_h`;
/// 4. one cold-sampling step from `xhat_n` using `xhat_h`, scored against `x_{n+1}`
///    (at `n + 1 = h` the step is `xhat_h` itself).
///
/// Terms with zero weight at `epoch` are not computed.
pub fn forecastor_loss<I, F, S>(
    interp: &I,
    fc: &F,
    batch: &[S],
    objective: &Objective,
    composite: &CompositeLossConfig,
    epoch: usize,
    rng: &mut impl RngCore,
) -> Result<Tensor>
where
    I: Interpolator + ?Sized,
    F: Forecaster + ?Sized,
    S: FrameSource,
{
    if interp.dropout_rate() <= 0.0 {
        return Err(Error::Contract(
            "stage 2 needs a stochastic interpolator (dropout rate > 0)".into(),
        ));
    }
    let h = common_horizon(batch)?;
    let b = batch.len();
    let steps: Vec<usize> = batch.iter().map(|_| rng.random_range(1..h)).collect();
    let mut dropout = Dropout::from_rng(rng, b);
    let (need_init, need_fc, need_step) = active_terms(epoch, composite);

    let x0 = stack_leads(batch, |_| 0)?;
    let x_h = stack_leads(batch, |_| h)?;
    let xhat_init = fc.forecast(&x0, &x0, &vec![0.0; b], &mut dropout)?;
    let dt = xhat_init.dtype();
    let x_h = x_h.to_dtype(dt)?;
    let l_init = if need_init {
        Some(objective.loss(&xhat_init, &x_h)?)
    } else {
        None
    };
    if !need_fc && !need_step {
        return composite_loss_tensor(l_init.as_ref(), None, None, epoch, composite);
    }

    let xhat_n = interpolate_at(interp, &x0, &xhat_init.detach(), &steps, h, &mut dropout)?.detach();
    let time: Vec<f64> = steps.iter().map(|&n| n as f64 / h as f64).collect();
    let xhat_h = fc.forecast(&x0, &xhat_n, &time, &mut dropout)?;
    let l_fc = if need_fc {
        Some(objective.loss(&xhat_h, &x_h)?)
    } else {
        None
    };

    let l_step = if need_step {
        let target = stack_leads(batch, |i| steps[i] + 1)?.to_dtype(dt)?;
        let boundary: Vec<bool> = steps.iter().map(|&n| n + 1 == h).collect();
        let pred = if boundary.iter().all(|&x| x) {
            xhat_h.clone()
        } else {
            // boundary rows run a harmless in-range step whose result is discarded
            let safe: Vec<usize> = steps.iter().map(|&n| n.min(h - 2)).collect();
            let stepped = cold_sampling_rows(interp, &x0, &xhat_h, &xhat_n, &safe, h, &mut dropout)?;
            if boundary.iter().any(|&x| x) {
                let m: Vec<f64> = boundary.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect();
                let m = Tensor::from_vec(m, (b, 1, 1, 1), &Device::Cpu)?.to_dtype(dt)?;
                let keep = m.affine(-1.0, 1.0)?;
                (xhat_h.broadcast_mul(&m)? + stepped.broadcast_mul(&keep)?)?
            } else {
                stepped
            }
        };
        Some(objective.loss(&pred, &target)?)
    } else {
        None
    };
    composite_loss_tensor(l_init.as_ref(), l_fc.as_ref(), l_step.as_ref(), epoch, composite)
}

#[allow(clippy::too_many_arguments)]
pub fn train_forecastor_step<I, S, O>(
    interp: &I,
    fc: &UNet,
    opt: &mut O,
    batch: &[S],
    objective: &Objective,
    composite: &CompositeLossConfig,
    epoch: usize,
    rng: &mut impl RngCore,
) -> Result<f64>
where
    I: Interpolator + ?Sized,
    S: FrameSource,
    O: Optimizer,
{
    let loss = forecastor_loss(interp, fc, batch, objective, composite, epoch, rng)?;
    opt.backward_step(&loss)?;
    Ok(loss.to_dtype(DType::F64)?.to_scalar()?)
}
