//! Comparators: frame persistence and the autoregressive ConvLSTM, plus the
//! interface an external STEPS-style ensemble would plug into.

use candle_core::{DType, Device, Tensor};
use candle_nn::Optimizer;
use ndarray::{Array4, Array5, ArrayView3, ArrayView4, Axis};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::data::FrameSource;
use crate::losses::Objective;
use crate::networks::{ConvLstm, Dropout};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineTag {
    ConvlstmBce,
    ConvlstmLcb,
    Persistence,
}

impl BaselineTag {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineTag::ConvlstmBce => "convlstm_bce",
            BaselineTag::ConvlstmLcb => "convlstm_lcb",
            BaselineTag::Persistence => "persistence",
        }
    }
}

impl std::fmt::Display for BaselineTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A deterministic forecast of `h` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineForecast {
    /// `(h, C, H, W)` in `[0, 1]`.
    pub frames: Array4<f32>,
    pub model_tag: BaselineTag,
}

pub fn persistence_forecast(x0: ArrayView3<'_, f32>, h: usize) -> Result<BaselineForecast> {
    if let Some((i, &v)) = x0.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(Error::OutOfUnitRange { index: i, value: v as f64 });
    }
    let frames = x0
        .insert_axis(Axis(0))
        .broadcast((h, x0.dim().0, x0.dim().1, x0.dim().2))
        .expect("broadcast along a new axis")
        .to_owned();
    Ok(BaselineForecast {
        frames,
        model_tag: BaselineTag::Persistence,
    })
}

fn frames_tensor<S: FrameSource>(batch: &[S], picks: &[usize], len: usize) -> Result<Tensor> {
    let (c, h, w) = batch[0].frame(0).dim();
    let mut values = Vec::with_capacity(batch.len() * len * c * h * w);
    for (s, &start) in batch.iter().zip(picks) {
        for k in start..start + len {
            values.extend(s.frame(k).iter().copied());
        }
    }
    Ok(Tensor::from_vec(values, (batch.len(), len, c, h, w), &Device::Cpu)?)
}

/// One-step supervision: for each sample pick a window start `k` and score the
/// prediction from frames `k..k+T` against frame `k+T`.
pub fn convlstm_loss<S: FrameSource>(
    net: &ConvLstm,
    batch: &[S],
    objective: &Objective,
    rng: &mut impl RngCore,
) -> Result<Tensor> {
    let t = net.config().context_frames;
    let len = batch.first().map(|s| s.len()).unwrap_or(0);
    if batch.is_empty() || len < t + 1 || batch.iter().any(|s| s.len() != len) {
        return Err(Error::InsufficientFrames {
            needed: t + 1,
            available: len,
        });
    }
    let starts: Vec<usize> = batch.iter().map(|_| rng.random_range(0..=len - t - 1)).collect();
    let mut dropout = Dropout::from_rng(rng, batch.len());
    let window = frames_tensor(batch, &starts, t + 1)?;
    let context = window.narrow(1, 0, t)?;
    let target = window.narrow(1, t, 1)?.squeeze(1)?;
    let pred = net.forward(&context, &mut dropout)?;
    objective.loss(&pred, &target.to_dtype(pred.dtype())?)
}

pub fn train_convlstm_step<S: FrameSource, O: Optimizer>(
    net: &ConvLstm,
    opt: &mut O,
    batch: &[S],
    objective: &Objective,
    rng: &mut impl RngCore,
) -> Result<f64> {
    let loss = convlstm_loss(net, batch, objective, rng)?;
    opt.backward_step(&loss)?;
    Ok(loss.to_dtype(DType::F64)?.to_scalar()?)
}

/// Called with the lead index and each predicted frame `(B, C, H, W)`; the returned
/// frame is what enters the sliding window.
pub type RolloutHook<'a> = dyn FnMut(usize, Tensor) -> Result<Tensor> + 'a;

/// Batched autoregressive rollout with dropout off. `context`: `(B, T, C, H, W)`.
/// Returns `(B, h, C, H, W)`.
pub fn convlstm_rollout_batch(
    net: &ConvLstm,
    context: &Tensor,
    h: usize,
    mut hook: Option<&mut RolloutHook<'_>>,
) -> Result<Tensor> {
    let t = net.config().context_frames;
    let (_, got, _, _, _) = context.dims5()?;
    if got != t {
        return Err(Error::InsufficientFrames { needed: t, available: got });
    }
    let mut window: Vec<Tensor> = (0..t)
        .map(|k| context.narrow(1, k, 1))
        .collect::<candle_core::Result<_>>()?;
    let mut out = Vec::with_capacity(h);
    for k in 0..h {
        let ctx = Tensor::cat(&window[window.len() - t..], 1)?;
        let mut next = net.forward(&ctx, &mut Dropout::off())?.detach();
        if let Some(f) = hook.as_mut() {
            next = f(k, next)?;
        }
        window.push(next.unsqueeze(1)?);
        out.push(next);
    }
    Ok(Tensor::stack(&out, 1)?)
}

/// Rollout from exactly `T` context frames `(T, C, H, W)`.
pub fn convlstm_rollout(
    net: &ConvLstm,
    context: ArrayView4<'_, f32>,
    h: usize,
    tag: BaselineTag,
    hook: Option<&mut RolloutHook<'_>>,
) -> Result<BaselineForecast> {
    let (t, c, hh, ww) = context.dim();
    let x = Tensor::from_iter(context.iter().copied(), &Device::Cpu)?.reshape((1, t, c, hh, ww))?;
    let y = convlstm_rollout_batch(net, &x, h, hook)?.squeeze(0)?.to_dtype(DType::F32)?;
    let frames = Array4::from_shape_vec((h, c, hh, ww), y.flatten_all()?.to_vec1()?)
        .map_err(|e| Error::Contract(e.to_string()))?;
    Ok(BaselineForecast { frames, model_tag: tag })
}

/// Extension point for an external statistical ensemble nowcaster such as STEPS.
/// Implementations receive context frames in mm/h and return members in mm/h; the
/// caller normalizes them before scoring.
pub trait EnsembleNowcaster {
    fn tag(&self) -> &str;

    /// `context`: `(T, C, H, W)` in mm/h, oldest first. Returns `(X, h, C, H, W)`.
    fn nowcast(&self, context: ArrayView4<'_, f32>, h: usize, members: usize, seed: u64) -> Result<Array5<f32>>;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::ConvLSTMConfig;
    use ndarray::Array3;

    #[test]
    fn persistence_copies_x0() {
        let x0 = Array3::from_shape_fn((1, 4, 4), |(_, i, j)| (i * 4 + j) as f32 / 16.0);
        let f = persistence_forecast(x0.view(), 8).unwrap();
        assert_eq!(f.frames.dim(), (8, 1, 4, 4));
        for k in 0..8 {
            assert_eq!(f.frames.index_axis(Axis(0), k), x0);
        }
        assert!(persistence_forecast(Array3::from_elem((1, 2, 2), 1.5).view(), 2).is_err());
    }

    #[test]
    fn rollout_shape_and_determinism() {
        let net = ConvLstm::new(
            ConvLSTMConfig {
                hidden_channels: 4,
                kernel: 3,
                ..Default::default()
            },
            0,
            DType::F32,
        )
        .unwrap();
        let ctx = Array4::from_shape_fn((4, 1, 8, 8), |(t, _, i, j)| ((t + i + j) % 5) as f32 / 5.0);
        let a = convlstm_rollout(&net, ctx.view(), 8, BaselineTag::ConvlstmLcb, None).unwrap();
        let b = convlstm_rollout(&net, ctx.view(), 8, BaselineTag::ConvlstmLcb, None).unwrap();
        assert_eq!(a.frames.dim(), (8, 1, 8, 8));
        assert_eq!(a, b);
        assert!(convlstm_rollout(&net, ctx.slice(ndarray::s![..3, .., .., ..]), 8, BaselineTag::ConvlstmLcb, None).is_err());
    }
}
