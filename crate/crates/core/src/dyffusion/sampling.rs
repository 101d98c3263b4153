use candle_core::{DType, Tensor};
use ndarray::{Array4, Array5, Axis};
use rand::RngCore;

use super::{DyffusionState, Forecaster, Interpolator};
use crate::data::CADENCE_MINUTES;
use crate::networks::Dropout;
use crate::{Error, Result};

/// Per-row 0/1 indicator, shape `(B, 1, 1, 1)`.
fn row_mask(flags: impl Iterator<Item = bool>, like: &Tensor) -> Result<Tensor> {
    let v: Vec<f64> = flags.map(|f| if f { 1.0 } else { 0.0 }).collect();
    let n = v.len();
    Ok(Tensor::from_vec(v, (n, 1, 1, 1), like.device())?.to_dtype(like.dtype())?)
}

/// `I(x0, horizon, i_n)` with per-row step indices. Index 0 returns `x0` and index
/// `h` returns `horizon` exactly, without touching the network.
pub fn interpolate_at<I: Interpolator + ?Sized>(
    interp: &I,
    x0: &Tensor,
    horizon: &Tensor,
    steps: &[usize],
    h: usize,
    dropout: &mut Dropout,
) -> Result<Tensor> {
    if let Some(&bad) = steps.iter().find(|&&n| n > h) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            valid: format!("0..={h}"),
        });
    }
    if steps.iter().all(|&n| n == 0) {
        return Ok(x0.clone());
    }
    if steps.iter().all(|&n| n == h) {
        return Ok(horizon.clone());
    }
    let time: Vec<f64> = steps.iter().map(|&n| n as f64 / h as f64).collect();
    let net = interp.interpolate(x0, horizon, &time, dropout)?;
    if steps.iter().all(|&n| n != 0 && n != h) {
        return Ok(net);
    }
    let at0 = row_mask(steps.iter().map(|&n| n == 0), &net)?;
    let ath = row_mask(steps.iter().map(|&n| n == h), &net)?;
    let inner = row_mask(steps.iter().map(|&n| n != 0 && n != h), &net)?;
    Ok(((net.broadcast_mul(&inner)? + x0.broadcast_mul(&at0)?)? + horizon.broadcast_mul(&ath)?)?)
}

/// The unclamped update `I(x0, xh, i_{n+1}) - I(x0, xh, i_n) + xhat_in`, with both
/// interpolator calls sharing one dropout mask per row.
pub fn cold_sampling_delta<I: Interpolator + ?Sized>(
    interp: &I,
    x0: &Tensor,
    xhat_h: &Tensor,
    xhat_in: &Tensor,
    steps: &[usize],
    h: usize,
    dropout: &mut Dropout,
) -> Result<Tensor> {
    if let Some(&bad) = steps.iter().find(|&&n| n + 2 > h) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            valid: format!("0..={}", h.saturating_sub(2)),
        });
    }
    let next: Vec<usize> = steps.iter().map(|n| n + 1).collect();
    // replaying the same stream positions reproduces the mask for the second call
    let mut replay = dropout.clone();
    let a = interpolate_at(interp, x0, xhat_h, &next, h, &mut replay)?;
    let b = interpolate_at(interp, x0, xhat_h, steps, h, dropout)?;
    Ok(((a - b)? + xhat_in)?)
}

/// One clamped cold-sampling step from `xhat_{i_n}` to `xhat_{i_{n+1}}`.
pub fn cold_sampling_update<I: Interpolator + ?Sized>(
    interp: &I,
    x0: &Tensor,
    xhat_h: &Tensor,
    xhat_in: &Tensor,
    n: usize,
    h: usize,
    dropout: &mut Dropout,
) -> Result<Tensor> {
    let steps = vec![n; x0.dims()[0]];
    cold_sampling_rows(interp, x0, xhat_h, xhat_in, &steps, h, dropout)
}

pub(crate) fn cold_sampling_rows<I: Interpolator + ?Sized>(
    interp: &I,
    x0: &Tensor,
    xhat_h: &Tensor,
    xhat_in: &Tensor,
    steps: &[usize],
    h: usize,
    dropout: &mut Dropout,
) -> Result<Tensor> {
    Ok(cold_sampling_delta(interp, x0, xhat_h, xhat_in, steps, h, dropout)?.clamp(0.0, 1.0)?)
}

/// X member rollouts of `h` frames each.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleForecast {
    /// `(X, h, C, H, W)` in `[0, 1]`.
    pub members: Array5<f32>,
    /// Dropout stream seed of each member.
    pub member_seeds: Vec<u64>,
    /// Minutes after issue, one per lead.
    pub lead_times: Vec<i64>,
}

pub fn lead_times(h: usize) -> Vec<i64> {
    (1..=h as i64).map(|k| k * CADENCE_MINUTES).collect()
}

impl EnsembleForecast {
    pub fn new(members: Array5<f32>, member_seeds: Vec<u64>) -> Result<Self> {
        if members.len_of(Axis(0)) == 0 {
            return Err(Error::EmptyEnsemble);
        }
        if member_seeds.len() != members.len_of(Axis(0)) {
            return Err(Error::ShapeMismatch {
                expected: vec![members.len_of(Axis(0))],
                actual: vec![member_seeds.len()],
            });
        }
        if let Some((i, &v)) = members.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfUnitRange { index: i, value: v as f64 });
        }
        let h = members.len_of(Axis(1));
        Ok(Self {
            members,
            member_seeds,
            lead_times: lead_times(h),
        })
    }

    pub fn n_members(&self) -> usize {
        self.members.len_of(Axis(0))
    }

    pub fn horizon(&self) -> usize {
        self.members.len_of(Axis(1))
    }
}

/// Pixel-wise mean over members.
pub fn ensemble_mean(f: &EnsembleForecast) -> Result<Array4<f32>> {
    let x = f.members.len_of(Axis(0));
    if x == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let mut acc = f.members.index_axis(Axis(0), 0).mapv(f64::from);
    for m in f.members.outer_iter().skip(1) {
        acc.zip_mut_with(&m, |a, &b| *a += f64::from(b));
    }
    Ok(acc.mapv(|v| ((v / x as f64) as f32).clamp(0.0, 1.0)))
}

/// Rollout with member seeds drawn from `rng`.
pub fn rollout<I, F>(
    x0: &Tensor,
    state: &DyffusionState<'_, I, F>,
    members: usize,
    rng: &mut impl RngCore,
) -> Result<EnsembleForecast>
where
    I: Interpolator + ?Sized,
    F: Forecaster + ?Sized,
{
    if members == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let seeds: Vec<u64> = (0..members).map(|_| rng.next_u64()).collect();
    rollout_with_seeds(x0, state, &seeds)
}

/// Autoregressive cold-sampling rollout from one initial frame `(1, H, W)` or
/// `(1, 1, H, W)`. Members run as batch rows, each with its own dropout stream.
pub fn rollout_with_seeds<I, F>(
    x0: &Tensor,
    state: &DyffusionState<'_, I, F>,
    seeds: &[u64],
) -> Result<EnsembleForecast>
where
    I: Interpolator + ?Sized,
    F: Forecaster + ?Sized,
{
    if seeds.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let x0 = match x0.rank() {
        3 => x0.unsqueeze(0)?,
        _ => x0.clone(),
    };
    let (one, c, hh, ww) = x0.dims4()?;
    if one != 1 {
        return Err(Error::ShapeMismatch {
            expected: vec![1, c, hh, ww],
            actual: x0.dims().to_vec(),
        });
    }
    let h = state.horizon;
    let x = seeds.len();
    let x0b = x0.repeat((x, 1, 1, 1))?;
    let mut dropout = Dropout::from_seeds(seeds);
    let (interp, fc) = (&*state.interpolator, &*state.forecaster);

    let mut xhat_h = fc.forecast(&x0b, &x0b, &vec![0.0; x], &mut dropout)?.detach();
    let mut xhat_in = x0b.clone();
    let mut frames = Vec::with_capacity(h);
    for n in 0..h - 1 {
        let next = cold_sampling_update(interp, &x0b, &xhat_h, &xhat_in, n, h, &mut dropout)?.detach();
        let t = (n + 1) as f64 / h as f64;
        xhat_h = fc.forecast(&x0b, &next, &vec![t; x], &mut dropout)?.detach();
        frames.push(next.clone());
        xhat_in = next;
    }
    frames.push(xhat_h);

    let stacked = Tensor::stack(&frames, 1)?.to_dtype(DType::F32)?;
    let values: Vec<f32> = stacked.flatten_all()?.to_vec1()?;
    let members = Array5::from_shape_vec((x, h, c, hh, ww), values)
        .map_err(|e| Error::Contract(e.to_string()))?;
    EnsembleForecast::new(members, seeds.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dyffusion::stubs::FnInterpolator;
    use candle_core::Device;

    fn constant(v: f64, b: usize) -> Tensor {
        Tensor::full(v, (b, 1, 2, 2), &Device::Cpu).unwrap()
    }

    #[test]
    fn clamp_bounds_negative_delta() {
        // I(n+1) = 0.6, I(n) = 0.9, xhat_in = 0.2: raw value -0.1
        let interp = FnInterpolator::new(0.1, |x0: &Tensor, _: &Tensor, t: &[f64]| {
            Ok(if t[0] > 0.3 { x0.ones_like()?.affine(0.6, 0.0)? } else { x0.ones_like()?.affine(0.9, 0.0)? })
        });
        let x0 = constant(0.5, 1);
        let xh = constant(0.5, 1);
        let xin = constant(0.2, 1);
        let mut d = Dropout::off();
        let raw = cold_sampling_delta(&interp, &x0, &xh, &xin, &[1], 4, &mut d).unwrap();
        let v: Vec<f64> = raw.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|x| (x + 0.1).abs() < 1e-12));
        let out = cold_sampling_update(&interp, &x0, &xh, &xin, 1, 4, &mut d).unwrap();
        assert!(out.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn step_zero_bypasses_the_network() {
        let interp = FnInterpolator::new(0.1, |_: &Tensor, _: &Tensor, _: &[f64]| {
            Err(Error::Contract("network must not run".into()))
        });
        let x0 = constant(0.3, 2);
        let out = interpolate_at(&interp, &x0, &constant(0.9, 2), &[0, 0], 8, &mut Dropout::off()).unwrap();
        assert_eq!(out.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![0.3; 8]);
        assert!(cold_sampling_update(&interp, &x0, &x0, &x0, 7, 8, &mut Dropout::off()).is_err());
    }

    #[test]
    fn mixed_rows_select_exactly() {
        let interp = FnInterpolator::new(0.1, |x0: &Tensor, _: &Tensor, _: &[f64]| Ok(x0.affine(0.0, 0.5)?));
        let x0 = constant(0.25, 3);
        let xh = constant(0.75, 3);
        let out = interpolate_at(&interp, &x0, &xh, &[0, 4, 8], 8, &mut Dropout::off()).unwrap();
        let rows: Vec<f64> = (0..3)
            .map(|r| out.get(r).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()[0])
            .collect();
        assert_eq!(rows, vec![0.25, 0.5, 0.75]);
    }

    #[test]
    fn ensemble_mean_examples() {
        let mut m = Array5::<f32>::zeros((2, 1, 1, 2, 2));
        m.index_axis_mut(Axis(0), 0).fill(0.2);
        m.index_axis_mut(Axis(0), 1).fill(0.4);
        let f = EnsembleForecast::new(m.clone(), vec![1, 2]).unwrap();
        assert!(ensemble_mean(&f).unwrap().iter().all(|&v| (v - 0.3).abs() < 1e-7));
        let single = EnsembleForecast::new(m.slice_move(ndarray::s![0..1, .., .., .., ..]), vec![1]).unwrap();
        assert_eq!(ensemble_mean(&single).unwrap(), single.members.index_axis(Axis(0), 0));
        assert!(EnsembleForecast::new(Array5::zeros((0, 1, 1, 1, 1)), vec![]).is_err());
        assert_eq!(lead_times(8), vec![30, 60, 90, 120, 150, 180, 210, 240]);
    }
}
