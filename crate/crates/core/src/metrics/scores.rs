use ndarray::{ArrayView, Axis, Dimension, RemoveAxis};
use serde::{Deserialize, Serialize};

use crate::data::NormalizationSpec;
use crate::{Error, Result};

fn same_shape(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            expected: b.to_vec(),
            actual: a.to_vec(),
        });
    }
    Ok(())
}

pub fn mse<D: Dimension>(pred: ArrayView<'_, f32, D>, target: ArrayView<'_, f32, D>) -> Result<f64> {
    same_shape(pred.shape(), target.shape())?;
    let n = pred.len().max(1) as f64;
    Ok(pred
        .iter()
        .zip(target.iter())
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum::<f64>()
        / n)
}

pub fn mae<D: Dimension>(pred: ArrayView<'_, f32, D>, target: ArrayView<'_, f32, D>) -> Result<f64> {
    same_shape(pred.shape(), target.shape())?;
    let n = pred.len().max(1) as f64;
    Ok(pred
        .iter()
        .zip(target.iter())
        .map(|(&p, &t)| (p as f64 - t as f64).abs())
        .sum::<f64>()
        / n)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyCounts {
    pub hits: u64,
    pub misses: u64,
    pub false_alarms: u64,
    pub correct_negatives: u64,
}

impl ContingencyCounts {
    /// Counts events `value >= threshold` in values already in a common space.
    pub fn from_values(pred: impl IntoIterator<Item = f64>, target: impl IntoIterator<Item = f64>, threshold: f64) -> Self {
        let mut c = Self::default();
        for (p, t) in pred.into_iter().zip(target) {
            match (p >= threshold, t >= threshold) {
                (true, true) => c.hits += 1,
                (false, true) => c.misses += 1,
                (true, false) => c.false_alarms += 1,
                (false, false) => c.correct_negatives += 1,
            }
        }
        c
    }

    /// Normalized fields binarized at `threshold` mm/h.
    pub fn from_normalized<D: Dimension>(
        pred: ArrayView<'_, f32, D>,
        target: ArrayView<'_, f32, D>,
        threshold: f64,
        spec: &NormalizationSpec,
    ) -> Result<Self> {
        same_shape(pred.shape(), target.shape())?;
        if !(threshold >= 0.0) {
            return Err(Error::NegativeRate(threshold));
        }
        let phys = |a: ArrayView<'_, f32, D>| -> Result<Vec<f64>> {
            a.iter().map(|&y| spec.inverse_value(y as f64)).collect()
        };
        Ok(Self::from_values(phys(pred)?, phys(target)?, threshold))
    }

    pub fn total(&self) -> u64 {
        self.hits + self.misses + self.false_alarms + self.correct_negatives
    }

    pub fn add(&mut self, other: &Self) {
        self.hits += other.hits;
        self.misses += other.misses;
        self.false_alarms += other.false_alarms;
        self.correct_negatives += other.correct_negatives;
    }

    /// `None` when neither field has an event.
    pub fn csi(&self) -> Option<f64> {
        let denom = self.hits + self.misses + self.false_alarms;
        (denom > 0).then(|| self.hits as f64 / denom as f64)
    }
}

/// Critical success index at `threshold` mm/h; `None` when undefined.
pub fn csi<D: Dimension>(
    pred: ArrayView<'_, f32, D>,
    target: ArrayView<'_, f32, D>,
    threshold: f64,
    spec: &NormalizationSpec,
) -> Result<Option<f64>> {
    Ok(ContingencyCounts::from_normalized(pred, target, threshold, spec)?.csi())
}

/// Sum over member pairs of `|x_i - x_j|`, via the sorted-order identity.
fn pairwise_abs_sum(sorted: &[f64]) -> f64 {
    let x = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, v)| (2.0 * (i as f64 + 1.0) - x - 1.0) * v)
        .sum::<f64>()
        * 2.0
}

fn members_check(x: usize, member_shape: &[usize], obs_shape: &[usize]) -> Result<()> {
    if x == 0 {
        return Err(Error::EmptyEnsemble);
    }
    same_shape(member_shape, obs_shape)
}

/// Empirical CRPS averaged over pixels. `members` has the member axis first. With
/// `fair`, the spread term uses `X (X - 1)` in place of `X^2`.
pub fn crps_ensemble<D>(
    members: ArrayView<'_, f32, D>,
    obs: ArrayView<'_, f32, D::Smaller>,
    fair: bool,
) -> Result<f64>
where
    D: Dimension + RemoveAxis,
{
    let x = members.len_of(Axis(0));
    members_check(x, &members.shape()[1..], obs.shape())?;
    let xf = x as f64;
    let spread_den = if fair { 2.0 * xf * (xf - 1.0) } else { 2.0 * xf * xf };
    let per_member: Vec<Vec<f32>> = members.outer_iter().map(|m| m.iter().copied().collect()).collect();
    let mut buf = vec![0.0f64; x];
    let mut total = 0.0;
    for (p, &y) in obs.iter().enumerate() {
        let y = y as f64;
        for (b, m) in buf.iter_mut().zip(&per_member) {
            *b = m[p] as f64;
        }
        let skill = buf.iter().map(|v| (v - y).abs()).sum::<f64>() / xf;
        let spread = if x > 1 {
            buf.sort_by(f64::total_cmp);
            pairwise_abs_sum(&buf) / spread_den
        } else {
            0.0
        };
        total += skill - spread;
    }
    Ok(total / obs.len().max(1) as f64)
}

/// Ingredients of the spread-skill ratio, kept apart so they can be pooled.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SpreadSkill {
    /// Mean over pixels of the unbiased member standard deviation.
    pub spread: f64,
    /// Mean squared error of the ensemble mean.
    pub mean_sq_err: f64,
}

impl SpreadSkill {
    pub fn compute<D>(members: ArrayView<'_, f32, D>, obs: ArrayView<'_, f32, D::Smaller>) -> Result<Self>
    where
        D: Dimension + RemoveAxis,
    {
        let x = members.len_of(Axis(0));
        members_check(x, &members.shape()[1..], obs.shape())?;
        let per_member: Vec<Vec<f32>> = members.outer_iter().map(|m| m.iter().copied().collect()).collect();
        let (mut spread, mut sq) = (0.0, 0.0);
        for (p, &y) in obs.iter().enumerate() {
            let mean = per_member.iter().map(|m| m[p] as f64).sum::<f64>() / x as f64;
            if x > 1 {
                let var = per_member
                    .iter()
                    .map(|m| (m[p] as f64 - mean).powi(2))
                    .sum::<f64>()
                    / (x as f64 - 1.0);
                spread += var.sqrt();
            }
            sq += (mean - y as f64).powi(2);
        }
        let n = obs.len().max(1) as f64;
        Ok(Self {
            spread: spread / n,
            mean_sq_err: sq / n,
        })
    }

    /// Zero spread gives 0; nonzero spread with a perfect mean is undefined (`None`).
    pub fn ratio(&self) -> Option<f64> {
        if self.spread == 0.0 {
            return Some(0.0);
        }
        let rmse = self.mean_sq_err.sqrt();
        (rmse > 0.0).then(|| self.spread / rmse)
    }
}

pub fn ssr<D>(members: ArrayView<'_, f32, D>, obs: ArrayView<'_, f32, D::Smaller>) -> Result<Option<f64>>
where
    D: Dimension + RemoveAxis,
{
    Ok(SpreadSkill::compute(members, obs)?.ratio())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array2};

    fn spec() -> NormalizationSpec {
        NormalizationSpec::analytic(100.0)
    }

    #[test]
    fn mse_examples() {
        let a = Array2::<f32>::from_elem((3, 3), 0.4);
        let b = a.mapv(|v| v + 0.1);
        assert_eq!(mse(a.view(), a.view()).unwrap(), 0.0);
        assert!((mse(a.view(), b.view()).unwrap() - 0.01).abs() < 1e-6);
        assert_eq!(mse(a.view(), b.view()).unwrap(), mse(b.view(), a.view()).unwrap());
        assert!(mse(a.view(), Array2::<f32>::zeros((2, 2)).view()).is_err());
    }

    #[test]
    fn csi_examples() {
        let s = spec();
        let hi = s.forward_value(20.0).unwrap() as f32;
        // pred events at three pixels, target at three; two shared
        let pred = arr2(&[[hi, hi, 0.0], [hi, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        let target = arr2(&[[hi, hi, 0.0], [0.0, hi, 0.0], [0.0, 0.0, 0.0]]);
        let c = ContingencyCounts::from_normalized(pred.view(), target.view(), 2.0, &s).unwrap();
        assert_eq!((c.hits, c.misses, c.false_alarms, c.correct_negatives), (2, 1, 1, 5));
        assert_eq!(c.csi(), Some(0.5));
        assert_eq!(csi(pred.view(), pred.view(), 2.0, &s).unwrap(), Some(1.0));
        let disjoint = arr2(&[[0.0, 0.0, hi], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        assert_eq!(csi(pred.view(), disjoint.view(), 2.0, &s).unwrap(), Some(0.0));
        let dry = Array2::<f32>::zeros((3, 3));
        assert_eq!(csi(dry.view(), dry.view(), 2.0, &s).unwrap(), None);
        assert!(csi(dry.view(), dry.view(), -1.0, &s).is_err());
    }

    #[test]
    fn crps_hand_value() {
        let members = arr2(&[[0.2f32], [0.6]]);
        let obs = arr1(&[0.4f32]);
        let v = crps_ensemble(members.view(), obs.view(), false).unwrap();
        assert!((v - 0.1).abs() < 1e-7, "{v}");
        let single = arr2(&[[0.3f32, 0.9]]);
        let o = arr1(&[0.5f32, 0.5]);
        assert_eq!(
            crps_ensemble(single.view(), o.view(), false).unwrap(),
            mae(single.index_axis(Axis(0), 0), o.view()).unwrap()
        );
        let empty = Array2::<f32>::zeros((0, 2));
        assert!(matches!(crps_ensemble(empty.view(), o.view(), false), Err(Error::EmptyEnsemble)));
    }

    #[test]
    fn ssr_examples() {
        let same = arr2(&[[0.3f32, 0.5], [0.3, 0.5]]);
        let obs = arr1(&[0.1f32, 0.9]);
        assert_eq!(ssr(same.view(), obs.view()).unwrap(), Some(0.0));
        let perfect_mean = arr2(&[[0.3f32], [0.5]]);
        assert_eq!(ssr(perfect_mean.view(), arr1(&[0.4f32]).view()).unwrap(), None);
        let one = arr2(&[[0.3f32, 0.5]]);
        assert_eq!(ssr(one.view(), obs.view()).unwrap(), Some(0.0));
    }
}
