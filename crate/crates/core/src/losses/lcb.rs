use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::{ClassWeightTable, PerceptualDistance};
use crate::data::NormalizationSpec;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LcbConfig {
    /// Weight of the class-balanced term; the perceptual term gets `1 - alpha`.
    pub alpha: f64,
    /// Scale of the absolute-error term inside the class-balanced loss.
    pub beta: f64,
}

impl Default for LcbConfig {
    fn default() -> Self {
        Self { alpha: 0.6, beta: 1.0 }
    }
}

impl LcbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("lcb alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::config(format!("lcb beta {} must be non-negative", self.beta)));
        }
        Ok(())
    }
}

fn check_shapes(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.dims() != target.dims() {
        return Err(Error::ShapeMismatch {
            expected: target.dims().to_vec(),
            actual: pred.dims().to_vec(),
        });
    }
    Ok(())
}

/// Class-balanced MSE + beta * MAE, weighted by the band of the target's physical
/// rate and averaged over every element.
pub fn cb_loss(
    pred: &Tensor,
    target: &Tensor,
    beta: f64,
    table: &ClassWeightTable,
    spec: &NormalizationSpec,
) -> Result<Tensor> {
    check_shapes(pred, target)?;
    let weights = table.weights_for_target(target, spec)?;
    let diff = (pred - target.detach())?;
    let per_pixel = (diff.sqr()? + (diff.abs()? * beta)?)?;
    Ok((per_pixel * weights)?.mean_all()?)
}

/// The combined loss with everything it needs bundled. Cheap to clone.
#[derive(Debug, Clone)]
pub struct Lcb {
    pub cfg: LcbConfig,
    pub table: ClassWeightTable,
    pub spec: NormalizationSpec,
    pub perceptual: PerceptualDistance,
}

impl Lcb {
    pub fn new(
        cfg: LcbConfig,
        table: ClassWeightTable,
        spec: NormalizationSpec,
        perceptual: PerceptualDistance,
    ) -> Result<Self> {
        cfg.validate()?;
        table.validate()?;
        spec.validate()?;
        Ok(Self { cfg, table, spec, perceptual })
    }

    pub fn cb(&self, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
        cb_loss(pred, target, self.cfg.beta, &self.table, &self.spec)
    }

    pub fn loss(&self, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
        check_shapes(pred, target)?;
        let a = self.cfg.alpha;
        // a zero-weight component is skipped, which also keeps the degenerate mixes exact
        if a == 1.0 {
            return self.cb(pred, target);
        }
        let lp = self.perceptual.distance(pred, &target.detach())?;
        if a == 0.0 {
            return Ok(lp);
        }
        let cb = self.cb(pred, target)?;
        Ok(((cb * a)? + (lp * (1.0 - a))?)?)
    }
}

pub fn lcb_loss(
    pred: &Tensor,
    target: &Tensor,
    cfg: &LcbConfig,
    table: &ClassWeightTable,
    spec: &NormalizationSpec,
    perceptual: &PerceptualDistance,
) -> Result<Tensor> {
    Lcb::new(*cfg, table.clone(), *spec, perceptual.clone())?.loss(pred, target)
}

/// Elementwise L1, for the ablation without class weights or perceptual term.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_shapes(pred, target)?;
    Ok((pred - target.detach())?.abs()?.mean_all()?)
}

/// Binary cross-entropy on probabilities with soft targets.
pub fn bce_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_shapes(pred, target)?;
    const EPS: f64 = 1e-7;
    let p = pred.clamp(EPS, 1.0 - EPS)?;
    let t = target.detach();
    let one_minus_t = t.affine(-1.0, 1.0)?;
    let one_minus_p = p.affine(-1.0, 1.0)?;
    let ll = ((t * p.log()?)? + (one_minus_t * one_minus_p.log()?)?)?;
    Ok(ll.neg()?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn spec() -> NormalizationSpec {
        NormalizationSpec::analytic(100.0)
    }

    fn t(v: &[f64], shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn scalar(x: &Tensor) -> f64 {
        x.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
    }

    #[test]
    fn perfect_prediction_costs_nothing() {
        let a = t(&[0.1, 0.5, 0.9, 0.0], (1, 1, 2, 2));
        let l = cb_loss(&a, &a, 1.0, &ClassWeightTable::default(), &spec()).unwrap();
        assert_eq!(scalar(&l), 0.0);
    }

    #[test]
    fn single_pixel_hand_value() {
        // 0.7 in normalized space is about 24.3 mm/h, so pick a target inside (2, 6]
        let s = spec();
        let target = s.forward_value(4.0).unwrap();
        let pred = target - 0.2;
        let l = cb_loss(
            &t(&[pred], (1, 1, 1, 1)),
            &t(&[target], (1, 1, 1, 1)),
            1.0,
            &ClassWeightTable::default(),
            &s,
        )
        .unwrap();
        assert!((scalar(&l) - 5.0 * (0.04 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn linear_in_weights() {
        let p = t(&[0.1, 0.5, 0.3, 0.8], (1, 1, 2, 2));
        let y = t(&[0.2, 0.9, 0.6, 0.1], (1, 1, 2, 2));
        let base = ClassWeightTable::default();
        let doubled = ClassWeightTable {
            weights: base.weights.iter().map(|w| 2.0 * w).collect(),
            ..base.clone()
        };
        let a = scalar(&cb_loss(&p, &y, 1.0, &base, &spec()).unwrap());
        let b = scalar(&cb_loss(&p, &y, 1.0, &doubled, &spec()).unwrap());
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn degenerate_mixes_are_exact() {
        let p = t(&[0.1, 0.5, 0.3, 0.8], (1, 1, 2, 2));
        let y = t(&[0.2, 0.9, 0.6, 0.1], (1, 1, 2, 2));
        let pd = PerceptualDistance::default();
        let table = ClassWeightTable::default();
        let cb = scalar(&cb_loss(&p, &y, 1.0, &table, &spec()).unwrap());
        let lp = scalar(&pd.distance(&p, &y).unwrap());
        let with = |alpha| {
            let cfg = LcbConfig { alpha, beta: 1.0 };
            scalar(&lcb_loss(&p, &y, &cfg, &table, &spec(), &pd).unwrap())
        };
        assert_eq!(with(1.0), cb);
        assert_eq!(with(0.0), lp);
        assert!((with(0.6) - (0.6 * cb + 0.4 * lp)).abs() < 1e-12);
    }

    #[test]
    fn mismatched_shapes_error() {
        let a = t(&[0.0; 4], (1, 1, 2, 2));
        let b = t(&[0.0; 2], (1, 1, 1, 2));
        assert!(cb_loss(&a, &b, 1.0, &ClassWeightTable::default(), &spec()).is_err());
        assert!(l1_loss(&a, &b).is_err());
        assert!(bce_loss(&a, &b).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LcbConfig { alpha: 1.5, beta: 1.0 }.validate().is_err());
        assert!(LcbConfig { alpha: 0.5, beta: -1.0 }.validate().is_err());
        assert!(LcbConfig::default().validate().is_ok());
    }

    #[test]
    fn bce_floor_is_target_entropy() {
        let y = t(&[0.25, 0.5], (1, 1, 1, 2));
        let l = scalar(&bce_loss(&y, &y).unwrap());
        let h = |q: f64| -(q * q.ln() + (1.0 - q) * (1.0 - q).ln());
        assert!((l - 0.5 * (h(0.25) + h(0.5))).abs() < 1e-9);
    }

    #[test]
    fn weights_carry_no_gradient() {
        let p = Var::from_tensor(&t(&[0.3, 0.6], (1, 1, 1, 2))).unwrap();
        let y = t(&[0.5, 0.5], (1, 1, 1, 2));
        let l = cb_loss(p.as_tensor(), &y, 1.0, &ClassWeightTable::default(), &spec()).unwrap();
        let g = l.backward().unwrap();
        assert!(g.get(p.as_tensor()).is_some());
    }
}
