use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Weights of the forecastor objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompositeLossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Epochs over which the initial-forecast weight decays from 1 to 0.
    pub alpha_decay_epochs: usize,
}

impl Default for CompositeLossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.5,
            alpha_decay_epochs: 20,
        }
    }
}

impl CompositeLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::config("lambda1 and lambda2 must be non-negative"));
        }
        Ok(())
    }
}

/// Linear decay `max(0, 1 - epoch / decay)`. A zero decay length means no warm-up.
pub fn alpha_schedule(epoch: usize, cfg: &CompositeLossConfig) -> f64 {
    if cfg.alpha_decay_epochs == 0 {
        return 0.0;
    }
    (1.0 - epoch as f64 / cfg.alpha_decay_epochs as f64).max(0.0)
}

pub fn composite_loss(
    l_initial: f64,
    l_forecast: f64,
    l_onestep: f64,
    epoch: usize,
    cfg: &CompositeLossConfig,
) -> f64 {
    let a = alpha_schedule(epoch, cfg);
    if a == 1.0 {
        return l_initial;
    }
    let rest = cfg.lambda1 * l_forecast + cfg.lambda2 * l_onestep;
    if a == 0.0 {
        return rest;
    }
    a * l_initial + (1.0 - a) * rest
}

/// Tensor form of [`composite_loss`]. Terms with zero weight are dropped from the
/// graph, so they may be `None`.
pub fn composite_loss_tensor(
    l_initial: Option<&Tensor>,
    l_forecast: Option<&Tensor>,
    l_onestep: Option<&Tensor>,
    epoch: usize,
    cfg: &CompositeLossConfig,
) -> Result<Tensor> {
    let a = alpha_schedule(epoch, cfg);
    let mut terms = Vec::new();
    let mut push = |coef: f64, term: Option<&Tensor>, name: &str| -> Result<()> {
        if coef == 0.0 {
            return Ok(());
        }
        let t = term.ok_or_else(|| Error::Contract(format!("{name} term required at epoch {epoch}")))?;
        terms.push(if coef == 1.0 { t.clone() } else { (t * coef)? });
        Ok(())
    };
    push(a, l_initial, "initial")?;
    push((1.0 - a) * cfg.lambda1, l_forecast, "forecast")?;
    push((1.0 - a) * cfg.lambda2, l_onestep, "one-step")?;
    let mut iter = terms.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::Contract("composite loss has no active terms".into()))?;
    iter.try_fold(first, |acc, t| Ok((acc + t)?))
}

/// Which terms [`composite_loss_tensor`] needs at this epoch.
pub fn active_terms(epoch: usize, cfg: &CompositeLossConfig) -> (bool, bool, bool) {
    let a = alpha_schedule(epoch, cfg);
    (a > 0.0, (1.0 - a) * cfg.lambda1 > 0.0, (1.0 - a) * cfg.lambda2 > 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use proptest::prelude::*;

    #[test]
    fn schedule_endpoints() {
        let c = CompositeLossConfig::default();
        assert_eq!(alpha_schedule(0, &c), 1.0);
        assert_eq!(alpha_schedule(10, &c), 0.5);
        assert_eq!(alpha_schedule(20, &c), 0.0);
        assert_eq!(alpha_schedule(400, &c), 0.0);
    }

    #[test]
    fn composite_hand_values() {
        let c = CompositeLossConfig::default();
        assert_eq!(composite_loss(2.0, 1.0, 3.0, 10, &c), 2.0);
        assert_eq!(composite_loss(7.25, 1.0, 3.0, 0, &c), 7.25);
        assert_eq!(composite_loss(7.25, 1.0, 3.0, 25, &c), 2.0);
    }

    #[test]
    fn tensor_form_matches_scalar_form() {
        let c = CompositeLossConfig::default();
        let s = |v: f64| Tensor::new(v, &Device::Cpu).unwrap();
        for epoch in [0, 5, 10, 19, 20, 30] {
            let t = composite_loss_tensor(Some(&s(2.0)), Some(&s(1.0)), Some(&s(3.0)), epoch, &c)
                .unwrap()
                .to_scalar::<f64>()
                .unwrap();
            assert!((t - composite_loss(2.0, 1.0, 3.0, epoch, &c)).abs() < 1e-15);
        }
        let only_initial = composite_loss_tensor(Some(&s(4.0)), None, None, 0, &c).unwrap();
        assert_eq!(only_initial.to_scalar::<f64>().unwrap(), 4.0);
        assert!(composite_loss_tensor(None, Some(&s(1.0)), Some(&s(1.0)), 0, &c).is_err());
        assert_eq!(active_terms(0, &c), (true, false, false));
        assert_eq!(active_terms(20, &c), (false, true, true));
    }

    proptest! {
        #[test]
        fn endpoint_independence(i in 0.0f64..10.0, f in 0.0f64..10.0, o in 0.0f64..10.0, g in 0.0f64..10.0) {
            let c = CompositeLossConfig::default();
            prop_assert_eq!(composite_loss(i, f, o, 0, &c), composite_loss(i, g, g, 0, &c));
            prop_assert_eq!(composite_loss(i, f, o, 20, &c), composite_loss(g, f, o, 20, &c));
        }

        #[test]
        fn alpha_in_unit_interval(epoch in 0usize..1000) {
            let a = alpha_schedule(epoch, &CompositeLossConfig::default());
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
