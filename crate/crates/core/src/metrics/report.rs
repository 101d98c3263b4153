use std::fmt::Write as _;

use candle_core::{DType, Device, Tensor};
use ndarray::{ArrayView4, ArrayView5, Axis};
use serde::{Deserialize, Serialize};

use super::scores::{crps_ensemble, mse, ContingencyCounts, SpreadSkill};
use crate::baselines::BaselineForecast;
use crate::data::{NormalizationSpec, RainSequence};
use crate::dyffusion::EnsembleForecast;
use crate::losses::PerceptualDistance;
use crate::{Error, Result};

/// Placeholder for scores a model does not produce or that are undefined.
pub const ABSENT: &str = "\u{2212}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    /// CSI thresholds in mm/h.
    pub thresholds: Vec<f64>,
    /// Use the `X (X - 1)` spread denominator in CRPS.
    pub fair_crps: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![2.0, 10.0, 18.0],
            fair_crps: false,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::config("at least one CSI threshold is required"));
        }
        if let Some(&t) = self.thresholds.iter().find(|t| !(**t >= 0.0) || !t.is_finite()) {
            return Err(Error::NegativeRate(t));
        }
        Ok(())
    }
}

/// Column label for a threshold: `CSI_2`, `CSI_0.5`.
pub fn threshold_label(t: f64) -> String {
    if t.fract() == 0.0 {
        format!("CSI_{}", t as i64)
    } else {
        format!("CSI_{t}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScore {
    pub threshold: f64,
    /// `None` when no pixel exceeded the threshold in either field.
    pub csi: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadMetrics {
    /// 1-based lead index.
    pub lead: usize,
    pub mse: f64,
    pub lpips: Option<f64>,
    pub csi: Vec<ThresholdScore>,
    pub crps: Option<f64>,
    pub ssr: Option<f64>,
}

/// Horizon averages; undefined per-lead values are excluded, and a field with no
/// defined lead is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedMetrics {
    pub mse: f64,
    pub lpips: Option<f64>,
    pub csi: Vec<ThresholdScore>,
    /// Per threshold, how many leads entered the CSI average.
    pub csi_defined_leads: Vec<usize>,
    pub crps: Option<f64>,
    pub ssr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub probabilistic: bool,
    pub thresholds: Vec<f64>,
    pub per_lead: Vec<LeadMetrics>,
    pub averaged: AveragedMetrics,
    pub sample_count: usize,
    pub wall_time_s: Option<f64>,
}

fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let (sum, n) = values
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    ((n > 0).then(|| sum / n as f64), n)
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, Default)]
struct LeadAcc {
    mse: f64,
    lpips: f64,
    counts: Vec<ContingencyCounts>,
    crps: f64,
    spread: f64,
    mean_sq_err: f64,
}

/// Accumulates scores over test samples. Sums run in insertion order, so a fixed
/// sample order gives bit-identical reports.
pub struct Evaluator<'a> {
    model: String,
    cfg: MetricConfig,
    spec: &'a NormalizationSpec,
    perceptual: Option<&'a PerceptualDistance>,
    probabilistic: Option<bool>,
    leads: Vec<LeadAcc>,
    samples: usize,
}

fn to_tensor(a: ArrayView4<'_, f32>) -> Result<Tensor> {
    let dims = a.shape().to_vec();
    Ok(Tensor::from_iter(a.iter().copied(), &Device::Cpu)?.reshape(dims)?)
}

impl<'a> Evaluator<'a> {
    pub fn new(
        model: impl Into<String>,
        cfg: MetricConfig,
        spec: &'a NormalizationSpec,
        perceptual: Option<&'a PerceptualDistance>,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            model: model.into(),
            cfg,
            spec,
            perceptual,
            probabilistic: None,
            leads: Vec::new(),
            samples: 0,
        })
    }

    pub fn sample_count(&self) -> usize {
        self.samples
    }

    fn begin(&mut self, probabilistic: bool, h: usize) -> Result<()> {
        match self.probabilistic {
            Some(p) if p != probabilistic => {
                return Err(Error::Contract(
                    "cannot mix ensemble and deterministic forecasts in one report".into(),
                ))
            }
            _ => self.probabilistic = Some(probabilistic),
        }
        if self.leads.is_empty() {
            let empty = LeadAcc {
                counts: vec![ContingencyCounts::default(); self.cfg.thresholds.len()],
                ..Default::default()
            };
            self.leads = vec![empty; h];
        } else if self.leads.len() != h {
            return Err(Error::ShapeMismatch {
                expected: vec![self.leads.len()],
                actual: vec![h],
            });
        }
        Ok(())
    }

    /// Deterministic scores for one sample; `pred` and `truth` are `(h, C, H, W)`.
    fn add_point(&mut self, pred: ArrayView4<'_, f32>, truth: ArrayView4<'_, f32>) -> Result<()> {
        if pred.shape() != truth.shape() {
            return Err(Error::ShapeMismatch {
                expected: truth.shape().to_vec(),
                actual: pred.shape().to_vec(),
            });
        }
        let lpips: Option<Vec<f64>> = match self.perceptual {
            Some(p) => {
                let d = p.per_sample(&to_tensor(pred)?, &to_tensor(truth)?)?;
                Some(d.to_dtype(DType::F64)?.to_vec1()?)
            }
            None => None,
        };
        for (k, acc) in self.leads.iter_mut().enumerate() {
            let (p, t) = (pred.index_axis(Axis(0), k), truth.index_axis(Axis(0), k));
            acc.mse += mse(p, t)?;
            if let Some(l) = &lpips {
                acc.lpips += l[k];
            }
            for (c, &thr) in acc.counts.iter_mut().zip(&self.cfg.thresholds) {
                c.add(&ContingencyCounts::from_normalized(p, t, thr, self.spec)?);
            }
        }
        Ok(())
    }

    /// `members`: `(X, h, C, H, W)`; `truth`: `(h, C, H, W)`.
    pub fn add_ensemble(&mut self, members: ArrayView5<'_, f32>, truth: ArrayView4<'_, f32>) -> Result<()> {
        let x = members.len_of(Axis(0));
        if x == 0 {
            return Err(Error::EmptyEnsemble);
        }
        if members.shape()[1..] != *truth.shape() {
            return Err(Error::ShapeMismatch {
                expected: truth.shape().to_vec(),
                actual: members.shape()[1..].to_vec(),
            });
        }
        self.begin(true, truth.len_of(Axis(0)))?;
        let mean = members.map_axis(Axis(0), |m| {
            ((m.iter().map(|&v| f64::from(v)).sum::<f64>() / x as f64) as f32).clamp(0.0, 1.0)
        });
        self.add_point(mean.view(), truth)?;
        for (k, acc) in self.leads.iter_mut().enumerate() {
            let m = members.index_axis(Axis(1), k);
            let t = truth.index_axis(Axis(0), k);
            acc.crps += crps_ensemble(m, t, self.cfg.fair_crps)?;
            let ss = SpreadSkill::compute(m, t)?;
            acc.spread += ss.spread;
            acc.mean_sq_err += ss.mean_sq_err;
        }
        self.samples += 1;
        Ok(())
    }

    /// `pred` and `truth`: `(h, C, H, W)`.
    pub fn add_deterministic(&mut self, pred: ArrayView4<'_, f32>, truth: ArrayView4<'_, f32>) -> Result<()> {
        self.begin(false, truth.len_of(Axis(0)))?;
        self.add_point(pred, truth)?;
        self.samples += 1;
        Ok(())
    }

    pub fn finish(self, wall_time_s: Option<f64>) -> Result<MetricReport> {
        if self.samples == 0 {
            return Err(Error::Contract(format!("no samples were scored for {}", self.model)));
        }
        let n = self.samples as f64;
        let probabilistic = self.probabilistic.unwrap_or(false);
        let per_lead: Vec<LeadMetrics> = self
            .leads
            .iter()
            .enumerate()
            .map(|(k, a)| LeadMetrics {
                lead: k + 1,
                mse: a.mse / n,
                lpips: self.perceptual.map(|_| a.lpips / n),
                csi: self
                    .cfg
                    .thresholds
                    .iter()
                    .zip(&a.counts)
                    .map(|(&threshold, c)| ThresholdScore { threshold, csi: c.csi() })
                    .collect(),
                crps: probabilistic.then(|| a.crps / n),
                ssr: if probabilistic {
                    SpreadSkill {
                        spread: a.spread / n,
                        mean_sq_err: a.mean_sq_err / n,
                    }
                    .ratio()
                } else {
                    None
                },
            })
            .collect();
        let leads = per_lead.len() as f64;
        let (csi, csi_defined_leads): (Vec<_>, Vec<_>) = self
            .cfg
            .thresholds
            .iter()
            .enumerate()
            .map(|(i, &threshold)| {
                let (v, used) = mean_defined(per_lead.iter().map(|l| l.csi[i].csi));
                (ThresholdScore { threshold, csi: v }, used)
            })
            .unzip();
        let averaged = AveragedMetrics {
            mse: per_lead.iter().map(|l| l.mse).sum::<f64>() / leads,
            lpips: mean_defined(per_lead.iter().map(|l| l.lpips)).0,
            csi,
            csi_defined_leads,
            crps: mean_defined(per_lead.iter().map(|l| l.crps)).0,
            ssr: mean_defined(per_lead.iter().map(|l| l.ssr)).0,
        };
        Ok(MetricReport {
            model: self.model,
            probabilistic,
            thresholds: self.cfg.thresholds,
            per_lead,
            averaged,
            sample_count: self.samples,
            wall_time_s,
        })
    }
}

/// A forecast of either kind, for scoring.
#[derive(Debug, Clone, Copy)]
pub enum Forecast<'a> {
    Ensemble(&'a EnsembleForecast),
    Deterministic(&'a BaselineForecast),
}

impl Forecast<'_> {
    pub fn horizon(&self) -> usize {
        match self {
            Forecast::Ensemble(f) => f.horizon(),
            Forecast::Deterministic(f) => f.frames.len_of(Axis(0)),
        }
    }
}

/// Adds one forecast/truth pair to `eval`.
pub fn score_into(eval: &mut Evaluator<'_>, forecast: Forecast<'_>, truth: &RainSequence) -> Result<()> {
    let targets = truth.targets();
    if forecast.horizon() != targets.len_of(Axis(0)) {
        return Err(Error::ShapeMismatch {
            expected: vec![targets.len_of(Axis(0))],
            actual: vec![forecast.horizon()],
        });
    }
    match forecast {
        Forecast::Ensemble(f) => eval.add_ensemble(f.members.view(), targets),
        Forecast::Deterministic(f) => eval.add_deterministic(f.frames.view(), targets),
    }
}

/// Scores a single forecast against its sequence.
pub fn evaluate_rollout(
    model: &str,
    forecast: Forecast<'_>,
    truth: &RainSequence,
    spec: &NormalizationSpec,
    perceptual: Option<&PerceptualDistance>,
    cfg: &MetricConfig,
    wall_time_s: Option<f64>,
) -> Result<MetricReport> {
    let mut eval = Evaluator::new(model, cfg.clone(), spec, perceptual)?;
    score_into(&mut eval, forecast, truth)?;
    eval.finish(wall_time_s)
}

fn cell(v: Option<f64>, precision: usize) -> String {
    match v {
        Some(v) => format!("{v:.precision$}"),
        None => ABSENT.to_string(),
    }
}

/// One row per report, horizon-averaged, in the column order
/// `model,MSE,LPIPS,CSI_*,CRPS,SSR,Time`.
pub fn render_csv(reports: &[MetricReport]) -> Result<String> {
    let thresholds = match reports.first() {
        Some(r) => &r.thresholds,
        None => &MetricConfig::default().thresholds,
    };
    if reports.iter().any(|r| &r.thresholds != thresholds) {
        return Err(Error::Contract("reports use different CSI thresholds".into()));
    }
    let mut out = String::from("model,MSE,LPIPS");
    for &t in thresholds {
        write!(out, ",{}", threshold_label(t)).expect("write to String");
    }
    out.push_str(",CRPS,SSR,Time\n");
    for r in reports {
        let a = &r.averaged;
        write!(out, "{},{},{}", r.model, cell(Some(a.mse), 6), cell(a.lpips, 6)).expect("write to String");
        for s in &a.csi {
            write!(out, ",{}", cell(s.csi, 4)).expect("write to String");
        }
        writeln!(
            out,
            ",{},{},{}",
            cell(a.crps, 6),
            cell(a.ssr, 4),
            cell(r.wall_time_s, 2)
        )
        .expect("write to String");
    }
    Ok(out)
}
