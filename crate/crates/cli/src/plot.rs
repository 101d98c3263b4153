//! `plot`: forecast panels and per-lead metric curves as PNG.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use image::{Rgb, RgbImage};
use ndarray::{Array2, ArrayD, Axis, Ix6};
use ndarray_npy::ReadNpyExt;

use nowcast_core::data::{FrameSource, NormalizationSpec};
use nowcast_core::metrics::MetricReport;

use crate::config::ExperimentConfig;
use crate::evaluate::{eval_dir, forecast_paths, ForecastManifest};
use crate::run::{RunLock, RunManifest};
use crate::train::load_splits;

const GAP: u32 = 4;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const INK: Rgb<u8> = Rgb([40, 40, 40]);
/// Rates marked on the colour bar, mm/h.
const BAR_TICKS: [f64; 4] = [2.0, 10.0, 18.0, 50.0];

/// Colour stops over the normalized (log-scaled) rate.
const STOPS: [(f64, [u8; 3]); 6] = [
    (0.0, [255, 255, 255]),
    (0.1, [190, 215, 240]),
    (0.3, [60, 120, 200]),
    (0.5, [40, 170, 80]),
    (0.7, [245, 210, 40]),
    (1.0, [200, 30, 30]),
];

/// Shared colour map. Input is the normalized rate, so the scale is logarithmic in
/// mm/h with limits fixed at `[0, clip_max]` for every panel.
pub fn colormap(y: f32) -> Rgb<u8> {
    let y = f64::from(y).clamp(0.0, 1.0);
    for w in STOPS.windows(2) {
        let ((a, ca), (b, cb)) = (w[0], w[1]);
        if y <= b {
            let t = (y - a) / (b - a);
            let mix = |i: usize| (f64::from(ca[i]) + t * (f64::from(cb[i]) - f64::from(ca[i]))).round() as u8;
            return Rgb([mix(0), mix(1), mix(2)]);
        }
    }
    Rgb(STOPS[STOPS.len() - 1].1)
}

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

/// Leads at whole hours, 1-based indices.
pub fn hourly_leads(lead_minutes: &[i64]) -> Vec<usize> {
    lead_minutes
        .iter()
        .enumerate()
        .filter(|(_, m)| *m % 60 == 0)
        .map(|(i, _)| i + 1)
        .collect()
}

/// A grid of panels: one row per entry, `columns` panels per row.
pub fn render_panels(rows: &[Vec<Array2<f32>>], spec: &NormalizationSpec) -> Result<RgbImage> {
    let (ph, pw) = rows
        .first()
        .and_then(|r| r.first())
        .map(|p| p.dim())
        .context("nothing to plot")?;
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols || r.iter().any(|p| p.dim() != (ph, pw))) {
        bail!("panel rows must have equal length and panel size");
    }
    let scale = (128 / pw.max(ph)).max(1) as u32;
    let (cell_w, cell_h) = (pw as u32 * scale, ph as u32 * scale);
    let bar_w = 12;
    let width = GAP + cols as u32 * (cell_w + GAP) + bar_w + 2 * GAP;
    let height = GAP + rows.len() as u32 * (cell_h + GAP);
    let mut img = RgbImage::from_pixel(width, height, WHITE);
    for (r, row) in rows.iter().enumerate() {
        for (c, panel) in row.iter().enumerate() {
            let (x0, y0) = (GAP + c as u32 * (cell_w + GAP), GAP + r as u32 * (cell_h + GAP));
            for ((i, j), &v) in panel.indexed_iter() {
                let colour = colormap(v);
                for dy in 0..scale {
                    for dx in 0..scale {
                        img.put_pixel(x0 + j as u32 * scale + dx, y0 + i as u32 * scale + dy, colour);
                    }
                }
            }
            outline(&mut img, x0, y0, cell_w, cell_h);
        }
    }
    // colour bar spanning the full height, ticks at fixed rates
    let bx = width - bar_w - GAP;
    let (top, bottom) = (GAP, height - GAP - 1);
    for y in top..=bottom {
        let v = (bottom - y) as f32 / (bottom - top).max(1) as f32;
        for x in bx..bx + bar_w {
            img.put_pixel(x, y, colormap(v));
        }
    }
    for rate in BAR_TICKS {
        let v = spec.threshold_to_unit(rate).clamp(0.0, 1.0);
        let y = bottom - (v * (bottom - top) as f64).round() as u32;
        for x in bx.saturating_sub(3)..bx {
            img.put_pixel(x, y, INK);
        }
    }
    outline(&mut img, bx, top, bar_w, bottom - top + 1);
    Ok(img)
}

fn outline(img: &mut RgbImage, x0: u32, y0: u32, w: u32, h: u32) {
    for x in x0..x0 + w {
        img.put_pixel(x, y0, INK);
        img.put_pixel(x, y0 + h - 1, INK);
    }
    for y in y0..y0 + h {
        img.put_pixel(x0, y, INK);
        img.put_pixel(x0 + w - 1, y, INK);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
    let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for k in 0..=n {
        let t = k as f64 / n as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        for (dx, dy) in [(0i64, 0i64), (1, 0), (0, 1)] {
            let (px, py) = (x.round() as i64 + dx, y.round() as i64 + dy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, c);
            }
        }
    }
}

/// One chart per metric (MSE, perceptual, first CSI threshold), one line per model
/// in palette order. Each chart is scaled to its own value range.
pub fn render_curves(reports: &[MetricReport]) -> Result<RgbImage> {
    type Pick = fn(&nowcast_core::metrics::LeadMetrics) -> Option<f64>;
    let picks: [Pick; 3] = [|l| Some(l.mse), |l| l.lpips, |l| l.csi.first().and_then(|c| c.csi)];
    let (cw, ch, pad) = (240u32, 160u32, 16u32);
    let mut img = RgbImage::from_pixel(picks.len() as u32 * (cw + pad) + pad, ch + 2 * pad, WHITE);
    for (k, pick) in picks.iter().enumerate() {
        let x0 = pad + k as u32 * (cw + pad);
        let values: Vec<Vec<Option<f64>>> = reports.iter().map(|r| r.per_lead.iter().map(pick).collect()).collect();
        let all: Vec<f64> = values.iter().flatten().flatten().copied().collect();
        let (lo, hi) = all
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        outline(&mut img, x0, pad, cw, ch);
        for (m, series) in values.iter().enumerate() {
            let colour = Rgb(PALETTE[m % PALETTE.len()]);
            let n = series.len().max(2) - 1;
            let at = |i: usize, v: f64| {
                (
                    x0 as f64 + 6.0 + i as f64 / n as f64 * (cw - 12) as f64,
                    pad as f64 + ch as f64 - 6.0 - (v - lo) / span * (ch - 12) as f64,
                )
            };
            for (i, w) in series.windows(2).enumerate() {
                if let (Some(a), Some(b)) = (w[0], w[1]) {
                    line(&mut img, at(i, a), at(i + 1, b), colour);
                }
            }
        }
    }
    Ok(img)
}

fn read_forecasts(path: &Path) -> Result<ndarray::Array6<f32>> {
    let f = File::open(path).with_context(|| format!("opening {}; run `nowcast evaluate` first", path.display()))?;
    let a = ArrayD::<f32>::read_npy(BufReader::new(f)).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    Ok(a.into_dimensionality::<Ix6>()?)
}

/// Model labels in table order.
fn evaluated_models(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let table = eval_dir(cfg).join("table.csv");
    let text = std::fs::read_to_string(&table)
        .with_context(|| format!("reading {}; run `nowcast evaluate` first", table.display()))?;
    Ok(text
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').next())
        .map(str::to_string)
        .collect())
}

pub fn plot(cfg: &ExperimentConfig, sample: usize) -> Result<Vec<PathBuf>> {
    let _lock = RunLock::acquire(&cfg.output.dir)?;
    let started = std::time::Instant::now();
    let [_, _, test] = load_splits(cfg)?;
    let labels = evaluated_models(cfg)?;
    let spec = cfg.spec();

    let mut reports = Vec::new();
    let mut model_rows = Vec::new();
    let mut leads: Option<Vec<i64>> = None;
    for label in &labels {
        let (npy, side) = forecast_paths(cfg, label);
        let fm: ForecastManifest = serde_json::from_slice(&std::fs::read(&side)?)?;
        let truth = test
            .get(sample)
            .with_context(|| format!("sample {sample} is outside the {}-sequence test split", test.len()))?;
        if fm.start_times.get(sample) != Some(&truth.start_time) {
            bail!("{label} forecasts are not aligned with test sample {sample}");
        }
        match &leads {
            None => leads = Some(fm.lead_times_minutes.clone()),
            Some(l) if *l != fm.lead_times_minutes => bail!("{label} has misaligned lead times"),
            _ => {}
        }
        if fm.lead_times_minutes.len() != truth.horizon() {
            bail!("{label} has {} leads, the truth has {}", fm.lead_times_minutes.len(), truth.horizon());
        }
        let f = read_forecasts(&npy)?;
        // ensemble mean of this sample, (h, C, H, W)
        let mean = f
            .index_axis(Axis(0), sample)
            .mean_axis(Axis(0))
            .context("empty ensemble")?;
        model_rows.push(mean);
        let report_path = eval_dir(cfg).join(format!("{label}.json"));
        reports.push(MetricReport::from_json(&std::fs::read_to_string(&report_path)?)?);
    }
    let leads = leads.context("no evaluated models to plot")?;
    let hourly = hourly_leads(&leads);
    let truth = &test[sample];
    let x0 = truth.lead(0).index_axis(Axis(0), 0).to_owned();
    let mut rows = vec![std::iter::once(x0.clone())
        .chain(hourly.iter().map(|&k| truth.lead(k).index_axis(Axis(0), 0).to_owned()))
        .collect::<Vec<_>>()];
    for m in &model_rows {
        rows.push(
            std::iter::once(x0.clone())
                .chain(hourly.iter().map(|&k| m.index_axis(Axis(0), k - 1).index_axis(Axis(0), 0).to_owned()))
                .collect(),
        );
    }
    let dir = cfg.output.dir.join("figures");
    std::fs::create_dir_all(&dir)?;
    let panels = dir.join(format!("sample_{sample:03}.png"));
    render_panels(&rows, &spec)?.save(&panels)?;
    let curves = dir.join("metrics.png");
    render_curves(&reports)?.save(&curves)?;

    let mut m = RunManifest::new("plot", None, cfg.model_hash(), cfg.seed);
    m.outputs = vec![panels.clone(), curves.clone()];
    m.timings.insert("plot".into(), started.elapsed().as_secs_f64());
    m.write(&cfg.output.dir)?;
    Ok(vec![panels, curves])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_is_monotone_in_position_and_fixed_at_ends() {
        assert_eq!(colormap(0.0), WHITE);
        assert_eq!(colormap(1.0), Rgb([200, 30, 30]));
        assert_eq!(colormap(2.0), colormap(1.0));
    }

    #[test]
    fn hourly_undersampling() {
        assert_eq!(hourly_leads(&[30, 60, 90, 120, 150, 180, 210, 240]), vec![2, 4, 6, 8]);
    }

    #[test]
    fn panel_grid_layout() {
        let p = Array2::<f32>::from_elem((32, 32), 0.5);
        let rows = vec![vec![p.clone(); 5]; 5];
        let img = render_panels(&rows, &NormalizationSpec::default()).unwrap();
        // 128 px cells, 4 px gaps, 12 px bar
        assert_eq!(img.width(), 4 + 5 * 132 + 12 + 8);
        assert_eq!(img.height(), 4 + 5 * 132);
        assert!(render_panels(&[vec![p.clone()], vec![]], &NormalizationSpec::default()).is_err());
    }
}
