//! Rollout metrics (MSE, PSNR, SSIM), the all-black baseline, CSV tables
//! and PGM renders.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::env::{read_dataset, to_u8, Episode};
use crate::error::{config_err, shape_err, Result};
use crate::grid::Field;
use crate::io::write_atomic;
use crate::model::{read_checkpoint, rollout, FloWMConfig, Params};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const PSNR_CAP: f64 = 100.0;

/// Compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    pub fn add(&mut self, x: f64) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

fn same_shape(a: &Field, b: &Field) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("prediction {:?} vs target {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// Mean squared error over pixels.
pub fn mse(pred: &Field, target: &Field) -> Result<f64> {
    same_shape(pred, target)?;
    let s: f64 = pred
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(s / pred.len() as f64)
}

/// `10·log10(peak² / mse)`, capped at [`PSNR_CAP`] when `mse < 1e-10`.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr(pred: &Field, target: &Field, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, target)?, peak))
}

/// Summed-area table with a zero border: `t[(y+1)(w+1) + x+1] = Σ_{≤y, ≤x}`.
fn integral(w: usize, h: usize, value: impl Fn(usize) -> f64) -> Vec<f64> {
    let stride = w + 1;
    let mut t = vec![0.0; stride * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += value(y * w + x);
            t[(y + 1) * stride + x + 1] = t[y * stride + x + 1] + row;
        }
    }
    t
}

fn box_sum(t: &[f64], stride: usize, y: usize, x: usize, k: usize) -> f64 {
    t[(y + k) * stride + x + k] - t[y * stride + x + k] - t[(y + k) * stride + x] + t[y * stride + x]
}

/// Mean SSIM over all valid 7×7 uniform windows, sample covariances,
/// `K1 = 0.01`, `K2 = 0.03`, dynamic range 1.
pub fn ssim(pred: &Field, target: &Field) -> Result<f64> {
    same_shape(pred, target)?;
    let (c, h, w) = pred.shape();
    if c != 1 {
        return shape_err(format!("ssim expects one channel, got {c}"));
    }
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return shape_err(format!("{h}x{w} frame is smaller than the {k}x{k} SSIM window"));
    }
    let (x, y) = (pred.as_slice(), target.as_slice());
    let sx = integral(w, h, |i| x[i]);
    let sy = integral(w, h, |i| y[i]);
    let sxx = integral(w, h, |i| x[i] * x[i]);
    let syy = integral(w, h, |i| y[i] * y[i]);
    let sxy = integral(w, h, |i| x[i] * y[i]);
    let n = (k * k) as f64;
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let stride = w + 1;
    let mut total = KahanSum::default();
    for wy in 0..=h - k {
        for wx in 0..=w - k {
            let bs = |t: &[f64]| box_sum(t, stride, wy, wx, k);
            let (mx, my) = (bs(&sx) / n, bs(&sy) / n);
            let vx = (bs(&sxx) - n * mx * mx) / (n - 1.0);
            let vy = (bs(&syy) - n * my * my) / (n - 1.0);
            let cxy = (bs(&sxy) - n * mx * my) / (n - 1.0);
            let num = (2.0 * mx * my + c1) * (2.0 * cxy + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            total.add(num / den);
        }
    }
    Ok(total.value() / ((h - k + 1) * (w - k + 1)) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameMetrics {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn frame_metrics(pred: &Field, target: &Field) -> Result<FrameMetrics> {
    let m = mse(pred, target)?;
    Ok(FrameMetrics {
        mse: m,
        psnr: psnr_from_mse(m, 1.0),
        ssim: ssim(pred, target)?,
    })
}

/// Per-timestep metrics averaged over episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSeries {
    pub per_step: Vec<FrameMetrics>,
    pub episodes: usize,
}

impl MetricSeries {
    /// Averages per-episode curves in the given order with compensated sums.
    pub fn from_episodes(curves: &[Vec<FrameMetrics>]) -> Result<Self> {
        let Some(first) = curves.first() else {
            return config_err("no episodes to aggregate");
        };
        let len = first.len();
        if curves.iter().any(|c| c.len() != len) {
            return shape_err("episode curves differ in length");
        }
        let n = curves.len() as f64;
        let per_step = (0..len)
            .map(|t| {
                let (mut m, mut p, mut s) = (KahanSum::default(), KahanSum::default(), KahanSum::default());
                for c in curves {
                    m.add(c[t].mse);
                    p.add(c[t].psnr);
                    s.add(c[t].ssim);
                }
                FrameMetrics {
                    mse: m.value() / n,
                    psnr: p.value() / n,
                    ssim: s.value() / n,
                }
            })
            .collect();
        Ok(Self {
            per_step,
            episodes: curves.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.per_step.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_step.is_empty()
    }

    /// Means over the first `horizon` prediction steps.
    pub fn mean_over(&self, horizon: usize) -> Result<FrameMetrics> {
        if horizon == 0 || horizon > self.per_step.len() {
            return config_err(format!(
                "horizon {horizon} outside 1..={}",
                self.per_step.len()
            ));
        }
        let (mut m, mut p, mut s) = (KahanSum::default(), KahanSum::default(), KahanSum::default());
        for f in &self.per_step[..horizon] {
            m.add(f.mse);
            p.add(f.psnr);
            s.add(f.ssim);
        }
        let n = horizon as f64;
        Ok(FrameMetrics {
            mse: m.value() / n,
            psnr: p.value() / n,
            ssim: s.value() / n,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub label: String,
    pub model: MetricSeries,
    pub baseline: MetricSeries,
    pub horizons: Vec<usize>,
}

/// Rolls the model out on every episode for `max(horizons)` steps after
/// `obs_len` context frames and scores it next to the all-black predictor.
pub fn evaluate_params(
    params: &Params,
    cfg: &FloWMConfig,
    episodes: &[Episode],
    obs_len: usize,
    horizons: &[usize],
    label: &str,
) -> Result<Evaluation> {
    let Some(&longest) = horizons.iter().max() else {
        return config_err("no horizons given");
    };
    if horizons.contains(&0) {
        return config_err("horizons must be positive");
    }
    if episodes.is_empty() {
        return config_err("no episodes to evaluate");
    }
    if obs_len < 1 {
        return config_err("obs_len must be at least 1");
    }
    for (i, e) in episodes.iter().enumerate() {
        if e.frames.len() < obs_len + longest {
            return config_err(format!(
                "episode {i} has {} frames; {obs_len} context + horizon {longest} needed",
                e.frames.len()
            ));
        }
    }
    let black = Field::zeros(1, cfg.window_size, cfg.window_size);
    let per: Vec<Result<(Vec<FrameMetrics>, Vec<FrameMetrics>)>> = episodes
        .par_iter()
        .map(|e| {
            let preds = rollout(params, cfg, &e.frames[..obs_len], &e.actions, longest)?;
            let targets = &e.frames[obs_len..obs_len + longest];
            let model = preds
                .iter()
                .zip(targets)
                .map(|(p, t)| frame_metrics(p, t))
                .collect::<Result<Vec<_>>>()?;
            let base = targets
                .iter()
                .map(|t| frame_metrics(&black, t))
                .collect::<Result<Vec<_>>>()?;
            Ok((model, base))
        })
        .collect();
    let mut model = Vec::with_capacity(per.len());
    let mut base = Vec::with_capacity(per.len());
    for r in per {
        let (m, b) = r?;
        model.push(m);
        base.push(b);
    }
    Ok(Evaluation {
        label: label.to_string(),
        model: MetricSeries::from_episodes(&model)?,
        baseline: MetricSeries::from_episodes(&base)?,
        horizons: horizons.to_vec(),
    })
}

/// Loads a checkpoint and a dataset and evaluates.
pub fn evaluate(checkpoint: &Path, data: &Path, obs_len: usize, horizons: &[usize]) -> Result<Evaluation> {
    let (cfg, params) = read_checkpoint(checkpoint)?;
    let episodes = read_dataset(data)?;
    let label = cfg.ablation().map_or("custom", |a| a.name());
    evaluate_params(&params, &cfg, &episodes, obs_len, horizons, label)
}

pub const BASELINE_LABEL: &str = "all-black";

/// Per-timestep CSV: `model,t,mse,psnr,ssim` with `t` counted from 1.
pub fn metrics_csv(evals: &[Evaluation]) -> String {
    let mut s = String::from("model,t,mse,psnr,ssim\n");
    let mut rows: Vec<(&str, &MetricSeries)> = evals.iter().map(|e| (e.label.as_str(), &e.model)).collect();
    if let Some(e) = evals.first() {
        rows.push((BASELINE_LABEL, &e.baseline));
    }
    for (label, series) in rows {
        for (t, f) in series.per_step.iter().enumerate() {
            writeln!(s, "{label},{},{:e},{:e},{:e}", t + 1, f.mse, f.psnr, f.ssim).expect("string write");
        }
    }
    s
}

/// One row per model plus the baseline row; `mse@h,psnr@h,ssim@h` for each horizon.
pub fn summary_csv(evals: &[Evaluation]) -> Result<String> {
    let Some(first) = evals.first() else {
        return config_err("nothing to summarize");
    };
    let horizons = &first.horizons;
    let mut s = String::from("model");
    for h in horizons {
        write!(s, ",mse@{h},psnr@{h},ssim@{h}").expect("string write");
    }
    s.push('\n');
    let mut rows: Vec<(&str, &MetricSeries)> = evals.iter().map(|e| (e.label.as_str(), &e.model)).collect();
    rows.push((BASELINE_LABEL, &first.baseline));
    for (label, series) in rows {
        s.push_str(label);
        for &h in horizons {
            let m = series.mean_over(h)?;
            write!(s, ",{:e},{:e},{:e}", m.mse, m.psnr, m.ssim).expect("string write");
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn write_eval_outputs(out_dir: &Path, evals: &[Evaluation]) -> Result<()> {
    write_atomic(&out_dir.join("metrics.csv"), metrics_csv(evals).as_bytes())?;
    write_atomic(&out_dir.join("summary.csv"), summary_csv(evals)?.as_bytes())
}

/// Binary 8-bit PGM of the first channel, `round(255·clamp(v, 0, 1))` per pixel.
pub fn encode_pgm(f: &Field) -> Vec<u8> {
    let (_, h, w) = f.shape();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(f.plane(0).iter().map(|&v| to_u8(v)));
    out
}

/// Ground truth above prediction, one column per timestep, separated by
/// mid-gray lines.
pub fn strip(gt: &[Field], pred: &[Field]) -> Result<Field> {
    if gt.len() != pred.len() || gt.is_empty() {
        return shape_err("strip needs equally many non-zero ground-truth and predicted frames");
    }
    let (_, h, w) = gt[0].shape();
    let n = gt.len();
    let (sh, sw) = (2 * h + 1, n * w + n - 1);
    let mut s = Field::constant(1, sh, sw, 0.5);
    for (i, (g, p)) in gt.iter().zip(pred).enumerate() {
        same_shape(g, p)?;
        if g.shape() != (g.channels(), h, w) {
            return shape_err("strip frames differ in size");
        }
        let x0 = i * (w + 1);
        for y in 0..h {
            for x in 0..w {
                s.set(0, y, x0 + x, g.at(0, y, x));
                s.set(0, h + 1 + y, x0 + x, p.at(0, y, x));
            }
        }
    }
    Ok(s)
}

/// Writes `gt_NNN.pgm`, `pred_NNN.pgm` and `strip.pgm`; returns the paths.
pub fn render_rollout(
    params: &Params,
    cfg: &FloWMConfig,
    episode: &Episode,
    obs_len: usize,
    horizon: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if episode.frames.len() < obs_len + horizon {
        return config_err(format!(
            "episode has {} frames; {obs_len} context + horizon {horizon} needed",
            episode.frames.len()
        ));
    }
    if obs_len < 1 {
        return config_err("obs_len must be at least 1");
    }
    let preds = rollout(params, cfg, &episode.frames[..obs_len], &episode.actions, horizon)?;
    let gt = &episode.frames[obs_len..obs_len + horizon];
    let mut paths = Vec::with_capacity(2 * horizon + 1);
    for (t, (g, p)) in gt.iter().zip(&preds).enumerate() {
        for (name, f) in [("gt", g), ("pred", p)] {
            let path = out_dir.join(format!("{name}_{t:03}.pgm"));
            write_atomic(&path, &encode_pgm(f))?;
            paths.push(path);
        }
    }
    let path = out_dir.join("strip.pgm");
    write_atomic(&path, &encode_pgm(&strip(gt, &preds)?))?;
    paths.push(path);
    Ok(paths)
}

#[cfg(test)]
mod tests;
