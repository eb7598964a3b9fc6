//! Training: MSE over predicted frames, explicit BPTT, Adam with global-norm
//! clipping, seeded shuffling and checkpointing.

mod backward;

pub use backward::{backward, forward_tape, loss_and_grad, Tape};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::env::{read_dataset, Episode};
use crate::error::{config_err, shape_err, Error, Result};
use crate::grid::Field;
use crate::model::{rollout, write_checkpoint, FloWMConfig, Params};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
    pub epochs: usize,
    pub obs_len: usize,
    pub pred_len: usize,
    /// Horizon of the second validation column.
    pub long_pred_len: usize,
    pub seed: u64,
    /// Sequential batch evaluation on the calling thread.
    pub deterministic: bool,
    /// Validate every this many optimizer steps (0: only at the end).
    pub val_every: usize,
    /// At most this many validation episodes are rolled out.
    pub val_episodes: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            grad_clip_norm: 1.0,
            epochs: 50,
            obs_len: 50,
            pred_len: 20,
            long_pred_len: 150,
            seed: 0,
            deterministic: false,
            val_every: 100,
            val_episodes: 64,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    /// CPU-scale run: 30 observed + 10 predicted frames, batch 8.
    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            obs_len: 30,
            pred_len: 10,
            long_pred_len: 30,
            val_every: 50,
            val_episodes: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.obs_len < 1 || self.pred_len < 1 {
            return config_err("obs_len and pred_len must be at least 1");
        }
        if self.batch_size < 1 {
            return config_err("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return config_err("learning_rate must be positive");
        }
        if !(self.grad_clip_norm > 0.0) {
            return config_err("grad_clip_norm must be positive");
        }
        Ok(())
    }
}

/// `(1/P) Σ_t ||pred_t − target_t||²`: squared L2 per frame, averaged over frames.
pub fn loss_mse(pred: &[Field], target: &[Field]) -> Result<f64> {
    if pred.len() != target.len() {
        return shape_err(format!("{} predictions vs {} targets", pred.len(), target.len()));
    }
    if pred.is_empty() {
        return shape_err("loss over zero frames");
    }
    let mut total = 0.0;
    for (p, t) in pred.iter().zip(target) {
        if p.shape() != t.shape() {
            return shape_err(format!("prediction {:?} vs target {:?}", p.shape(), t.shape()));
        }
        total += p
            .as_slice()
            .iter()
            .zip(t.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total / pred.len() as f64)
}

/// Scales `grads` so its global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_by_norm(grads: &mut Params, max_norm: f64) -> f64 {
    let norm = grads.l2_norm();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &Params) -> Self {
        let n = params.param_count();
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut Params, grads: &Params, state: &mut AdamState, lr: f64) -> Result<()> {
    let n = params.param_count();
    if grads.param_count() != n || state.m.len() != n || state.v.len() != n {
        return shape_err("Adam state, gradients and parameters differ in size");
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (((p, g), m), v) in params
        .values_mut()
        .zip(grads.values())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p -= lr * mhat / (vhat.sqrt() + state.eps);
    }
    Ok(())
}

/// Mean loss and mean gradient over a batch. Per-episode results are summed
/// in batch order whether or not they were computed in parallel.
pub fn batch_loss_and_grad(
    params: &Params,
    cfg: &FloWMConfig,
    batch: &[&Episode],
    obs_len: usize,
    pred_len: usize,
    parallel: bool,
) -> Result<(f64, Params)> {
    if batch.is_empty() {
        return config_err("empty batch");
    }
    let one = |ep: &&Episode| loss_and_grad(params, cfg, &ep.frames, &ep.actions, obs_len, pred_len);
    let results: Vec<Result<(f64, Params)>> = if parallel {
        batch.par_iter().map(one).collect()
    } else {
        batch.iter().map(one).collect()
    };
    let mut loss = 0.0;
    let mut grads = params.zeros_like();
    for r in results {
        let (l, g) = r?;
        loss += l;
        grads.accumulate(&g);
    }
    let s = 1.0 / batch.len() as f64;
    grads.values_mut().for_each(|g| *g *= s);
    Ok((loss * s, grads))
}

/// Per-pixel MSE of `horizon`-step rollouts averaged over the episodes long
/// enough to score. `None` if no episode qualifies.
pub fn rollout_mse(
    params: &Params,
    cfg: &FloWMConfig,
    episodes: &[Episode],
    obs_len: usize,
    horizon: usize,
    parallel: bool,
) -> Result<Option<f64>> {
    let usable: Vec<&Episode> = episodes
        .iter()
        .filter(|e| e.frames.len() >= obs_len + horizon)
        .collect();
    if usable.is_empty() {
        return Ok(None);
    }
    let one = |ep: &&Episode| -> Result<f64> {
        let preds = rollout(params, cfg, &ep.frames[..obs_len], &ep.actions, horizon)?;
        let target = &ep.frames[obs_len..obs_len + horizon];
        let pixels = (horizon * cfg.window_size * cfg.window_size) as f64;
        Ok(loss_mse(&preds, target)? * horizon as f64 / pixels)
    };
    let per: Vec<Result<f64>> = if parallel {
        usable.par_iter().map(one).collect()
    } else {
        usable.iter().map(one).collect()
    };
    let mut total = 0.0;
    for r in per {
        total += r?;
    }
    Ok(Some(total / usable.len() as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse_short: Option<f64>,
    pub val_mse_long: Option<f64>,
}

impl LogRow {
    pub const HEADER: &'static str = "step,epoch,train_loss,val_mse_20,val_mse_150";

    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        format!(
            "{},{},{:e},{},{}",
            self.step,
            self.epoch,
            self.train_loss,
            opt(self.val_mse_short),
            opt(self.val_mse_long)
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: Params,
    /// Parameters at the best short-horizon validation MSE (final if never validated).
    pub best_params: Params,
    pub best_val: Option<f64>,
    pub best_step: usize,
    pub log: Vec<LogRow>,
    pub steps: usize,
}

impl TrainOutcome {
    /// First step whose short-horizon validation MSE is at or below `threshold`.
    pub fn steps_to_reach(&self, threshold: f64) -> Option<usize> {
        self.log
            .iter()
            .find(|r| r.val_mse_short.is_some_and(|v| v <= threshold))
            .map(|r| r.step)
    }
}

/// Output files written by [`fit`] into its output directory.
pub struct RunFiles {
    pub metrics: PathBuf,
    pub last: PathBuf,
    pub best: PathBuf,
}

impl RunFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            metrics: dir.join("metrics.csv"),
            last: dir.join("checkpoint_last.fwmc"),
            best: dir.join("checkpoint_best.fwmc"),
        }
    }
}

/// Trains from `Params::init` under `tc.seed`.
pub fn fit(
    cfg: &FloWMConfig,
    tc: &TrainConfig,
    train_set: &[Episode],
    val_set: &[Episode],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let init = Params::init(cfg, &mut rng);
    fit_from(cfg, tc, init, train_set, val_set, out_dir)
}

pub fn fit_from(
    cfg: &FloWMConfig,
    tc: &TrainConfig,
    init: Params,
    train_set: &[Episode],
    val_set: &[Episode],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    tc.validate()?;
    init.check(cfg)?;
    let need = tc.obs_len + tc.pred_len;
    let usable: Vec<&Episode> = train_set.iter().filter(|e| e.frames.len() >= need).collect();
    if usable.is_empty() {
        return config_err(format!("no training episode has {need} frames"));
    }
    let val: Vec<Episode> = val_set.iter().take(tc.val_episodes).cloned().collect();
    let parallel = !tc.deterministic;

    let files = out_dir.map(RunFiles::in_dir);
    let mut csv = match &files {
        Some(f) => {
            std::fs::create_dir_all(f.metrics.parent().expect("file in a directory"))?;
            let mut w = BufWriter::new(File::create(&f.metrics)?);
            writeln!(w, "{}", LogRow::HEADER)?;
            Some(w)
        }
        None => None,
    };

    let mut params = init;
    let mut adam = AdamState::new(&params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5348_5546);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut log = Vec::new();
    let mut best_params = params.clone();
    let mut best_val: Option<f64> = None;
    let mut best_step = 0;
    let mut step = 0;
    let limit = tc.max_steps.unwrap_or(usize::MAX);

    let validate = |p: &Params| -> Result<(Option<f64>, Option<f64>)> {
        if val.is_empty() {
            return Ok((None, None));
        }
        Ok((
            rollout_mse(p, cfg, &val, tc.obs_len, tc.pred_len, parallel)?,
            rollout_mse(p, cfg, &val, tc.obs_len, tc.long_pred_len, parallel)?,
        ))
    };

    'epochs: for epoch in 0..tc.epochs {
        order.shuffle(&mut shuffle_rng);
        let n_batches = order.len().div_ceil(tc.batch_size);
        for (b, chunk) in order.chunks(tc.batch_size).enumerate() {
            if step >= limit {
                break 'epochs;
            }
            let batch: Vec<&Episode> = chunk.iter().map(|&i| usable[i]).collect();
            let (loss, mut grads) =
                batch_loss_and_grad(&params, cfg, &batch, tc.obs_len, tc.pred_len, parallel)?;
            if !loss.is_finite() || !grads.l2_norm().is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss or gradient at step {step} (epoch {epoch}, loss {loss})"
                )));
            }
            clip_by_norm(&mut grads, tc.grad_clip_norm);
            adam_step(&mut params, &grads, &mut adam, tc.learning_rate)?;
            step += 1;

            let last = step >= limit || (epoch + 1 == tc.epochs && b + 1 == n_batches);
            let (vs, vl) = if (tc.val_every > 0 && step % tc.val_every == 0) || last {
                validate(&params)?
            } else {
                (None, None)
            };
            if let Some(v) = vs {
                if best_val.is_none_or(|b| v < b) {
                    best_val = Some(v);
                    best_params = params.clone();
                    best_step = step;
                    if let Some(f) = &files {
                        write_checkpoint(&f.best, cfg, &params)?;
                    }
                }
            }
            let row = LogRow {
                step,
                epoch,
                train_loss: loss,
                val_mse_short: vs,
                val_mse_long: vl,
            };
            if let Some(w) = csv.as_mut() {
                writeln!(w, "{}", row.csv())?;
                w.flush()?;
            }
            log.push(row);
        }
        if let Some(f) = &files {
            write_checkpoint(&f.last, cfg, &params)?;
        }
    }
    if let Some(f) = &files {
        write_checkpoint(&f.last, cfg, &params)?;
        if best_val.is_none() {
            write_checkpoint(&f.best, cfg, &params)?;
        }
    }
    if let Some(mut w) = csv {
        w.flush()?;
    }
    if best_val.is_none() {
        best_params = params.clone();
        best_step = step;
    }
    Ok(TrainOutcome {
        params,
        best_params,
        best_val,
        best_step,
        log,
        steps: step,
    })
}

/// Reads the dataset(s) and trains. Without a validation file the last 10%
/// of the training episodes are held out.
pub fn train(
    cfg: &FloWMConfig,
    tc: &TrainConfig,
    data: &Path,
    val: Option<&Path>,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    let mut episodes = read_dataset(data)?;
    let val_set = match val {
        Some(p) => read_dataset(p)?,
        None => {
            let hold = episodes.len() / 10;
            episodes.split_off(episodes.len() - hold)
        }
    };
    fit(cfg, tc, &episodes, &val_set, Some(out_dir))
}

#[cfg(test)]
mod tests;
