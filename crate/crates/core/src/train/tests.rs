use super::*;
use crate::env::{generate_episodes, DatasetConfig};
use crate::flow::{Action, VelocitySet};
use crate::grid::Activation;
use crate::model::{Ablation, RolloutInput};
use rand::Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny(ablation: Ablation) -> FloWMConfig {
    FloWMConfig {
        world_size: 8,
        window_size: 6,
        hidden_channels: 4,
        ..FloWMConfig::default()
    }
    .with_ablation(ablation, 1)
}

fn random_frames(n: usize, w: usize, r: &mut ChaCha8Rng) -> Vec<Field> {
    (0..n).map(|_| Field::random_uniform(1, w, w, 0.0, 1.0, r)).collect()
}

fn random_actions(n: usize, r: &mut ChaCha8Rng) -> Vec<Action> {
    (0..n).map(|_| Action::new(r.gen_range(-2..=2), r.gen_range(-2..=2))).collect()
}

fn loss_at(params: &Params, cfg: &FloWMConfig, frames: &[Field], actions: &[Action], obs: usize, pred: usize) -> f64 {
    let tape = forward_tape(params, cfg, frames, actions, obs, pred).unwrap();
    loss_mse(&tape.predictions(), &frames[obs..obs + pred]).unwrap()
}

/// Central differences over every parameter against the analytic gradient.
fn gradient_check(cfg: &FloWMConfig, seed: u64, obs: usize, pred: usize, tol: f64) {
    let mut r = rng(seed);
    let params = Params::init(cfg, &mut r);
    let frames = random_frames(obs + pred, cfg.window_size, &mut r);
    let actions = random_actions(obs + pred, &mut r);
    let (_, grads) = loss_and_grad(&params, cfg, &frames, &actions, obs, pred).unwrap();
    let analytic = grads.to_vec();
    let base = params.to_vec();
    let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    assert!(scale > 0.0);
    let h = 1e-6;
    let mut p = params.clone();
    let mut worst = 0.0f64;
    let mut kinks = 0;
    for i in 0..base.len() {
        let mut eval = |d: f64| {
            let mut x = base.clone();
            x[i] = base[i] + d;
            p.set_from_slice(&x).unwrap();
            loss_at(&p, cfg, &frames, &actions, obs, pred)
        };
        let (lp, l0, lm) = (eval(h), eval(0.0), eval(-h));
        let num = (lp - lm) / (2.0 * h);
        let rel = |n: f64| (n - analytic[i]).abs() / n.abs().max(analytic[i].abs()).max(1e-3 * scale);
        let err = rel(num);
        if err >= tol {
            // a relu or max-pool switch inside [-h, h] makes the one-sided
            // slopes disagree; the analytic value must then match one side
            let (fwd, bwd) = ((lp - l0) / h, (l0 - lm) / h);
            let kink = rel(fwd).min(rel(bwd)) < 1e-3 && rel(fwd).max(rel(bwd)) > tol;
            assert!(
                kink,
                "{:?} param {i}: analytic {} numeric {num} (rel {err:e})",
                cfg.ablation(),
                analytic[i]
            );
            kinks += 1;
            continue;
        }
        worst = worst.max(err);
    }
    assert!(kinks * 20 <= base.len(), "{kinks} kinks in {} parameters", base.len());
    assert!(worst < tol);
}

#[test]
fn loss_examples() {
    let z = Field::zeros(1, 2, 2);
    let o = Field::constant(1, 2, 2, 1.0);
    assert_eq!(loss_mse(&[z.clone()], &[o.clone()]).unwrap(), 4.0);
    assert_eq!(loss_mse(&[o.clone()], &[o.clone()]).unwrap(), 0.0);
    assert!(loss_mse(&[o.clone()], &[]).is_err());
    assert!(loss_mse(&[o], &[Field::zeros(1, 3, 3)]).is_err());

    let mut r = rng(1);
    let a = random_frames(3, 5, &mut r);
    let b = random_frames(3, 5, &mut r);
    let mut brute = 0.0;
    for t in 0..3 {
        for y in 0..5 {
            for x in 0..5 {
                let d = a[t].at(0, y, x) - b[t].at(0, y, x);
                brute += d * d;
            }
        }
    }
    assert!((loss_mse(&a, &b).unwrap() - brute / 3.0).abs() < 1e-12);
}

#[test]
fn clipping() {
    let cfg = tiny(Ablation::Full);
    let mut g = Params::zeros(&cfg);
    g.encoder.weights_mut()[0] = 0.3;
    g.recurrent.weights_mut()[5] = 0.4;
    let before = g.clone();
    assert!((clip_by_norm(&mut g, 1.0) - 0.5).abs() < 1e-15);
    assert_eq!(g, before);

    g.encoder.weights_mut()[0] = 1.2;
    g.recurrent.weights_mut()[5] = 1.6;
    assert!((clip_by_norm(&mut g, 1.0) - 2.0).abs() < 1e-15);
    assert!((g.l2_norm() - 1.0).abs() < 1e-12);

    let mut r = rng(2);
    for _ in 0..20 {
        let mut g = Params::init(&cfg, &mut r);
        let s = r.gen_range(0.01..10.0);
        g.values_mut().for_each(|v| *v *= s);
        let pre = g.l2_norm();
        clip_by_norm(&mut g, 1.0);
        assert!((g.l2_norm() - pre.min(1.0)).abs() < 1e-12);
        assert!(g.l2_norm() <= 1.0 + 1e-12);
    }
}

#[test]
fn adam_first_step_and_determinism() {
    let cfg = tiny(Ablation::Full);
    let mut r = rng(3);
    let p0 = Params::init(&cfg, &mut r);

    let mut p = p0.clone();
    let mut st = AdamState::new(&p);
    adam_step(&mut p, &Params::zeros(&cfg), &mut st, 1e-3).unwrap();
    assert_eq!(p, p0);

    let mut g = Params::init(&cfg, &mut r);
    g.values_mut().for_each(|v| *v *= 10.0);
    let mut p = p0.clone();
    let mut st = AdamState::new(&p);
    adam_step(&mut p, &g, &mut st, 1e-3).unwrap();
    for ((a, b), gv) in p.values().zip(p0.values()).zip(g.values()) {
        // m̂ = g and v̂ = g², so the step is lr·g/(|g| + ε)
        let expect = -1e-3 * gv / (gv.abs() + 1e-8);
        assert!((a - b - expect).abs() < 1e-15);
        assert!(((a - b).abs() - 1e-3).abs() < 1e-8 || gv.abs() < 1e-4);
    }

    let mut q = p0.clone();
    let mut sq = AdamState::new(&q);
    adam_step(&mut q, &g, &mut sq, 1e-3).unwrap();
    assert_eq!(p, q);
    assert_eq!(st, sq);
    let mut bad = AdamState::new(&p);
    bad.m.pop();
    assert!(adam_step(&mut p, &g, &mut bad, 1e-3).is_err());
}

#[test]
fn zero_loss_gives_zero_gradient() {
    let cfg = tiny(Ablation::Full);
    let mut r = rng(4);
    let params = Params::init(&cfg, &mut r);
    let mut frames = random_frames(5, 6, &mut r);
    let actions = random_actions(5, &mut r);
    let tape = forward_tape(&params, &cfg, &frames, &actions, 3, 2).unwrap();
    frames[3] = tape.traces[0].output.clone();
    frames[4] = tape.traces[1].output.clone();
    let (loss, grads) = loss_and_grad(&params, &cfg, &frames, &actions, 3, 2).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grads.values().all(|&g| g == 0.0));
}

#[test]
fn tape_predictions_match_rollout() {
    for ablation in Ablation::ALL {
        for input in [RolloutInput::Zeros, RolloutInput::ClosedLoop] {
            let mut cfg = tiny(ablation);
            cfg.rollout_input = input;
            let mut r = rng(5);
            let params = Params::init(&cfg, &mut r);
            let frames = random_frames(4, 6, &mut r);
            let actions = random_actions(6, &mut r);
            let tape = forward_tape(&params, &cfg, &frames, &actions, 4, 3).unwrap();
            let preds = rollout(&params, &cfg, &frames, &actions, 3).unwrap();
            assert_eq!(tape.predictions(), preds);
        }
    }
}

#[test]
fn gradient_check_one_step() {
    for ablation in Ablation::ALL {
        gradient_check(&tiny(ablation), 10, 1, 1, 1e-5);
    }
}

#[test]
fn gradient_check_full_unroll_every_ablation() {
    for ablation in Ablation::ALL {
        let cfg = tiny(ablation);
        assert_eq!(cfg.velocity_set.len(), if cfg.use_velocity_channels { 9 } else { 1 });
        gradient_check(&cfg, 11, 3, 2, 1e-4);
    }
}

#[test]
fn gradient_check_closed_loop_and_activations() {
    let mut cfg = tiny(Ablation::Full);
    cfg.rollout_input = RolloutInput::ClosedLoop;
    gradient_check(&cfg, 12, 3, 2, 1e-4);
    for act in [Activation::Sigmoid, Activation::Identity] {
        let mut cfg = tiny(Ablation::Full);
        cfg.activation = act;
        gradient_check(&cfg, 13, 3, 2, 1e-4);
    }
    let mut cfg = tiny(Ablation::ActionConcat);
    cfg.rollout_input = RolloutInput::ClosedLoop;
    gradient_check(&cfg, 14, 2, 3, 1e-4);
}

#[test]
fn gradient_check_five_step_rollout() {
    let mut cfg = tiny(Ablation::Full);
    cfg.velocity_set = VelocitySet::square(1);
    gradient_check(&cfg, 15, 2, 3, 1e-4);
}

#[test]
fn config_errors() {
    let cfg = tiny(Ablation::Full);
    let mut r = rng(6);
    let params = Params::init(&cfg, &mut r);
    let frames = random_frames(3, 6, &mut r);
    let actions = random_actions(3, &mut r);
    assert!(loss_and_grad(&params, &cfg, &frames, &actions, 2, 2).is_err());
    assert!(forward_tape(&params, &cfg, &frames, &actions[..1], 2, 1).is_err());
    assert!(forward_tape(&params, &cfg, &frames, &actions, 0, 1).is_err());
    let mut tc = TrainConfig::desk();
    tc.batch_size = 0;
    assert!(tc.validate().is_err());
    tc = TrainConfig::desk();
    tc.learning_rate = f64::NAN;
    assert!(tc.validate().is_err());
}

fn small_run_setup() -> (FloWMConfig, TrainConfig, Vec<Episode>, Vec<Episode>) {
    let mut dc = DatasetConfig::desk();
    dc.world_size = 12;
    dc.window_size = 8;
    dc.sprite_size = 5;
    dc.n_sprites = 1;
    dc.self_motion_range = 1;
    dc.n_frames = 6;
    let train = generate_episodes(&dc, 8, 0).unwrap();
    let val = generate_episodes(&dc, 2, 1000).unwrap();
    let cfg = FloWMConfig {
        world_size: 12,
        window_size: 8,
        hidden_channels: 4,
        ..FloWMConfig::default()
    }
    .with_ablation(Ablation::Full, 1);
    let tc = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 2,
        epochs: 3,
        obs_len: 4,
        pred_len: 2,
        long_pred_len: 2,
        seed: 9,
        deterministic: true,
        val_every: 4,
        val_episodes: 2,
        ..TrainConfig::default()
    };
    (cfg, tc, train, val)
}

#[test]
fn training_is_deterministic_and_writes_artifacts() {
    let (cfg, tc, train_set, val) = small_run_setup();
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let a = fit(&cfg, &tc, &train_set, &val, Some(d1.path())).unwrap();
    let b = fit(&cfg, &tc, &train_set, &val, Some(d2.path())).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.steps, 12);
    assert_eq!(a.log.len(), 12);
    for f in ["checkpoint_last.fwmc", "checkpoint_best.fwmc", "metrics.csv"] {
        assert_eq!(
            std::fs::read(d1.path().join(f)).unwrap(),
            std::fs::read(d2.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let csv = std::fs::read_to_string(d1.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,epoch,train_loss,val_mse_20,val_mse_150");
    assert_eq!(lines.len(), 13);
    assert!(lines[4].split(',').nth(3).is_some_and(|v| !v.is_empty()));
    assert!(lines[1].ends_with(",,"));

    let mut par = tc.clone();
    par.deterministic = false;
    let c = fit(&cfg, &par, &train_set, &val, None).unwrap();
    assert_eq!(a.log, c.log, "batch reduction order is fixed");
    let (rcfg, rparams) = crate::model::read_checkpoint(&d1.path().join("checkpoint_last.fwmc")).unwrap();
    assert_eq!(rcfg, cfg);
    assert_eq!(rparams, a.params);
}

#[test]
fn training_reduces_loss() {
    let (cfg, mut tc, train_set, val) = small_run_setup();
    tc.epochs = 10;
    let out = fit(&cfg, &tc, &train_set, &val, None).unwrap();
    let first: f64 = out.log[..4].iter().map(|r| r.train_loss).sum();
    let last: f64 = out.log[out.log.len() - 4..].iter().map(|r| r.train_loss).sum();
    assert!(last < first, "loss {first} -> {last}");
    assert!(out.best_val.is_some());
}

#[test]
fn divergence_is_reported() {
    let (cfg, tc, mut train_set, val) = small_run_setup();
    train_set[0].frames[5] = Field::constant(1, 8, 8, f64::NAN);
    let mut tc = tc;
    tc.batch_size = 8;
    assert!(matches!(fit(&cfg, &tc, &train_set, &val, None), Err(Error::Diverged(_))));
}

