//! Backpropagation through the full observation + prediction unroll.
//!
//! The forward pass keeps every hidden state `h_0 .. h_T`, the encoder
//! inputs and the decoder traces. Pre-activations are not stored: the
//! activation derivative is recovered from the flowed output by undoing the
//! roll.

use crate::error::{config_err, shape_err, Result};
use crate::flow::Action;
use crate::grid::{
    conv2d_circular, conv2d_input_vjp, conv2d_kernel_vjp_acc, maxpool_velocity_vjp, pad, pad_vjp,
    pointwise, roll, roll_vjp, window_vjp, Activation, Field, Padding, VelocityStack,
};
use crate::model::{
    decode_traced, encode, encoder_input, init_hidden, recurrent_input, DecoderTrace, FloWMConfig,
    Params, RolloutInput,
};

use super::loss_mse;

/// Primal values of one unroll.
pub struct Tape {
    /// `h_0 .. h_steps`.
    pub states: Vec<VelocityStack>,
    pub encoder_inputs: Vec<Field>,
    pub actions: Vec<Action>,
    pub traces: Vec<DecoderTrace>,
    pub obs_len: usize,
}

impl Tape {
    pub fn predictions(&self) -> Vec<Field> {
        self.traces.iter().map(|t| t.output.clone()).collect()
    }
}

fn check_lengths(frames: &[Field], actions: &[Action], obs_len: usize, pred_len: usize) -> Result<()> {
    if obs_len < 1 || pred_len < 1 {
        return config_err("obs_len and pred_len must be at least 1");
    }
    if frames.len() < obs_len {
        return config_err(format!("{} frames for {obs_len} observations", frames.len()));
    }
    if actions.len() < obs_len + pred_len - 1 {
        return config_err(format!(
            "{} actions for {obs_len} observed + {pred_len} predicted frames",
            actions.len()
        ));
    }
    Ok(())
}

/// Runs the model over `frames[..obs_len]` and `pred_len` predictions,
/// recording the primals needed by [`backward`].
pub fn forward_tape(
    params: &Params,
    cfg: &FloWMConfig,
    frames: &[Field],
    actions: &[Action],
    obs_len: usize,
    pred_len: usize,
) -> Result<Tape> {
    check_lengths(frames, actions, obs_len, pred_len)?;
    let steps = obs_len + pred_len - 1;
    let w = cfg.window_size;
    let zeros = Field::zeros(1, w, w);
    let mut states = Vec::with_capacity(steps + 1);
    states.push(init_hidden(cfg).stack);
    let mut encoder_inputs = Vec::with_capacity(steps);
    let mut traces: Vec<DecoderTrace> = Vec::with_capacity(pred_len);
    for (t, &a) in actions.iter().enumerate().take(steps) {
        let x = if t < obs_len {
            &frames[t]
        } else {
            match cfg.rollout_input {
                RolloutInput::Zeros => &zeros,
                RolloutInput::ClosedLoop => &traces.last().expect("a prediction precedes").output,
            }
        };
        let e = encoder_input(x, a, cfg)?;
        let drive = pad(&encode(&e, cfg, params)?, cfg.world_size)?;
        let h = states.last().expect("h_0 present");
        let slices = h
            .slices()
            .iter()
            .zip(cfg.velocity_set.iter())
            .map(|(slice, v)| {
                let mut z = conv2d_circular(&recurrent_input(slice, a, cfg), &params.recurrent)?;
                z.add_assign(&drive)?;
                let psi = cfg.step_flow(v, a);
                Ok(roll(&pointwise(&z, cfg.activation), psi.dx(), psi.dy()))
            })
            .collect::<Result<Vec<_>>>()?;
        let next = VelocityStack::new(slices)?;
        if t + 1 >= obs_len {
            traces.push(decode_traced(&next, cfg, params)?);
        }
        encoder_inputs.push(e);
        states.push(next);
    }
    Ok(Tape {
        states,
        encoder_inputs,
        actions: actions[..steps].to_vec(),
        traces,
        obs_len,
    })
}

/// Gradient of `loss_mse(predictions, targets)` with respect to every
/// parameter, given a tape from [`forward_tape`].
pub fn backward(params: &Params, cfg: &FloWMConfig, tape: &Tape, targets: &[Field]) -> Result<Params> {
    let pred_len = tape.traces.len();
    if targets.len() != pred_len {
        return shape_err(format!("{} targets for {pred_len} predictions", targets.len()));
    }
    let (c, n, w) = (cfg.hidden_channels, cfg.world_size, cfg.window_size);
    let nv = cfg.velocities();
    let mut grads = params.zeros_like();

    // dL/dprediction for L = (1/P) Σ ||p − f||²
    let mut gpred = tape
        .traces
        .iter()
        .zip(targets)
        .map(|(tr, f)| {
            if tr.output.shape() != f.shape() {
                return shape_err(format!("target {:?} vs prediction {:?}", f.shape(), tr.output.shape()));
            }
            let data = tr
                .output
                .as_slice()
                .iter()
                .zip(f.as_slice())
                .map(|(p, y)| 2.0 * (p - y) / pred_len as f64)
                .collect();
            Field::from_vec(1, w, w, data)
        })
        .collect::<Result<Vec<_>>>()?;

    let steps = tape.encoder_inputs.len();
    let mut gh = VelocityStack::zeros(nv, c, n, n);
    for t in (0..steps).rev() {
        let a = tape.actions[t];
        if t + 1 >= tape.obs_len {
            let p = t + 1 - tape.obs_len;
            decoder_backward(params, &tape.traces[p], &gpred[p], nv, n, &mut gh, &mut grads)?;
        }

        let h_prev = &tape.states[t];
        let h_next = &tape.states[t + 1];
        let mut go = Field::zeros(c, w, w);
        let mut gh_prev = Vec::with_capacity(nv);
        for (i, v) in cfg.velocity_set.iter().enumerate() {
            let psi = cfg.step_flow(v, a);
            let gr = roll_vjp(gh.slice(i), psi.dx(), psi.dy());
            let r = roll_vjp(h_next.slice(i), psi.dx(), psi.dy());
            let gz = activation_backward(&r, &gr, cfg.activation);
            let s = recurrent_input(h_prev.slice(i), a, cfg);
            conv2d_kernel_vjp_acc(&s, Padding::Circular, &gz, &mut grads.recurrent)?;
            let gs = conv2d_input_vjp(&params.recurrent, Padding::Circular, &gz, n, n)?;
            gh_prev.push(gs.leading_channels(c));
            go.add_assign(&pad_vjp(&gz, w, w)?)?;
        }
        let e = &tape.encoder_inputs[t];
        conv2d_kernel_vjp_acc(e, Padding::Circular, &go, &mut grads.encoder)?;
        if cfg.rollout_input == RolloutInput::ClosedLoop && t >= tape.obs_len {
            // the input at step t was prediction t − obs_len
            let ge = conv2d_input_vjp(&params.encoder, Padding::Circular, &go, w, w)?;
            gpred[t - tape.obs_len].add_assign(&ge.leading_channels(1))?;
        }
        gh = VelocityStack::new(gh_prev)?;
    }
    Ok(grads)
}

fn activation_backward(output: &Field, cot: &Field, act: Activation) -> Field {
    let mut g = cot.clone();
    if act != Activation::Identity {
        for (g, &y) in g.as_mut_slice().iter_mut().zip(output.as_slice()) {
            *g *= act.derivative_from_output(y);
        }
    }
    g
}

fn decoder_backward(
    params: &Params,
    trace: &DecoderTrace,
    gout: &Field,
    nv: usize,
    world: usize,
    gh: &mut VelocityStack,
    grads: &mut Params,
) -> Result<()> {
    let (_, w, _) = trace.pooled.shape();
    conv2d_kernel_vjp_acc(&trace.hidden, Padding::Circular, gout, &mut grads.decoder_out)?;
    let g_hidden = conv2d_input_vjp(&params.decoder_out, Padding::Circular, gout, w, w)?;
    let g_pre = activation_backward(&trace.hidden, &g_hidden, Activation::Relu);
    conv2d_kernel_vjp_acc(&trace.pooled, Padding::Circular, &g_pre, &mut grads.decoder_hidden)?;
    let g_pooled = conv2d_input_vjp(&params.decoder_hidden, Padding::Circular, &g_pre, w, w)?;
    let g_windows = maxpool_velocity_vjp(&g_pooled, &trace.argmax, nv)?;
    for (i, gwin) in g_windows.slices().iter().enumerate() {
        gh.slice_mut(i).add_assign(&window_vjp(gwin, world, world)?)?;
    }
    Ok(())
}

/// Loss and gradient for one episode window.
pub fn loss_and_grad(
    params: &Params,
    cfg: &FloWMConfig,
    frames: &[Field],
    actions: &[Action],
    obs_len: usize,
    pred_len: usize,
) -> Result<(f64, Params)> {
    if frames.len() < obs_len + pred_len {
        return config_err(format!(
            "{} frames for {obs_len} observed + {pred_len} predicted",
            frames.len()
        ));
    }
    let tape = forward_tape(params, cfg, frames, actions, obs_len, pred_len)?;
    let targets = &frames[obs_len..obs_len + pred_len];
    let loss = loss_mse(&tape.predictions(), targets)?;
    let grads = backward(params, cfg, &tape, targets)?;
    Ok((loss, grads))
}
