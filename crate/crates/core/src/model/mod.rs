//! The recurrent flow equivariant world model.
//!
//! Hidden state `h_t(ν)` holds one `C_hid × world × world` slice per velocity
//! `ν ∈ V`. One step is
//!
//! ```text
//! h_{t+1}(ν) = ψ_1(ν − a_t) · σ(W ⋆ h_t(ν) + pad(U ⋆ f_t))
//! ```
//!
//! and the prediction of the next frame is `g(max_ν window(h_{t+1}))`.
//! Ablations drop the velocity channels (`V = {(0,0)}`), the action term of
//! the flow, or both; the action-concat variant appends the action as two
//! constant planes to both convolution inputs instead of flowing.

mod checkpoint;
mod generalized;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use generalized::{step_generalized, AbstractOps, ConvEncoder, ConvUpdate, FlowEncoder, FlowUpdate};

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{config_err, shape_err, Error, Result};
use crate::flow::{flow_at, Action, FlowElement, Velocity, VelocitySet};
use crate::grid::{
    conv2d_circular, maxpool_velocity, pad, pointwise, roll, window, Activation, Field, Kernel,
    VelocityStack,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Full,
    NoVc,
    NoSme,
    NoSmeNoVc,
    ActionConcat,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoVc,
        Ablation::NoSme,
        Ablation::NoSmeNoVc,
        Ablation::ActionConcat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoVc => "no-vc",
            Ablation::NoSme => "no-sme",
            Ablation::NoSmeNoVc => "no-sme-no-vc",
            Ablation::ActionConcat => "action-concat",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown ablation `{s}` (expected full|no-vc|no-sme|no-sme-no-vc|action-concat)"
                ))
            })
    }
}

/// What the model reads during the prediction phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RolloutInput {
    /// No observation: only the flows and `W` evolve the memory.
    Zeros,
    /// The model's own previous prediction.
    ClosedLoop,
}

impl FromStr for RolloutInput {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zeros" => Ok(RolloutInput::Zeros),
            "closed_loop" | "closed-loop" => Ok(RolloutInput::ClosedLoop),
            _ => config_err(format!("unknown rollout input `{s}` (zeros|closed_loop)")),
        }
    }
}

impl fmt::Display for RolloutInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RolloutInput::Zeros => "zeros",
            RolloutInput::ClosedLoop => "closed_loop",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FloWMConfig {
    pub world_size: usize,
    pub window_size: usize,
    pub hidden_channels: usize,
    pub kernel_size: usize,
    pub velocity_set: VelocitySet,
    pub use_velocity_channels: bool,
    pub use_self_motion_equivariance: bool,
    pub action_concat: bool,
    pub rollout_input: RolloutInput,
    /// Divisor applied to actions before they become constant input planes.
    pub action_scale: f64,
    pub activation: Activation,
}

impl Default for FloWMConfig {
    /// The full-size partially observed setting: world 50, window 32,
    /// 64 hidden channels, `V = {-2..2}²`.
    fn default() -> Self {
        Self {
            world_size: 50,
            window_size: 32,
            hidden_channels: 64,
            kernel_size: 3,
            velocity_set: VelocitySet::square(2),
            use_velocity_channels: true,
            use_self_motion_equivariance: true,
            action_concat: false,
            rollout_input: RolloutInput::Zeros,
            action_scale: 10.0,
            activation: Activation::Relu,
        }
    }
}

impl FloWMConfig {
    /// Scaled-down setting used for CPU experiments: world 24, window 16,
    /// 32 hidden channels, `V = {-1..1}²`.
    pub fn desk() -> Self {
        Self {
            world_size: 24,
            window_size: 16,
            hidden_channels: 32,
            velocity_set: VelocitySet::square(1),
            action_scale: 4.0,
            ..Self::default()
        }
    }

    /// Applies an ablation's flags. `velocity_radius` is used when velocity
    /// channels stay enabled.
    pub fn with_ablation(mut self, ablation: Ablation, velocity_radius: i32) -> Self {
        let (vc, sme, concat) = match ablation {
            Ablation::Full => (true, true, false),
            Ablation::NoVc => (false, true, false),
            Ablation::NoSme => (true, false, false),
            Ablation::NoSmeNoVc => (false, false, false),
            Ablation::ActionConcat => (false, false, true),
        };
        self.use_velocity_channels = vc;
        self.use_self_motion_equivariance = sme;
        self.action_concat = concat;
        self.velocity_set = if vc {
            VelocitySet::square(velocity_radius)
        } else {
            VelocitySet::zero_only()
        };
        self
    }

    pub fn ablation(&self) -> Option<Ablation> {
        match (
            self.use_velocity_channels,
            self.use_self_motion_equivariance,
            self.action_concat,
        ) {
            (true, true, false) => Some(Ablation::Full),
            (false, true, false) => Some(Ablation::NoVc),
            (true, false, false) => Some(Ablation::NoSme),
            (false, false, false) => Some(Ablation::NoSmeNoVc),
            (false, false, true) => Some(Ablation::ActionConcat),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.window_size > self.world_size {
            return config_err(format!(
                "window {} must be in 1..={}",
                self.window_size, self.world_size
            ));
        }
        if (self.world_size - self.window_size) % 2 != 0 {
            return config_err("world - window must be even (centered window)");
        }
        if self.hidden_channels == 0 {
            return config_err("hidden_channels must be positive");
        }
        if self.kernel_size % 2 == 0 {
            return config_err("kernel size must be odd");
        }
        if !self.use_velocity_channels && self.velocity_set != VelocitySet::zero_only() {
            return config_err("velocity channels disabled but V != {(0,0)}");
        }
        if self.action_concat && self.use_self_motion_equivariance {
            return config_err("action-concat is defined on the model without self-motion flow");
        }
        if self.velocity_set.len() > u16::MAX as usize {
            return config_err("too many velocity channels");
        }
        Ok(())
    }

    pub fn velocities(&self) -> usize {
        self.velocity_set.len()
    }

    fn encoder_in_channels(&self) -> usize {
        if self.action_concat {
            3
        } else {
            1
        }
    }

    fn recurrent_in_channels(&self) -> usize {
        self.hidden_channels + if self.action_concat { 2 } else { 0 }
    }

    /// Flow applied to velocity channel `v` after action `a`.
    pub fn step_flow(&self, v: Velocity, a: Action) -> FlowElement {
        let mut d = if self.use_velocity_channels {
            v
        } else {
            Velocity::ZERO
        };
        if self.use_self_motion_equivariance {
            d = d - a.as_velocity();
        }
        flow_at(d, 1, self.world_size)
    }
}

/// Learnable kernels. `encoder` and `recurrent` are bias-free; the two
/// decoder layers carry biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub encoder: Kernel,
    pub recurrent: Kernel,
    pub decoder_hidden: Kernel,
    pub decoder_out: Kernel,
}

impl Params {
    pub fn init<R: Rng + ?Sized>(cfg: &FloWMConfig, rng: &mut R) -> Self {
        let (c, k) = (cfg.hidden_channels, cfg.kernel_size);
        Self {
            encoder: Kernel::init_uniform(c, cfg.encoder_in_channels(), k, k, false, rng),
            recurrent: Kernel::init_uniform(c, cfg.recurrent_in_channels(), k, k, false, rng),
            decoder_hidden: Kernel::init_uniform(c, c, k, k, true, rng),
            decoder_out: Kernel::init_uniform(1, c, k, k, true, rng),
        }
    }

    pub fn zeros(cfg: &FloWMConfig) -> Self {
        let (c, k) = (cfg.hidden_channels, cfg.kernel_size);
        Self {
            encoder: Kernel::zeros(c, cfg.encoder_in_channels(), k, k, false),
            recurrent: Kernel::zeros(c, cfg.recurrent_in_channels(), k, k, false),
            decoder_hidden: Kernel::zeros(c, c, k, k, true),
            decoder_out: Kernel::zeros(1, c, k, k, true),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            recurrent: self.recurrent.zeros_like(),
            decoder_hidden: self.decoder_hidden.zeros_like(),
            decoder_out: self.decoder_out.zeros_like(),
        }
    }

    pub fn check(&self, cfg: &FloWMConfig) -> Result<()> {
        let expect = Params::zeros(cfg);
        for (name, a, b) in [
            ("encoder", &self.encoder, &expect.encoder),
            ("recurrent", &self.recurrent, &expect.recurrent),
            ("decoder_hidden", &self.decoder_hidden, &expect.decoder_hidden),
            ("decoder_out", &self.decoder_out, &expect.decoder_out),
        ] {
            if (a.out_channels(), a.in_channels(), a.kh(), a.kw(), a.has_bias())
                != (b.out_channels(), b.in_channels(), b.kh(), b.kw(), b.has_bias())
            {
                return shape_err(format!("{name} kernel does not match the configuration"));
            }
        }
        Ok(())
    }

    /// Kernels in their fixed serialization order.
    pub fn kernels(&self) -> [&Kernel; 4] {
        [
            &self.encoder,
            &self.recurrent,
            &self.decoder_hidden,
            &self.decoder_out,
        ]
    }

    pub fn kernels_mut(&mut self) -> [&mut Kernel; 4] {
        [
            &mut self.encoder,
            &mut self.recurrent,
            &mut self.decoder_hidden,
            &mut self.decoder_out,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.kernels().iter().map(|k| k.param_count()).sum()
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        let [a, b, c, d] = self.kernels();
        a.params().chain(b.params()).chain(c.params()).chain(d.params())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        let [a, b, c, d] = self.kernels_mut();
        a.params_mut()
            .chain(b.params_mut())
            .chain(c.params_mut())
            .chain(d.params_mut())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    pub fn set_from_slice(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return shape_err(format!(
                "{} values for {} parameters",
                values.len(),
                self.param_count()
            ));
        }
        for (p, v) in self.values_mut().zip(values) {
            *p = *v;
        }
        Ok(())
    }

    /// `self += other`, parameter by parameter.
    pub fn accumulate(&mut self, other: &Params) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    pub stack: VelocityStack,
    pub time: usize,
}

pub fn init_hidden(cfg: &FloWMConfig) -> HiddenState {
    HiddenState {
        stack: VelocityStack::zeros(
            cfg.velocities(),
            cfg.hidden_channels,
            cfg.world_size,
            cfg.world_size,
        ),
        time: 0,
    }
}

/// Two constant planes holding `ax / scale` and `ay / scale`.
pub fn action_planes(a: Action, scale: f64, size: usize) -> Field {
    let s = if scale > 0.0 { scale } else { 1.0 };
    let ax = Field::constant(1, size, size, a.ax as f64 / s);
    let ay = Field::constant(1, size, size, a.ay as f64 / s);
    Field::concat_channels(&[&ax, &ay]).expect("planes share a shape")
}

/// The encoder's input for frame `f` under action `a`.
pub fn encoder_input(f: &Field, a: Action, cfg: &FloWMConfig) -> Result<Field> {
    let w = cfg.window_size;
    if f.shape() != (1, w, w) {
        return shape_err(format!("frame {:?}, expected (1, {w}, {w})", f.shape()));
    }
    if cfg.action_concat {
        Field::concat_channels(&[f, &action_planes(a, cfg.action_scale, w)])
    } else {
        Ok(f.clone())
    }
}

/// Input to the recurrent convolution for one velocity slice.
pub(crate) fn recurrent_input(slice: &Field, a: Action, cfg: &FloWMConfig) -> Field {
    if cfg.action_concat {
        let planes = action_planes(a, cfg.action_scale, cfg.world_size);
        Field::concat_channels(&[slice, &planes]).expect("planes share a shape")
    } else {
        slice.clone()
    }
}

/// `U ⋆ f`; the same encoding is added to every velocity channel.
pub fn encode(f: &Field, cfg: &FloWMConfig, params: &Params) -> Result<Field> {
    let w = cfg.window_size;
    if f.shape() != (cfg.encoder_in_channels(), w, w) {
        return shape_err(format!(
            "encoder input {:?}, expected ({}, {w}, {w})",
            f.shape(),
            cfg.encoder_in_channels()
        ));
    }
    conv2d_circular(f, &params.encoder)
}

fn check_hidden(h: &HiddenState, cfg: &FloWMConfig) -> Result<()> {
    let expect = (cfg.hidden_channels, cfg.world_size, cfg.world_size);
    if h.stack.len() != cfg.velocities() || h.stack.slice_shape() != Some(expect) {
        return shape_err(format!(
            "hidden state has {} slices of {:?}, expected {} of {expect:?}",
            h.stack.len(),
            h.stack.slice_shape(),
            cfg.velocities()
        ));
    }
    Ok(())
}

/// One recurrence step. `f = None` drops the input term entirely.
pub fn step(
    h: &HiddenState,
    f: Option<&Field>,
    a: Action,
    cfg: &FloWMConfig,
    params: &Params,
) -> Result<HiddenState> {
    check_hidden(h, cfg)?;
    let drive = match f {
        Some(f) => {
            let o = encode(&encoder_input(f, a, cfg)?, cfg, params)?;
            Some(pad(&o, cfg.world_size)?)
        }
        None => None,
    };
    let slices = h
        .stack
        .slices()
        .iter()
        .zip(cfg.velocity_set.iter())
        .map(|(slice, v)| {
            let mut z = conv2d_circular(&recurrent_input(slice, a, cfg), &params.recurrent)?;
            if let Some(d) = &drive {
                z.add_assign(d)?;
            }
            let psi = cfg.step_flow(v, a);
            Ok(roll(&pointwise(&z, cfg.activation), psi.dx(), psi.dy()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HiddenState {
        stack: VelocityStack::new(slices)?,
        time: h.time + 1,
    })
}

/// Intermediate values of one decoder pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct DecoderTrace {
    pub pooled: Field,
    pub argmax: Vec<u16>,
    pub hidden: Field,
    pub output: Field,
}

pub fn decode_traced(h: &VelocityStack, cfg: &FloWMConfig, params: &Params) -> Result<DecoderTrace> {
    let windows = h
        .slices()
        .iter()
        .map(|s| window(s, cfg.window_size))
        .collect::<Result<Vec<_>>>()?;
    let (pooled, argmax) = maxpool_velocity(&VelocityStack::new(windows)?)?;
    let pre = conv2d_circular(&pooled, &params.decoder_hidden)?;
    let hidden = pointwise(&pre, Activation::Relu);
    let output = conv2d_circular(&hidden, &params.decoder_out)?;
    Ok(DecoderTrace {
        pooled,
        argmax,
        hidden,
        output,
    })
}

/// `g(max_ν window(h))`: a `1 × window × window` frame prediction.
pub fn decode(h: &HiddenState, cfg: &FloWMConfig, params: &Params) -> Result<Field> {
    check_hidden(h, cfg)?;
    Ok(decode_traced(&h.stack, cfg, params)?.output)
}

/// Observes `obs_frames` with their actions, then predicts `horizon` frames.
///
/// `actions[t]` is the view translation between frames `t` and `t + 1`, so
/// the call needs at least `obs_frames.len() + horizon - 1` of them.
pub fn rollout(
    params: &Params,
    cfg: &FloWMConfig,
    obs_frames: &[Field],
    actions: &[Action],
    horizon: usize,
) -> Result<Vec<Field>> {
    if horizon < 1 {
        return config_err("rollout horizon must be at least 1");
    }
    if obs_frames.is_empty() {
        return config_err("rollout needs at least one observation frame");
    }
    let steps = obs_frames.len() + horizon - 1;
    if actions.len() < steps {
        return config_err(format!(
            "{} actions for {} observed + {horizon} predicted frames",
            actions.len(),
            obs_frames.len()
        ));
    }
    cfg.validate()?;
    params.check(cfg)?;
    let w = cfg.window_size;
    let zeros = Field::zeros(1, w, w);
    let mut h = init_hidden(cfg);
    let mut preds = Vec::with_capacity(horizon);
    for (t, &a) in actions.iter().enumerate().take(steps) {
        let input = if t < obs_frames.len() {
            &obs_frames[t]
        } else {
            match cfg.rollout_input {
                RolloutInput::Zeros => &zeros,
                RolloutInput::ClosedLoop => preds.last().expect("a prediction precedes"),
            }
        };
        h = step(&h, Some(input), a, cfg, params)?;
        if t + 1 >= obs_frames.len() {
            preds.push(decode(&h, cfg, params)?);
        }
    }
    Ok(preds)
}
