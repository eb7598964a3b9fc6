//! The abstract recurrence `h_{t+1}(ν) = ψ_1(ν)·T⁻¹_a·U[h_t(ν); E[f_t; h_t](ν)]`
//! over user supplied encoder and update operators.
//!
//! Equivariance of `E` and `U` and the trivial lift of `E` are contracts of
//! the operator values, not runtime checks; the `equiv` module probes them.

use crate::error::{shape_err, Result};
use crate::flow::{action_rep, flow_at, Action, Velocity, VelocitySet};
use crate::grid::{conv2d, pad, pointwise, Activation, Field, Kernel, Padding, VelocityStack};

pub trait FlowEncoder {
    /// Encoding of `f` for velocity channel `v` given the previous state.
    fn encode(&self, f: &Field, h: &VelocityStack, v: Velocity) -> Result<Field>;
}

pub trait FlowUpdate {
    /// New slice from a hidden slice and an encoded observation.
    fn update(&self, h: &Field, o: &Field) -> Result<Field>;
}

pub struct AbstractOps<E, U> {
    pub encoder: E,
    pub update: U,
}

/// `E[f; h](ν) = U ⋆ f`, identical for every `ν`.
pub struct ConvEncoder {
    pub kernel: Kernel,
    pub padding: Padding,
}

impl FlowEncoder for ConvEncoder {
    fn encode(&self, f: &Field, _h: &VelocityStack, _v: Velocity) -> Result<Field> {
        conv2d(f, &self.kernel, self.padding)
    }
}

/// `U[h; o] = σ(W ⋆ h + pad(o))`.
pub struct ConvUpdate {
    pub kernel: Kernel,
    pub padding: Padding,
    pub activation: Activation,
}

impl FlowUpdate for ConvUpdate {
    fn update(&self, h: &Field, o: &Field) -> Result<Field> {
        let mut z = conv2d(h, &self.kernel, self.padding)?;
        z.add_assign(&pad(o, h.height())?)?;
        Ok(pointwise(&z, self.activation))
    }
}

impl<F: Fn(&Field, &VelocityStack, Velocity) -> Result<Field>> FlowEncoder for F {
    fn encode(&self, f: &Field, h: &VelocityStack, v: Velocity) -> Result<Field> {
        self(f, h, v)
    }
}

/// One step of the generalized recurrence. With `action = Some(a)` the
/// self-motion representation `ψ_1(-a)` is applied on top of the internal flow.
pub fn step_generalized<E: FlowEncoder, U: FlowUpdate>(
    h: &VelocityStack,
    f: &Field,
    ops: &AbstractOps<E, U>,
    velocities: &VelocitySet,
    world: usize,
    action: Option<Action>,
) -> Result<VelocityStack> {
    if h.len() != velocities.len() {
        return shape_err(format!(
            "{} hidden slices for {} velocities",
            h.len(),
            velocities.len()
        ));
    }
    let slices = h
        .slices()
        .iter()
        .zip(velocities.iter())
        .map(|(slice, v)| {
            let o = ops.encoder.encode(f, h, v)?;
            let u = ops.update.update(slice, &o)?;
            let mut out = flow_at(v, 1, world).act_on_field(&u)?;
            if let Some(a) = action {
                out = action_rep(a, world).0.act_on_field(&out)?;
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    VelocityStack::new(slices)
}
