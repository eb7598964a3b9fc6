//! Integer translation flows on the torus and their actions on fields and
//! velocity stacks.

use std::fmt;
use std::ops::{Add, Neg, Sub};

use crate::error::{shape_err, Error, Result};
use crate::grid::{roll, Field, VelocityStack};

/// Pixels per timestep along x and y.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Velocity {
    pub vx: i32,
    pub vy: i32,
}

impl Velocity {
    pub const ZERO: Velocity = Velocity { vx: 0, vy: 0 };

    pub fn new(vx: i32, vy: i32) -> Self {
        Self { vx, vy }
    }
}

impl Add for Velocity {
    type Output = Velocity;
    fn add(self, o: Velocity) -> Velocity {
        Velocity::new(self.vx + o.vx, self.vy + o.vy)
    }
}

impl Sub for Velocity {
    type Output = Velocity;
    fn sub(self, o: Velocity) -> Velocity {
        Velocity::new(self.vx - o.vx, self.vy - o.vy)
    }
}

impl Neg for Velocity {
    type Output = Velocity;
    fn neg(self) -> Velocity {
        Velocity::new(-self.vx, -self.vy)
    }
}

impl fmt::Display for Velocity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.vx, self.vy)
    }
}

/// A translation of the agent's view, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Action {
    pub ax: i32,
    pub ay: i32,
}

impl Action {
    pub const NONE: Action = Action { ax: 0, ay: 0 };

    pub fn new(ax: i32, ay: i32) -> Self {
        Self { ax, ay }
    }

    /// The velocity an observer sees static content move with under this action.
    pub fn as_velocity(self) -> Velocity {
        Velocity::new(self.ax, self.ay)
    }
}

impl Neg for Action {
    type Output = Action;
    fn neg(self) -> Action {
        Action::new(-self.ax, -self.ay)
    }
}

/// Distinct velocities in canonical order (lexicographic on `(vy, vx)`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VelocitySet {
    velocities: Vec<Velocity>,
}

impl VelocitySet {
    pub fn new(mut velocities: Vec<Velocity>) -> Result<Self> {
        if velocities.is_empty() {
            return Err(Error::Config("velocity set is empty".into()));
        }
        velocities.sort_by_key(|v| (v.vy, v.vx));
        if velocities.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("velocity set has duplicates".into()));
        }
        Ok(Self { velocities })
    }

    /// `{-r..=r}²`.
    pub fn square(r: i32) -> Self {
        let r = r.abs();
        let velocities = (-r..=r)
            .flat_map(|vy| (-r..=r).map(move |vx| Velocity::new(vx, vy)))
            .collect();
        Self { velocities }
    }

    /// `{(0,0)}`, the set used when velocity channels are disabled.
    pub fn zero_only() -> Self {
        Self {
            velocities: vec![Velocity::ZERO],
        }
    }

    pub fn len(&self) -> usize {
        self.velocities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.velocities.is_empty()
    }

    pub fn get(&self, i: usize) -> Velocity {
        self.velocities[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = Velocity> + '_ {
        self.velocities.iter().copied()
    }

    pub fn index_of(&self, v: Velocity) -> Option<usize> {
        self.velocities
            .binary_search_by_key(&(v.vy, v.vx), |u| (u.vy, u.vx))
            .ok()
    }

    pub fn contains(&self, v: Velocity) -> bool {
        self.index_of(v).is_some()
    }

    /// Largest absolute component, i.e. `r` for a square set.
    pub fn radius(&self) -> i32 {
        self.iter().map(|v| v.vx.abs().max(v.vy.abs())).max().unwrap_or(0)
    }
}

/// A displacement on a `world × world` torus, stored reduced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FlowElement {
    dx: i64,
    dy: i64,
    world: usize,
}

impl FlowElement {
    pub fn new(dx: i64, dy: i64, world: usize) -> Self {
        assert!(world > 0, "world modulus must be positive");
        let m = world as i64;
        Self {
            dx: dx.rem_euclid(m),
            dy: dy.rem_euclid(m),
            world,
        }
    }

    pub fn identity(world: usize) -> Self {
        Self::new(0, 0, world)
    }

    pub fn dx(&self) -> i64 {
        self.dx
    }

    pub fn dy(&self) -> i64 {
        self.dy
    }

    pub fn world(&self) -> usize {
        self.world
    }

    pub fn is_identity(&self) -> bool {
        self.dx == 0 && self.dy == 0
    }

    pub fn inverse(&self) -> Self {
        Self::new(-self.dx, -self.dy, self.world)
    }

    pub fn compose(&self, other: &FlowElement) -> Result<FlowElement> {
        if self.world != other.world {
            return Err(Error::Modulus(self.world, other.world));
        }
        Ok(Self::new(self.dx + other.dx, self.dy + other.dy, self.world))
    }

    /// `(ψ·f)(g) = f(ψ⁻¹·g)`, i.e. a roll by `(dx, dy)`.
    pub fn act_on_field(&self, f: &Field) -> Result<Field> {
        if f.height() != self.world || f.width() != self.world {
            return shape_err(format!(
                "flow on a {}-torus applied to a {}x{} field",
                self.world,
                f.height(),
                f.width()
            ));
        }
        Ok(roll(f, self.dx, self.dy))
    }
}

/// `ψ_t(ν)`: the displacement reached by moving at `ν` for `t` steps.
pub fn flow_at(v: Velocity, t: u64, world: usize) -> FlowElement {
    let t = t as i64;
    FlowElement::new(t * v.vx as i64, t * v.vy as i64, world)
}

pub fn compose(a: &FlowElement, b: &FlowElement) -> Result<FlowElement> {
    a.compose(b)
}

pub fn act_on_field(psi: &FlowElement, f: &Field) -> Result<Field> {
    psi.act_on_field(f)
}

/// Representation of a view translation on agent-frame signals: `ψ_1(-a)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActionRep(pub FlowElement);

pub fn action_rep(a: Action, world: usize) -> ActionRep {
    ActionRep(flow_at(-a.as_velocity(), 1, world))
}

/// Flow-action on a hidden stack:
/// `out(ν, g) = h(ν - ν̂, ψ⁻¹·g)`.
///
/// Channels whose preimage `ν - ν̂` falls outside `velocities` are left at
/// zero and flagged `false` in the returned mask.
pub fn act_on_stack(
    psi: &FlowElement,
    nu_hat: Velocity,
    velocities: &VelocitySet,
    h: &VelocityStack,
) -> Result<(VelocityStack, Vec<bool>)> {
    if h.len() != velocities.len() {
        return shape_err(format!(
            "stack has {} slices for {} velocities",
            h.len(),
            velocities.len()
        ));
    }
    let Some((c, hh, ww)) = h.slice_shape() else {
        return Ok((VelocityStack::new(vec![])?, vec![]));
    };
    let mut slices = Vec::with_capacity(h.len());
    let mut valid = Vec::with_capacity(h.len());
    for v in velocities.iter() {
        match velocities.index_of(v - nu_hat) {
            Some(src) => {
                slices.push(psi.act_on_field(h.slice(src))?);
                valid.push(true);
            }
            None => {
                slices.push(Field::zeros(c, hh, ww));
                valid.push(false);
            }
        }
    }
    Ok((VelocityStack::new(slices)?, valid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn flow_at_examples() {
        let v = Velocity::new(2, -1);
        assert!(flow_at(v, 0, 10).is_identity());
        assert!(flow_at(Velocity::new(1, 0), 10, 10).is_identity());
        let f = flow_at(v, 3, 10);
        assert_eq!((f.dx(), f.dy()), (6, 7));
    }

    #[test]
    fn compose_identity_inverse_and_modulus() {
        let x = FlowElement::new(3, -4, 8);
        assert_eq!(x.compose(&FlowElement::identity(8)).unwrap(), x);
        assert!(x.compose(&x.inverse()).unwrap().is_identity());
        assert!(matches!(
            x.compose(&FlowElement::identity(5)),
            Err(Error::Modulus(8, 5))
        ));
    }

    #[test]
    fn action_rep_examples() {
        assert!(action_rep(Action::NONE, 10).0.is_identity());
        let r = action_rep(Action::new(3, -2), 10).0;
        assert_eq!((r.dx(), r.dy()), (7, 2));
        let back = action_rep(Action::new(-3, 2), 10).0;
        assert!(r.compose(&back).unwrap().is_identity());
    }

    #[test]
    fn bright_pixel_moves_by_displacement() {
        let mut f = Field::zeros(1, 5, 5);
        f.set(0, 0, 0, 1.0);
        let g = FlowElement::new(1, 2, 5).act_on_field(&f).unwrap();
        assert_eq!(g.at(0, 2, 1), 1.0);
        assert_eq!(g.sum(), 1.0);
    }

    #[test]
    fn act_rejects_wrong_extent() {
        let f = Field::zeros(1, 4, 4);
        assert!(FlowElement::new(1, 1, 5).act_on_field(&f).is_err());
    }

    #[test]
    fn velocity_set_order_and_lookup() {
        let v = VelocitySet::square(1);
        assert_eq!(v.len(), 9);
        assert_eq!(v.get(0), Velocity::new(-1, -1));
        assert_eq!(v.get(1), Velocity::new(0, -1));
        assert_eq!(v.index_of(Velocity::ZERO), Some(4));
        assert_eq!(VelocitySet::square(2).len(), 25);
        assert!(VelocitySet::new(vec![Velocity::ZERO, Velocity::ZERO]).is_err());
        let s = VelocitySet::new(vec![Velocity::new(1, 0), Velocity::new(0, -1)]).unwrap();
        assert_eq!(s.get(0), Velocity::new(0, -1));
    }

    #[test]
    fn stack_action_permutes_channels() {
        let vs = VelocitySet::square(1);
        let slices: Vec<Field> = (0..9).map(|i| Field::constant(1, 4, 4, i as f64)).collect();
        let h = VelocityStack::new(slices).unwrap();
        let nu_hat = Velocity::new(1, 0);
        let psi = flow_at(nu_hat, 2, 4);
        let (out, valid) = act_on_stack(&psi, nu_hat, &vs, &h).unwrap();
        // output (0,0) reads input (-1,0)
        let src = vs.index_of(Velocity::new(-1, 0)).unwrap() as f64;
        assert_eq!(out.slice(vs.index_of(Velocity::ZERO).unwrap()).at(0, 0, 0), src);
        // outputs with vx = -1 have no preimage
        for (i, v) in vs.iter().enumerate() {
            assert_eq!(valid[i], v.vx != -1);
        }
    }

    #[test]
    fn stack_action_identity_and_singleton() {
        let h = VelocityStack::new(vec![Field::constant(2, 3, 3, 1.5)]).unwrap();
        let vs = VelocitySet::zero_only();
        let (out, valid) = act_on_stack(&FlowElement::identity(3), Velocity::ZERO, &vs, &h).unwrap();
        assert_eq!(out, h);
        assert_eq!(valid, vec![true]);
        let (_, valid) = act_on_stack(&FlowElement::identity(3), Velocity::new(1, 0), &vs, &h).unwrap();
        assert_eq!(valid, vec![false]);
    }

    proptest! {
        #[test]
        fn one_parameter_law(vx in -2i32..=2, vy in -2i32..=2, s in 0u64..=10, t in 0u64..=10,
                             world in prop::sample::select(vec![5usize, 8, 16])) {
            let v = Velocity::new(vx, vy);
            prop_assert_eq!(flow_at(v, s + t, world), flow_at(v, s, world).compose(&flow_at(v, t, world)).unwrap());
        }

        #[test]
        fn combined_action_flow(vx in -2i32..=2, vy in -2i32..=2, ax in -6i32..=6, ay in -6i32..=6, seed in 0u64..1000) {
            use rand::SeedableRng;
            let world = 8;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let f = Field::random_uniform(1, world, world, -1.0, 1.0, &mut rng);
            let v = Velocity::new(vx, vy);
            let a = Action::new(ax, ay);
            let combined = flow_at(v - a.as_velocity(), 1, world).act_on_field(&f).unwrap();
            let split = flow_at(v, 1, world)
                .act_on_field(&action_rep(a, world).0.act_on_field(&f).unwrap())
                .unwrap();
            prop_assert_eq!(combined, split);
        }
    }
}
