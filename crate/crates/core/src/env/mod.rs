//! A toroidal sprite world watched through a moving window.
//!
//! Sprites drift at constant integer velocities on a `world × world` canvas.
//! The agent sees a `window × window` crop and translates its view by a
//! random integer action after every observation.

mod dataset;
mod sprites;

pub use dataset::{
    decode_dataset, encode_dataset, episode_payload_size, read_dataset, write_dataset,
    DATASET_MAGIC, DATASET_VERSION,
};
pub use sprites::{
    blob_glyph, digit_glyph, parse_idx_images, quantize, read_idx_images, to_u8, SpriteBank,
};

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Error, Result};
use crate::flow::{Action, Velocity};
use crate::grid::Field;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subset {
    DynamicFoNoSm,
    DynamicFo,
    StaticPo,
    DynamicPo,
}

impl Subset {
    pub const ALL: [Subset; 4] = [
        Subset::DynamicFoNoSm,
        Subset::DynamicFo,
        Subset::StaticPo,
        Subset::DynamicPo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Subset::DynamicFoNoSm => "dynamic_fo_no_sm",
            Subset::DynamicFo => "dynamic_fo",
            Subset::StaticPo => "static_po",
            Subset::DynamicPo => "dynamic_po",
        }
    }

    pub fn self_motion(self) -> bool {
        self != Subset::DynamicFoNoSm
    }

    pub fn dynamic(self) -> bool {
        self != Subset::StaticPo
    }

    pub fn partially_observed(self) -> bool {
        matches!(self, Subset::StaticPo | Subset::DynamicPo)
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Subset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Subset::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown subset `{s}` (dynamic_fo_no_sm|dynamic_fo|static_po|dynamic_po)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SpriteSource {
    Procedural,
    /// An IDX image archive of square grayscale digits.
    Idx(PathBuf),
}

impl FromStr for SpriteSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "procedural" => Ok(SpriteSource::Procedural),
            _ => match s.strip_prefix("idx:") {
                Some(path) if !path.is_empty() => Ok(SpriteSource::Idx(PathBuf::from(path))),
                _ => config_err(format!(
                    "unknown sprite source `{s}` (procedural|idx:<path>)"
                )),
            },
        }
    }
}

impl fmt::Display for SpriteSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpriteSource::Procedural => f.write_str("procedural"),
            SpriteSource::Idx(p) => write!(f, "idx:{}", p.display()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub subset: Subset,
    pub world_size: usize,
    pub window_size: usize,
    pub n_sprites: usize,
    /// Action components are drawn from `[-range, range]`.
    pub self_motion_range: i32,
    /// Sprite velocity components are drawn from `[-range, range]`.
    pub velocity_range: i32,
    pub n_frames: usize,
    pub sprite_source: SpriteSource,
    /// Side of procedural glyphs.
    pub sprite_size: usize,
}

impl DatasetConfig {
    /// Full-size generation parameters for a subset, with 70 frames.
    pub fn for_subset(subset: Subset) -> Self {
        let (world, window, sprites, sm, vel) = match subset {
            Subset::DynamicFoNoSm => (32, 32, 3, 0, 2),
            Subset::DynamicFo => (32, 32, 3, 10, 2),
            Subset::StaticPo => (50, 32, 5, 10, 0),
            Subset::DynamicPo => (50, 32, 5, 10, 2),
        };
        Self {
            subset,
            world_size: world,
            window_size: window,
            n_sprites: sprites,
            self_motion_range: sm,
            velocity_range: vel,
            n_frames: 70,
            sprite_source: SpriteSource::Procedural,
            sprite_size: 28,
        }
    }

    /// The CPU-scale partially observed dynamic setting: world 24, window 16,
    /// two 12-pixel glyphs, velocities in `{-1..1}²`, actions in `{-4..4}²`.
    pub fn desk() -> Self {
        Self {
            world_size: 24,
            window_size: 16,
            n_sprites: 2,
            self_motion_range: 4,
            velocity_range: 1,
            n_frames: 40,
            sprite_size: 12,
            ..Self::for_subset(Subset::DynamicPo)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sprites < 1 {
            return config_err("n_sprites must be at least 1");
        }
        if self.window_size == 0 || self.window_size > self.world_size {
            return config_err(format!(
                "window {} must be in 1..={}",
                self.window_size, self.world_size
            ));
        }
        if self.world_size > u16::MAX as usize {
            return config_err("world size exceeds 65535");
        }
        if self.n_frames < 1 {
            return config_err("n_frames must be at least 1");
        }
        if self.self_motion_range < 0 || self.velocity_range < 0 {
            return config_err("motion ranges must be non-negative");
        }
        if self.self_motion_range > i16::MAX as i32 {
            return config_err("self-motion range exceeds the i16 action encoding");
        }
        if self.subset.partially_observed() == (self.window_size == self.world_size) {
            return config_err(format!(
                "subset {} is {} observed but window {} vs world {}",
                self.subset,
                if self.subset.partially_observed() { "partially" } else { "fully" },
                self.window_size,
                self.world_size
            ));
        }
        if matches!(self.sprite_source, SpriteSource::Procedural) && self.sprite_size < 3 {
            return config_err("procedural sprites need a size of at least 3");
        }
        Ok(())
    }

    /// Action range after the subset's flags.
    pub fn effective_self_motion_range(&self) -> i32 {
        if self.subset.self_motion() {
            self.self_motion_range
        } else {
            0
        }
    }

    pub fn effective_velocity_range(&self) -> i32 {
        if self.subset.dynamic() {
            self.velocity_range
        } else {
            0
        }
    }

    /// Loads the sprite source. Archives are read from disk once here.
    pub fn sprite_bank(&self) -> Result<SpriteBank> {
        match &self.sprite_source {
            SpriteSource::Procedural => Ok(SpriteBank::Procedural {
                size: self.sprite_size,
            }),
            SpriteSource::Idx(path) => Ok(SpriteBank::Images(read_idx_images(path)?)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sprite {
    pub bitmap: Field,
    /// Top-left corner `(y, x)` on the torus.
    pub position: (usize, usize),
    pub velocity: Velocity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub world_size: usize,
    pub sprites: Vec<Sprite>,
    pub time: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AgentState {
    /// Top-left corner `(y, x)` of the view on the torus.
    pub view_origin: (usize, usize),
    pub window_size: usize,
}

impl AgentState {
    /// Translates the view by `a`, wrapping on the torus.
    pub fn moved(self, a: Action, world: usize) -> AgentState {
        let w = world as i64;
        let (y, x) = self.view_origin;
        AgentState {
            view_origin: (
                (y as i64 + a.ay as i64).rem_euclid(w) as usize,
                (x as i64 + a.ax as i64).rem_euclid(w) as usize,
            ),
            ..self
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub frames: Vec<Field>,
    /// `actions[t]` moves the view between `frames[t]` and `frames[t + 1]`.
    pub actions: Vec<Action>,
    pub seed: u64,
    pub world_size: usize,
    pub window_size: usize,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

pub fn init_world<R: Rng + ?Sized>(
    cfg: &DatasetConfig,
    bank: &SpriteBank,
    rng: &mut R,
) -> Result<(WorldState, AgentState)> {
    cfg.validate()?;
    let n = cfg.world_size;
    let vr = cfg.effective_velocity_range();
    let sprites = (0..cfg.n_sprites)
        .map(|_| {
            let bitmap = bank.sample(rng);
            let position = (rng.gen_range(0..n), rng.gen_range(0..n));
            let velocity = Velocity::new(rng.gen_range(-vr..=vr), rng.gen_range(-vr..=vr));
            Sprite {
                bitmap,
                position,
                velocity,
            }
        })
        .collect();
    let agent = AgentState {
        view_origin: (rng.gen_range(0..n), rng.gen_range(0..n)),
        window_size: cfg.window_size,
    };
    Ok((
        WorldState {
            world_size: n,
            sprites,
            time: 0,
        },
        agent,
    ))
}

pub fn step_world(w: &WorldState) -> WorldState {
    let n = w.world_size as i64;
    let sprites = w
        .sprites
        .iter()
        .map(|s| Sprite {
            position: (
                (s.position.0 as i64 + s.velocity.vy as i64).rem_euclid(n) as usize,
                (s.position.1 as i64 + s.velocity.vx as i64).rem_euclid(n) as usize,
            ),
            ..s.clone()
        })
        .collect();
    WorldState {
        world_size: w.world_size,
        sprites,
        time: w.time + 1,
    }
}

pub fn sample_action<R: Rng + ?Sized>(rng: &mut R, range: i32) -> Action {
    let r = range.max(0);
    Action::new(rng.gen_range(-r..=r), rng.gen_range(-r..=r))
}

/// The full canvas: sprites composited by per-pixel max onto black.
pub fn render(w: &WorldState) -> Field {
    let n = w.world_size;
    let mut canvas = Field::zeros(1, n, n);
    for s in &w.sprites {
        let (sy, sx) = s.position;
        for y in 0..s.bitmap.height() {
            for x in 0..s.bitmap.width() {
                let v = s.bitmap.at(0, y, x);
                let (cy, cx) = ((sy + y) % n, (sx + x) % n);
                if v > canvas.at(0, cy, cx) {
                    canvas.set(0, cy, cx, v);
                }
            }
        }
    }
    canvas
}

pub fn observe(w: &WorldState, agent: &AgentState) -> Field {
    let canvas = render(w);
    let (n, k) = (w.world_size, agent.window_size);
    let (oy, ox) = agent.view_origin;
    let mut out = Field::zeros(1, k, k);
    for y in 0..k {
        for x in 0..k {
            out.set(0, y, x, canvas.at(0, (oy + y) % n, (ox + x) % n));
        }
    }
    out
}

pub fn generate_episode(cfg: &DatasetConfig, seed: u64) -> Result<Episode> {
    generate_episode_with(cfg, &cfg.sprite_bank()?, seed)
}

/// Generation against a preloaded sprite bank.
pub fn generate_episode_with(cfg: &DatasetConfig, bank: &SpriteBank, seed: u64) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut world, mut agent) = init_world(cfg, bank, &mut rng)?;
    let range = cfg.effective_self_motion_range();
    let mut frames = Vec::with_capacity(cfg.n_frames);
    let mut actions = Vec::with_capacity(cfg.n_frames);
    for _ in 0..cfg.n_frames {
        frames.push(observe(&world, &agent));
        let a = sample_action(&mut rng, range);
        actions.push(a);
        agent = agent.moved(a, cfg.world_size);
        world = step_world(&world);
    }
    Ok(Episode {
        frames,
        actions,
        seed,
        world_size: cfg.world_size,
        window_size: cfg.window_size,
    })
}

/// Episodes for seeds `base_seed, base_seed + 1, ...`, generated in parallel.
pub fn generate_episodes(cfg: &DatasetConfig, count: usize, base_seed: u64) -> Result<Vec<Episode>> {
    use rayon::prelude::*;
    let bank = cfg.sprite_bank()?;
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_episode_with(cfg, &bank, base_seed.wrapping_add(i)))
        .collect()
}
