//! Plain-text run configuration.
//!
//! ```text
//! scale = desk          # full | desk, selects the defaults
//!
//! [env]
//! subset = dynamic_po
//! sprites = 2
//!
//! [model]
//! ablation = no-vc
//!
//! [train]
//! learning_rate = 1e-4
//!
//! [eval]
//! horizons = 20,150
//! ```
//!
//! `#` starts a comment. Keys outside a section are top-level. Unknown or
//! repeated keys are errors. Overrides, such as command-line flags, are applied
//! on top of the file and replace its values.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::env::{DatasetConfig, SpriteSource, Subset};
use crate::error::{Error, Result};
use crate::grid::Activation;
use crate::model::{Ablation, FloWMConfig, RolloutInput};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    /// Full-size defaults: world 50, window 32, 64 hidden channels, `|V| = 25`.
    Full,
    /// CPU-size defaults: world 24, window 16, 32 hidden channels, `|V| = 9`.
    Desk,
}

impl FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Scale::Full),
            "desk" => Ok(Scale::Desk),
            _ => Err(Error::Config(format!("unknown scale `{s}` (full|desk)"))),
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Full => "full",
            Scale::Desk => "desk",
        })
    }
}

/// Every accepted key, by section. The empty section holds top-level keys.
pub const KEYS: &[(&str, &[&str])] = &[
    ("", &["scale"]),
    (
        "env",
        &[
            "subset",
            "world",
            "window",
            "sprites",
            "self_motion",
            "velocity",
            "frames",
            "episodes",
            "sprite_source",
            "sprite_size",
        ],
    ),
    (
        "model",
        &[
            "hidden_channels",
            "kernel_size",
            "velocity_radius",
            "ablation",
            "rollout_input",
            "action_scale",
            "activation",
        ],
    ),
    (
        "train",
        &[
            "learning_rate",
            "batch_size",
            "grad_clip_norm",
            "epochs",
            "obs_len",
            "pred_len",
            "long_pred_len",
            "seed",
            "deterministic",
            "val_every",
            "val_episodes",
            "max_steps",
        ],
    ),
    ("eval", &["horizons"]),
];

/// Everything a subcommand needs, fully resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scale: Scale,
    pub env: DatasetConfig,
    /// Episodes written by `gen-data`.
    pub episodes: usize,
    pub ablation: Ablation,
    pub velocity_radius: i32,
    pub model: FloWMConfig,
    pub train: TrainConfig,
    pub horizons: Vec<usize>,
}

#[derive(Clone, Debug)]
struct RawValue {
    value: String,
    /// Source line, 0 for an override.
    line: usize,
}

type RawMap = BTreeMap<(String, String), RawValue>;

fn known_keys(section: &str) -> Option<&'static [&'static str]> {
    KEYS.iter().find(|(s, _)| *s == section).map(|(_, k)| *k)
}

fn suggestion(word: &str, candidates: &[&str]) -> String {
    candidates
        .iter()
        .map(|c| (strsim::levenshtein(word, c), *c))
        .filter(|(d, c)| *d <= 2.max(c.len() / 3))
        .min()
        .map(|(_, c)| format!("; did you mean `{c}`?"))
        .unwrap_or_default()
}

fn describe(section: &str) -> String {
    if section.is_empty() {
        "top level".to_string()
    } else {
        format!("[{section}]")
    }
}

fn check_key(section: &str, key: &str, line: usize) -> Result<()> {
    let keys = known_keys(section).expect("section validated");
    if keys.contains(&key) {
        return Ok(());
    }
    let msg = format!("unknown key `{key}` at {}{}", describe(section), suggestion(key, keys));
    Err(if line == 0 {
        Error::Config(msg)
    } else {
        Error::Parse { line, msg }
    })
}

fn parse_text(text: &str) -> Result<RawMap> {
    let mut map = RawMap::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::Parse {
                    line,
                    msg: format!("malformed section header `{content}`"),
                })?
                .trim();
            if name.is_empty() || known_keys(name).is_none() {
                let sections: Vec<&str> = KEYS.iter().map(|(s, _)| *s).filter(|s| !s.is_empty()).collect();
                return Err(Error::Parse {
                    line,
                    msg: format!("unknown section `[{name}]`{}", suggestion(name, &sections)),
                });
            }
            section = name.to_string();
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
            line,
            msg: format!("expected `key = value`, found `{content}`"),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(Error::Parse {
                line,
                msg: "empty key".to_string(),
            });
        }
        check_key(&section, key, line)?;
        let slot = (section.clone(), key.to_string());
        if let Some(prev) = map.get(&slot) {
            return Err(Error::Parse {
                line,
                msg: format!(
                    "duplicate key `{key}` at {} (first set on line {})",
                    describe(&section),
                    prev.line
                ),
            });
        }
        map.insert(
            slot,
            RawValue {
                value: value.to_string(),
                line,
            },
        );
    }
    Ok(map)
}

/// Splits `section.key` (or a bare top-level key).
fn split_override(name: &str) -> (&str, &str) {
    name.split_once('.').unwrap_or(("", name))
}

struct Resolver {
    map: RawMap,
}

impl Resolver {
    fn get<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        let Some(raw) = self.map.get(&(section.to_string(), key.to_string())) else {
            return Ok(None);
        };
        raw.value.parse::<T>().map(Some).map_err(|e| {
            let msg = format!("{}.{key} = `{}`: {e}", if section.is_empty() { "top" } else { section }, raw.value);
            if raw.line == 0 {
                Error::Config(msg)
            } else {
                Error::Parse { line: raw.line, msg }
            }
        })
    }

    fn set<T: FromStr>(&self, section: &str, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: fmt::Display,
    {
        if let Some(v) = self.get(section, key)? {
            *slot = v;
        }
        Ok(())
    }
}

/// Comma-separated list of positive integers.
#[derive(Clone, Debug, PartialEq)]
struct Horizons(Vec<usize>);

impl FromStr for Horizons {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let hs = s
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if hs.is_empty() || hs.contains(&0) {
            return Err("horizons must be positive".to_string());
        }
        Ok(Horizons(hs))
    }
}

/// Parses a horizon list such as `20,150`.
pub fn parse_horizons(s: &str) -> Result<Vec<usize>> {
    s.parse::<Horizons>().map(|h| h.0).map_err(Error::Config)
}

fn resolve(map: RawMap) -> Result<RunConfig> {
    let r = Resolver { map };
    let scale: Scale = r.get("", "scale")?.unwrap_or(Scale::Full);

    let subset: Option<Subset> = r.get("env", "subset")?;
    let mut env = match scale {
        Scale::Full => DatasetConfig::for_subset(subset.unwrap_or(Subset::DynamicPo)),
        Scale::Desk => {
            let mut d = DatasetConfig::desk();
            if let Some(s) = subset {
                d.subset = s;
                if !s.partially_observed() {
                    d.window_size = d.world_size;
                }
            }
            d
        }
    };
    r.set("env", "world", &mut env.world_size)?;
    r.set("env", "window", &mut env.window_size)?;
    r.set("env", "sprites", &mut env.n_sprites)?;
    r.set("env", "self_motion", &mut env.self_motion_range)?;
    r.set("env", "velocity", &mut env.velocity_range)?;
    r.set("env", "frames", &mut env.n_frames)?;
    r.set::<SpriteSource>("env", "sprite_source", &mut env.sprite_source)?;
    r.set("env", "sprite_size", &mut env.sprite_size)?;
    env.validate()?;
    let episodes = r.get("env", "episodes")?.unwrap_or(match scale {
        Scale::Full => 1000,
        Scale::Desk => 2000,
    });

    let mut model = match scale {
        Scale::Full => FloWMConfig::default(),
        Scale::Desk => FloWMConfig::desk(),
    };
    model.world_size = env.world_size;
    model.window_size = env.window_size;
    r.set("model", "hidden_channels", &mut model.hidden_channels)?;
    r.set("model", "kernel_size", &mut model.kernel_size)?;
    r.set::<RolloutInput>("model", "rollout_input", &mut model.rollout_input)?;
    model.action_scale = env.self_motion_range as f64;
    r.set("model", "action_scale", &mut model.action_scale)?;
    r.set::<Activation>("model", "activation", &mut model.activation)?;
    let velocity_radius = r.get("model", "velocity_radius")?.unwrap_or(model.velocity_set.radius());
    if velocity_radius < 0 {
        return Err(Error::Config("velocity_radius must be non-negative".to_string()));
    }
    let ablation: Ablation = r.get("model", "ablation")?.unwrap_or(Ablation::Full);
    let model = model.with_ablation(ablation, velocity_radius);
    model.validate()?;

    let mut train = match scale {
        Scale::Full => TrainConfig::default(),
        Scale::Desk => TrainConfig::desk(),
    };
    r.set("train", "learning_rate", &mut train.learning_rate)?;
    r.set("train", "batch_size", &mut train.batch_size)?;
    r.set("train", "grad_clip_norm", &mut train.grad_clip_norm)?;
    r.set("train", "epochs", &mut train.epochs)?;
    r.set("train", "obs_len", &mut train.obs_len)?;
    r.set("train", "pred_len", &mut train.pred_len)?;
    r.set("train", "long_pred_len", &mut train.long_pred_len)?;
    r.set("train", "seed", &mut train.seed)?;
    r.set("train", "deterministic", &mut train.deterministic)?;
    r.set("train", "val_every", &mut train.val_every)?;
    r.set("train", "val_episodes", &mut train.val_episodes)?;
    if let Some(n) = r.get::<usize>("train", "max_steps")? {
        train.max_steps = (n > 0).then_some(n);
    }
    train.validate()?;

    let horizons = match r.get::<Horizons>("eval", "horizons")? {
        Some(h) => h.0,
        None => vec![train.pred_len, train.long_pred_len],
    };

    Ok(RunConfig {
        scale,
        env,
        episodes,
        ablation,
        velocity_radius,
        model,
        train,
        horizons,
    })
}

/// Resolves a configuration from file text and `(section.key, value)`
/// overrides. Overrides replace file values.
pub fn parse_config(text: &str, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut map = parse_text(text)?;
    for (name, value) in overrides {
        let (section, key) = split_override(name);
        if known_keys(section).is_none() {
            return Err(Error::Config(format!("unknown section in override `{name}`")));
        }
        check_key(section, key, 0)?;
        map.insert(
            (section.to_string(), key.to_string()),
            RawValue {
                value: value.clone(),
                line: 0,
            },
        );
    }
    resolve(map)
}

/// Reads and resolves a configuration file; `None` means an empty file.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)?,
        None => String::new(),
    };
    parse_config(&text, overrides)
}

impl RunConfig {
    /// Canonical text form listing every key. Parsing it yields `self`.
    pub fn to_text(&self) -> String {
        let e = &self.env;
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "scale = {}", self.scale);
        let _ = writeln!(w, "\n[env]");
        let _ = writeln!(w, "subset = {}", e.subset);
        let _ = writeln!(w, "world = {}", e.world_size);
        let _ = writeln!(w, "window = {}", e.window_size);
        let _ = writeln!(w, "sprites = {}", e.n_sprites);
        let _ = writeln!(w, "self_motion = {}", e.self_motion_range);
        let _ = writeln!(w, "velocity = {}", e.velocity_range);
        let _ = writeln!(w, "frames = {}", e.n_frames);
        let _ = writeln!(w, "episodes = {}", self.episodes);
        let _ = writeln!(w, "sprite_source = {}", e.sprite_source);
        let _ = writeln!(w, "sprite_size = {}", e.sprite_size);
        let _ = writeln!(w, "\n[model]");
        let _ = writeln!(w, "hidden_channels = {}", m.hidden_channels);
        let _ = writeln!(w, "kernel_size = {}", m.kernel_size);
        let _ = writeln!(w, "velocity_radius = {}", self.velocity_radius);
        let _ = writeln!(w, "ablation = {}", self.ablation);
        let _ = writeln!(w, "rollout_input = {}", m.rollout_input);
        let _ = writeln!(w, "action_scale = {:?}", m.action_scale);
        let _ = writeln!(w, "activation = {}", m.activation);
        let _ = writeln!(w, "\n[train]");
        let _ = writeln!(w, "learning_rate = {:?}", t.learning_rate);
        let _ = writeln!(w, "batch_size = {}", t.batch_size);
        let _ = writeln!(w, "grad_clip_norm = {:?}", t.grad_clip_norm);
        let _ = writeln!(w, "epochs = {}", t.epochs);
        let _ = writeln!(w, "obs_len = {}", t.obs_len);
        let _ = writeln!(w, "pred_len = {}", t.pred_len);
        let _ = writeln!(w, "long_pred_len = {}", t.long_pred_len);
        let _ = writeln!(w, "seed = {}", t.seed);
        let _ = writeln!(w, "deterministic = {}", t.deterministic);
        let _ = writeln!(w, "val_every = {}", t.val_every);
        let _ = writeln!(w, "val_episodes = {}", t.val_episodes);
        let _ = writeln!(w, "max_steps = {}", t.max_steps.unwrap_or(0));
        let _ = writeln!(w, "\n[eval]");
        let hs: Vec<String> = self.horizons.iter().map(|h| h.to_string()).collect();
        let _ = writeln!(w, "horizons = {}", hs.join(","));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::VelocitySet;

    fn parse(text: &str) -> Result<RunConfig> {
        parse_config(text, &[])
    }

    #[test]
    fn empty_file_gives_full_scale_defaults() {
        let c = parse("").unwrap();
        assert_eq!(c.train.learning_rate, 1e-4);
        assert_eq!(c.train.grad_clip_norm, 1.0);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.model.hidden_channels, 64);
        assert_eq!(c.model.velocity_set.len(), 25);
        assert_eq!(c.env.subset, Subset::DynamicPo);
        assert_eq!((c.env.world_size, c.env.window_size), (50, 32));
        assert_eq!(c.horizons, vec![20, 150]);
        assert_eq!(c.ablation, Ablation::Full);
    }

    #[test]
    fn desk_scale_defaults() {
        let c = parse("scale = desk\n").unwrap();
        assert_eq!((c.env.world_size, c.env.window_size, c.env.n_sprites), (24, 16, 2));
        assert_eq!((c.env.self_motion_range, c.env.velocity_range), (4, 1));
        assert_eq!(c.model.hidden_channels, 32);
        assert_eq!(c.model.velocity_set.len(), 9);
        assert_eq!((c.train.obs_len, c.train.pred_len, c.train.batch_size), (30, 10, 8));
        assert_eq!(c.episodes, 2000);
        assert_eq!(c.model.action_scale, 4.0);
        let c = parse("[env]\nself_motion = 6\n").unwrap();
        assert_eq!(c.model.action_scale, 6.0);
    }

    #[test]
    fn no_vc_forces_zero_velocity_set() {
        let c = parse("[model]\nablation = no-vc\nvelocity_radius = 2\n").unwrap();
        assert_eq!(c.model.velocity_set, VelocitySet::zero_only());
        assert!(c.model.use_self_motion_equivariance);
        assert!(!c.model.use_velocity_channels);
    }

    #[test]
    fn duplicate_key_is_a_parse_error_with_line() {
        let e = parse("[train]\nseed = 1\n# note\nseed = 2\n").unwrap_err();
        match e {
            Error::Parse { line, msg } => {
                assert_eq!(line, 4);
                assert!(msg.contains("duplicate") && msg.contains("line 2"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
        // the same key in two sections is not a duplicate
        assert!(parse("scale = desk\n[env]\nframes = 5\n[train]\nseed = 3\n").is_ok());
    }

    #[test]
    fn unknown_key_suggests_the_nearest() {
        let e = parse("[train]\nlearning_rat = 0.1\n").unwrap_err();
        let Error::Parse { line, msg } = e else { panic!() };
        assert_eq!(line, 2);
        assert!(msg.contains("did you mean `learning_rate`"), "{msg}");
        let Error::Parse { msg, .. } = parse("[trian]\n").unwrap_err() else { panic!() };
        assert!(msg.contains("did you mean `train`"), "{msg}");
        let Error::Parse { msg, .. } = parse("[eval]\nzzzzzz = 1\n").unwrap_err() else { panic!() };
        assert!(!msg.contains("did you mean"), "{msg}");
    }

    #[test]
    fn malformed_lines_and_values() {
        assert!(matches!(parse("[env\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse("[env]\nworld\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse("[env]\n\nworld = big\n"), Err(Error::Parse { line: 3, .. })));
        assert!(matches!(parse("[env]\nsprites = 0\n"), Err(Error::Config(_))));
        assert!(matches!(parse("[eval]\nhorizons = 3,0\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn overrides_replace_file_values() {
        let text = "scale = desk\n[train]\nseed = 5\nepochs = 2\n";
        let ov = vec![
            ("train.seed".to_string(), "9".to_string()),
            ("model.ablation".to_string(), "no-sme".to_string()),
        ];
        let c = parse_config(text, &ov).unwrap();
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.ablation, Ablation::NoSme);
        assert!(!c.model.use_self_motion_equivariance);
        assert!(matches!(
            parse_config("", &[("train.sed".to_string(), "1".to_string())]),
            Err(Error::Config(m)) if m.contains("did you mean `seed`")
        ));
        // the same inputs always resolve to the same config
        assert_eq!(parse_config(text, &ov).unwrap(), c);
    }

    #[test]
    fn canonical_text_round_trips() {
        let texts = [
            "",
            "scale = desk\n[model]\nablation = action-concat\nactivation = sigmoid\n",
            "[env]\nsubset = static_po\nsprite_source = idx:/tmp/x.idx\n[train]\nmax_steps = 7\nlearning_rate = 3e-4\n[eval]\nhorizons = 1,2,3\n",
            "scale = desk\n[env]\nsubset = dynamic_fo\n[model]\nrollout_input = closed_loop\naction_scale = 2.5\n",
        ];
        for t in texts {
            let c = parse(t).unwrap();
            assert_eq!(parse(&c.to_text()).unwrap(), c, "{t}");
        }
    }

    #[test]
    fn subset_switch_under_desk_scale() {
        let c = parse("scale = desk\n[env]\nsubset = dynamic_fo\n").unwrap();
        assert_eq!(c.env.window_size, c.env.world_size);
        assert_eq!(c.model.window_size, 24);
    }
}
