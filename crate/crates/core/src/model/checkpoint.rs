//! Checkpoint container, little-endian:
//!
//! ```text
//! "FWMC"            magic
//! u32               version (1)
//! u32 world, u32 window, u32 hidden_channels, u32 kernel_size
//! u8  flags         bit0 velocity channels, bit1 self-motion flow,
//!                   bit2 action-concat, bit3 closed-loop rollout input
//! u8  activation    0 relu, 1 sigmoid, 2 identity
//! f64 action_scale
//! u32 |V|, then |V| × (i32 vx, i32 vy)
//! u64 parameter count
//! f64 × count       encoder, recurrent, decoder_hidden, decoder_out;
//!                   each kernel's weights [out][in][ky][kx] then its bias
//! ```

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::flow::{Velocity, VelocitySet};
use crate::grid::Activation;
use crate::io::{write_atomic, ByteReader};

use super::{FloWMConfig, Params, RolloutInput};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FWMC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(cfg: &FloWMConfig, params: &Params) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * params.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        cfg.world_size,
        cfg.window_size,
        cfg.hidden_channels,
        cfg.kernel_size,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let flags = cfg.use_velocity_channels as u8
        | (cfg.use_self_motion_equivariance as u8) << 1
        | (cfg.action_concat as u8) << 2
        | ((cfg.rollout_input == RolloutInput::ClosedLoop) as u8) << 3;
    out.push(flags);
    out.push(match cfg.activation {
        Activation::Relu => 0,
        Activation::Sigmoid => 1,
        Activation::Identity => 2,
    });
    out.extend_from_slice(&cfg.action_scale.to_le_bytes());
    out.extend_from_slice(&(cfg.velocity_set.len() as u32).to_le_bytes());
    for v in cfg.velocity_set.iter() {
        out.extend_from_slice(&v.vx.to_le_bytes());
        out.extend_from_slice(&v.vy.to_le_bytes());
    }
    out.extend_from_slice(&(params.param_count() as u64).to_le_bytes());
    for p in params.values() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(FloWMConfig, Params)> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Version("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version(format!("checkpoint version {version}")));
    }
    let world_size = r.u32()? as usize;
    let window_size = r.u32()? as usize;
    let hidden_channels = r.u32()? as usize;
    let kernel_size = r.u32()? as usize;
    let flags = r.u8()?;
    let activation = match r.u8()? {
        0 => Activation::Relu,
        1 => Activation::Sigmoid,
        2 => Activation::Identity,
        other => return Err(Error::Version(format!("unknown activation tag {other}"))),
    };
    let action_scale = r.f64()?;
    let n_vel = r.u32()? as usize;
    let mut velocities = Vec::with_capacity(n_vel);
    for _ in 0..n_vel {
        velocities.push(Velocity::new(r.i32()?, r.i32()?));
    }
    let cfg = FloWMConfig {
        world_size,
        window_size,
        hidden_channels,
        kernel_size,
        velocity_set: VelocitySet::new(velocities)?,
        use_velocity_channels: flags & 1 != 0,
        use_self_motion_equivariance: flags & 2 != 0,
        action_concat: flags & 4 != 0,
        rollout_input: if flags & 8 != 0 {
            RolloutInput::ClosedLoop
        } else {
            RolloutInput::Zeros
        },
        action_scale,
        activation,
    };
    cfg.validate()?;
    let count = r.u64()? as usize;
    let mut params = Params::zeros(&cfg);
    if count != params.param_count() {
        return Err(Error::Version(format!(
            "checkpoint holds {count} parameters, configuration needs {}",
            params.param_count()
        )));
    }
    let values = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    params.set_from_slice(&values)?;
    if !r.is_empty() {
        return Err(Error::Version("trailing bytes after parameters".into()));
    }
    Ok((cfg, params))
}

pub fn write_checkpoint(path: &Path, cfg: &FloWMConfig, params: &Params) -> Result<()> {
    write_atomic(path, &encode_checkpoint(cfg, params))
}

pub fn read_checkpoint(path: &Path) -> Result<(FloWMConfig, Params)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}
