//! Learner snapshots: `MDCK`, format version, a JSON header, then the raw
//! parameter vectors as little-endian f64.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::env::GridShape;
use crate::guidance::GuidanceConfig;
use crate::learner::{actor_spec, critic_spec, Learner, LearnerConfig, Policy};
use crate::nn::{NetSpec, Network};

const MAGIC: &[u8; 4] = b"MDCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub code_version: String,
    pub seed: u64,
    pub step: u64,
    pub updates: u64,
    pub learner: LearnerConfig,
    pub actor: NetSpec,
    pub critic: NetSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub actor: Vec<f64>,
    pub critics: [Vec<f64>; 2],
    pub targets: [Vec<f64>; 2],
}

fn io(e: std::io::Error) -> HarnessError {
    HarnessError::Runtime(format!("checkpoint: {e}"))
}

fn write_vec<W: Write>(w: &mut W, v: &[f64]) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(v.len() as u64)?;
    for x in v {
        w.write_f64::<LittleEndian>(*x)?;
    }
    Ok(())
}

fn read_vec<R: Read>(r: &mut R) -> std::io::Result<Vec<f64>> {
    let n = r.read_u64::<LittleEndian>()? as usize;
    if n > 1 << 28 {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "parameter block too large"));
    }
    (0..n).map(|_| r.read_f64::<LittleEndian>()).collect()
}

impl Checkpoint {
    pub fn capture(learner: &Learner, seed: u64, step: u64) -> Self {
        Self {
            header: CheckpointHeader {
                code_version: super::code_version(),
                seed,
                step,
                updates: learner.updates(),
                learner: learner.config().clone(),
                actor: learner.policy().net.spec().clone(),
                critic: learner.critic(0).spec().clone(),
            },
            actor: learner.policy().net.params.clone(),
            critics: [learner.critic(0).params.clone(), learner.critic(1).params.clone()],
            targets: [learner.target(0).params.clone(), learner.target(1).params.clone()],
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), HarnessError> {
        let header = serde_json::to_vec(&self.header).map_err(|e| HarnessError::Runtime(e.to_string()))?;
        w.write_all(MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION).map_err(io)?;
        w.write_u32::<LittleEndian>(header.len() as u32).map_err(io)?;
        w.write_all(&header).map_err(io)?;
        for v in [&self.actor, &self.critics[0], &self.critics[1], &self.targets[0], &self.targets[1]] {
            write_vec(w, v).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, HarnessError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(HarnessError::Runtime("not a checkpoint file".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != FORMAT_VERSION {
            return Err(HarnessError::Runtime(format!("unsupported checkpoint version {version}")));
        }
        let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf).map_err(io)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&buf).map_err(|e| HarnessError::Runtime(format!("checkpoint header: {e}")))?;
        let mut blocks = Vec::with_capacity(5);
        for _ in 0..5 {
            blocks.push(read_vec(r).map_err(io)?);
        }
        let mut it = blocks.into_iter();
        let mut next = || it.next().unwrap();
        Ok(Self { header, actor: next(), critics: [next(), next()], targets: [next(), next()] })
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        self.write_to(&mut f)?;
        f.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let mut f = std::io::BufReader::new(
            std::fs::File::open(path).map_err(|e| HarnessError::Runtime(format!("{}: {e}", path.display())))?,
        );
        Self::read_from(&mut f)
    }

    /// Rejects snapshots whose network shapes differ from what `cfg` builds.
    pub fn check_compatible(&self, cfg: &LearnerConfig, grid: GridShape) -> Result<(), HarnessError> {
        let want_actor = actor_spec(cfg, grid);
        let want_critic = critic_spec(cfg, grid);
        if self.header.actor != want_actor || self.header.critic != want_critic {
            return Err(HarnessError::Mismatch(format!(
                "checkpoint networks {:?}/{:?} do not match config {:?}/{:?}",
                self.header.actor.hidden, self.header.actor.grid, want_actor.hidden, want_actor.grid
            )));
        }
        Ok(())
    }

    fn net(spec: &NetSpec, params: &[f64]) -> Result<Network, HarnessError> {
        Network::from_params(spec.clone(), params.to_vec())
            .ok_or_else(|| HarnessError::Mismatch("parameter count does not match network".into()))
    }

    pub fn policy(&self) -> Result<Policy, HarnessError> {
        let c = &self.header.learner;
        Ok(Policy {
            net: Self::net(&self.header.actor, &self.actor)?,
            mode: c.mode,
            log_std_min: c.log_std_min,
            log_std_max: c.log_std_max,
        })
    }

    pub fn learner(&self, guidance: GuidanceConfig, total_steps: u64) -> Result<Learner, HarnessError> {
        let h = &self.header;
        let critics = [Self::net(&h.critic, &self.critics[0])?, Self::net(&h.critic, &self.critics[1])?];
        let targets = [Self::net(&h.critic, &self.targets[0])?, Self::net(&h.critic, &self.targets[1])?];
        let mut l = Learner::from_parts(
            h.learner.clone(),
            guidance,
            total_steps,
            Self::net(&h.actor, &self.actor)?,
            critics,
            targets,
            ChaCha8Rng::seed_from_u64(h.seed ^ h.step),
        );
        l.set_updates(h.updates);
        Ok(l)
    }
}
