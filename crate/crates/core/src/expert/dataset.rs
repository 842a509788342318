//! Demonstration dataset and its binary file.
//!
//! Body layout after the shared container header (all little-endian):
//!
//! ```text
//! count                      u32
//! per trajectory:
//!   steps T                  u32
//!   hindsight                u8 (0 or 1)
//!   goal x, y                2 x f64
//!   goal image               S*S*3 bytes
//!   frames                   (T+1) * S*S*3 bytes
//!   embodiment               (T+1) * E x f64
//!   actions                  T * A x f64
//! ```
//!
//! `S`, `E` and `A` come from the TOML header.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetStats, ExpertConfig};
use crate::container::{read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::worlds::{self, dist, EnvConfig, Image, RobotKind, WorldState};

const MAGIC: &[u8; 8] = b"UPNDEMO\0";
const VERSION: u32 = 1;

/// A demonstration: `T` actions between `T + 1` observations.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub frames: Vec<Image>,
    pub embodiment: Vec<Vec<f64>>,
    pub actions: Vec<[f64; 2]>,
    pub goal: [f64; 2],
    pub goal_image: Image,
    /// Goal moved to the terminal position after a failed rollout.
    pub hindsight: bool,
}

impl Trajectory {
    pub(crate) fn from_states(states: &[WorldState], actions: Vec<[f64; 2]>, env: &EnvConfig, hindsight: bool) -> Self {
        let last = states.last().expect("at least one state");
        Trajectory {
            frames: states.iter().map(|s| worlds::render(s, env)).collect(),
            embodiment: states.iter().map(WorldState::embodiment).collect(),
            actions,
            goal: last.goal,
            goal_image: worlds::render(&last.at_goal(), env),
            hindsight,
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn terminal_position(&self) -> [f64; 2] {
        let q = self.embodiment.last().expect("at least one frame");
        [q[0], q[1]]
    }

    /// Whether the last recorded position is within `radius` of the goal.
    pub fn reaches_goal(&self, radius: f64) -> bool {
        dist(self.terminal_position(), self.goal) <= radius
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub env_id: String,
    pub seed: u64,
    pub image_size: usize,
    pub action_dim: usize,
    pub embodiment_dim: usize,
    pub success_radius: f64,
    pub stats: DatasetStats,
    pub env: EnvConfig,
    pub expert: ExpertConfig,
}

impl DatasetHeader {
    pub fn new(env: &EnvConfig, expert: &ExpertConfig, seed: u64, stats: DatasetStats) -> Self {
        let mode = format!("{:?}", env.layout_mode).to_lowercase();
        DatasetHeader {
            format: "upn-demos".into(),
            env_id: format!("point-{mode}"),
            seed,
            image_size: env.image_size,
            action_dim: RobotKind::Point.action_dim(),
            embodiment_dim: RobotKind::Point.embodiment_dim(),
            success_radius: env.success_radius,
            stats,
            env: env.clone(),
            expert: expert.clone(),
        }
    }
}

/// Trajectory indices of a seeded 90/5/5 split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemoDataset {
    pub header: DatasetHeader,
    pub trajectories: Vec<Trajectory>,
}

impl DemoDataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn hindsight_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.trajectories.iter().filter(|t| t.hindsight).count() as f64 / self.len() as f64
    }

    /// Shuffles trajectory indices with `seed`; validation and test each get
    /// 5% (at least one), training the rest.
    pub fn split(&self, seed: u64) -> Result<Split> {
        let n = self.len();
        let held = ((n as f64 * 0.05).round() as usize).max(1);
        if n < 2 * held + 1 {
            return Err(Error::InvalidArgument(format!("{n} trajectories are too few to split")));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let test = idx.split_off(n - held);
        let validation = idx.split_off(n - 2 * held);
        Ok(Split {
            train: idx,
            validation,
            test,
        })
    }

    fn writer(&self) -> Writer {
        let header = toml::to_string(&self.header).expect("header serializes");
        let mut w = Writer::new(MAGIC, VERSION, &header);
        w.u32(self.trajectories.len() as u32);
        for t in &self.trajectories {
            w.u32(t.actions.len() as u32);
            w.u8(u8::from(t.hindsight));
            w.f64(t.goal[0]);
            w.f64(t.goal[1]);
            w.bytes(&t.goal_image.data);
            for f in &t.frames {
                w.bytes(&f.data);
            }
            for q in &t.embodiment {
                for &v in q {
                    w.f64(v);
                }
            }
            for a in &t.actions {
                w.f64(a[0]);
                w.f64(a[1]);
            }
        }
        w
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.writer().buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.writer().finish(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(path, &read_file(path)?)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let (mut r, text) = Reader::open(path, bytes, MAGIC, VERSION)?;
        let header: DatasetHeader = toml::from_str(&text).map_err(|e| Error::format(path, format!("header: {e}")))?;
        if header.action_dim != 2 {
            return Err(r.err(format!("unsupported action dimension {}", header.action_dim)));
        }
        let s = header.image_size;
        let frame = s * s * 3;
        let image = |r: &mut Reader| -> Result<Image> {
            Ok(Image {
                width: s,
                height: s,
                data: r.take(frame)?.to_vec(),
            })
        };
        let count = r.u32()? as usize;
        let mut trajectories = Vec::with_capacity(count);
        for _ in 0..count {
            let steps = r.u32()? as usize;
            let hindsight = match r.u8()? {
                0 => false,
                1 => true,
                v => return Err(r.err(format!("bad hindsight flag {v}"))),
            };
            let goal = [r.f64()?, r.f64()?];
            let goal_image = image(&mut r)?;
            let frames = (0..=steps).map(|_| image(&mut r)).collect::<Result<Vec<_>>>()?;
            let embodiment = (0..=steps)
                .map(|_| (0..header.embodiment_dim).map(|_| r.f64()).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            let actions = (0..steps)
                .map(|_| Ok([r.f64()?, r.f64()?]))
                .collect::<Result<Vec<_>>>()?;
            trajectories.push(Trajectory {
                frames,
                embodiment,
                actions,
                goal,
                goal_image,
                hindsight,
            });
        }
        r.finish()?;
        Ok(DemoDataset { header, trajectories })
    }
}
