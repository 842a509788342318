//! Run configuration: preset defaults, then the config file, then `--set`
//! overrides, then command flags.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};
use upn::expert::ExpertConfig;
use upn::imitation::TrainConfig;
use upn::nets::NetConfig;
use upn::rl::{RewardSource, RewardSpec, RlConfig, TransferEnv};
use upn::worlds::EnvConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 42 px images, short schedules sized for one CPU.
    Desk,
    /// Full-scale defaults: 84 px images, 1e6 updates.
    Full,
    /// 10 px images and a few updates; for smoke tests.
    Tiny,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemosConfig {
    pub n: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Held-out tasks, sampled from `task_seed`.
    pub tasks: usize,
    pub task_seed: u64,
    pub n_p: Vec<usize>,
    pub seeds: Vec<u64>,
    pub max_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapConfig {
    pub resolution: usize,
    pub reference: [f64; 2],
    pub pixels_per_cell: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    pub env: TransferEnv,
    pub reward: RewardSource,
    pub seeds: usize,
    pub spec: RewardSpec,
    #[serde(flatten)]
    pub ppo: RlConfig,
}

/// Everything a command may read. Every run directory receives the fully
/// resolved copy as `config.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub precision: PrecisionArg,
    pub demos: DemosConfig,
    pub env: EnvConfig,
    pub expert: ExpertConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub latent_map: MapConfig,
    pub rl: TransferConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (env, net, train, ppo) = match preset {
            Preset::Desk => (EnvConfig::desk(), NetConfig::desk(), TrainConfig::desk(), RlConfig::desk()),
            Preset::Full => (EnvConfig::default(), NetConfig::full(), TrainConfig::default(), RlConfig::default()),
            Preset::Tiny => return Self::tiny(),
        };
        let n_p = train.planner.n_p;
        RunConfig {
            preset,
            precision: PrecisionArg::F32,
            demos: DemosConfig { n: 1000, seed: 0 },
            eval: EvalConfig {
                tasks: 200,
                task_seed: 1_000_003,
                n_p: vec![n_p, 4 * n_p],
                seeds: vec![0, 1, 2],
                max_steps: env.max_episode_steps,
            },
            env,
            expert: ExpertConfig::default(),
            net,
            train,
            latent_map: MapConfig {
                resolution: 32,
                reference: [0.5, 0.2],
                pixels_per_cell: 8,
            },
            rl: TransferConfig {
                env: TransferEnv::Car,
                reward: RewardSource::Latent,
                seeds: 1,
                spec: RewardSpec::default(),
                ppo,
            },
        }
    }

    fn tiny() -> Self {
        let mut c = Self::preset(Preset::Desk);
        c.preset = Preset::Tiny;
        c.env.image_size = 10;
        c.net = NetConfig::tiny();
        c.demos.n = 24;
        c.train.batch_size = 3;
        c.train.updates = 4;
        c.train.validation_period = 2;
        c.train.curriculum_cutoff = 2;
        c.train.validation_batches = 2;
        c.train.planner.n_p = 2;
        c.train.planner.horizon = 3;
        c.eval.tasks = 3;
        c.eval.n_p = vec![2, 8];
        c.eval.seeds = vec![0, 1];
        c.eval.max_steps = 5;
        c.latent_map.resolution = 6;
        c.latent_map.pixels_per_cell = 2;
        c.rl.ppo.steps_per_batch = 16;
        c.rl.ppo.num_envs = 4;
        c.rl.ppo.minibatch_size = 8;
        c.rl.ppo.total_steps = 32;
        c.rl.ppo.eval_tasks = 2;
        c.rl.ppo.eval_period = 1;
        c.rl.ppo.hidden = vec![8];
        c
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Resolves preset, optional file and `key.path=value` overrides.
    pub fn resolve(preset: Preset, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut base = Value::try_from(Self::preset(preset)).context("serializing preset")?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let table: Table = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
            if let Some(p) = table.get("preset") {
                let p: Preset = p.clone().try_into().context("config key `preset`")?;
                if p != preset {
                    base = Value::try_from(Self::preset(p))?;
                }
            }
            merge(&mut base, Value::Table(table));
        }
        for o in overrides {
            set(&mut base, o)?;
        }
        let cfg: RunConfig = base.clone().try_into().context("invalid configuration")?;
        let mut unknown = Vec::new();
        unknown_keys(&base, &Value::try_from(&cfg)?, "", &mut unknown);
        if !unknown.is_empty() {
            bail!("unknown configuration keys: {}", unknown.join(", "));
        }
        cfg.train.validate().map_err(|e| anyhow!("{e}"))?;
        cfg.net.validate().map_err(|e| anyhow!("{e}"))?;
        cfg.rl.ppo.validate().map_err(|e| anyhow!("{e}"))?;
        cfg.rl.spec.validate().map_err(|e| anyhow!("{e}"))?;
        Ok(cfg)
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Keys of `given` that did not survive a round trip through `RunConfig`.
fn unknown_keys(given: &Value, resolved: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Table(g), Value::Table(r)) = (given, resolved) else { return };
    for (k, v) in g {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match r.get(k) {
            Some(rv) => unknown_keys(v, rv, &path, out),
            None => out.push(path),
        }
    }
}

/// Applies one `a.b.c=value` override. Values parse as TOML, falling back
/// to a bare string.
pub fn set(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override {assignment:?} is not key=value"))?;
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.trim().split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Table(t) = node else {
            bail!("override {key:?}: {} is not a section", parts[..i].join("."));
        };
        if i + 1 == parts.len() {
            t.insert(part.to_string(), value);
            return Ok(());
        }
        node = t
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
    }
    Ok(())
}
