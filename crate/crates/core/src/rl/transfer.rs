use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{pixel_reward, GaussianPolicy, LatentEncoder, PpoBatch, RewardSpec, RlConfig};
use crate::error::{Error, Result};
use crate::imitation::Adam;
use crate::worlds::{self, render, sample_task, EnvConfig, Image, LayoutMode, RobotKind, Task, WorldState};

/// Held-out goals are drawn from this seed for every run so that runs with
/// different seeds or rewards face the same evaluation set.
const EVAL_SEED: u64 = 0x5EED_E7A1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferEnv {
    /// Unicycle robot in the training layout.
    Car,
    /// Point robot in randomly generated layouts.
    PointHard,
}

impl TransferEnv {
    pub fn robot(self) -> RobotKind {
        match self {
            TransferEnv::Car => RobotKind::Car,
            TransferEnv::PointHard => RobotKind::Point,
        }
    }

    pub fn configure(self, env: &EnvConfig) -> EnvConfig {
        let layout_mode = match self {
            TransferEnv::Car => env.layout_mode,
            TransferEnv::PointHard => LayoutMode::Vovg,
        };
        EnvConfig {
            layout_mode,
            ..env.clone()
        }
    }
}

impl std::str::FromStr for TransferEnv {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "car" => Ok(TransferEnv::Car),
            "point-hard" => Ok(TransferEnv::PointHard),
            _ => Err(Error::Config(format!("unknown transfer env {s:?} (car, point-hard)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardSource {
    Latent,
    Pixel,
}

impl std::str::FromStr for RewardSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "latent" => Ok(RewardSource::Latent),
            "pixel" => Ok(RewardSource::Pixel),
            _ => Err(Error::Config(format!("unknown reward {s:?} (latent, pixel)"))),
        }
    }
}

impl std::fmt::Display for RewardSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RewardSource::Latent => "latent",
            RewardSource::Pixel => "pixel",
        })
    }
}

/// Header of a policy checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyHeader {
    pub env: TransferEnv,
    pub reward: RewardSource,
    pub spec: RewardSpec,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub env_steps: usize,
    pub config: RlConfig,
    pub env_config: EnvConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveRow {
    pub env_steps: usize,
    pub mean_reward: f64,
    pub success_rate: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferSummary {
    pub curve: Vec<CurveRow>,
    pub final_success: f64,
    pub env_steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
struct LogRow {
    update: usize,
    env_steps: usize,
    mean_reward: f64,
    policy_loss: f64,
    value_loss: f64,
    entropy: f64,
    approx_kl: f64,
    clip_fraction: f64,
    clipped_min: f64,
    clipped_max: f64,
}

/// A task with its goal encoding cached.
#[derive(Clone, Debug)]
struct Goal {
    task: Task,
    latent: Vec<f64>,
}

struct Episodes<'a> {
    env: &'a EnvConfig,
    kind: TransferEnv,
    encoder: &'a LatentEncoder,
    fixed: Option<Goal>,
    rng: ChaCha8Rng,
}

impl Episodes<'_> {
    fn next(&mut self) -> Result<Goal> {
        let Some(fixed) = &self.fixed else {
            let task = sample_task(self.env, self.kind.robot(), &mut self.rng)?;
            let latent = self.encoder.encode(&[&task.goal_image])?.remove(0);
            return Ok(Goal { task, latent });
        };
        loop {
            let t = sample_task(self.env, self.kind.robot(), &mut self.rng)?;
            let mut initial = fixed.task.initial.clone();
            if initial.is_free(t.initial.pos, self.env) && worlds::dist(t.initial.pos, initial.goal) >= self.env.min_goal_distance {
                initial.pos = t.initial.pos;
                initial.heading = t.initial.heading;
                return Ok(Goal {
                    task: Task {
                        initial,
                        goal_image: fixed.task.goal_image.clone(),
                    },
                    latent: fixed.latent.clone(),
                });
            }
        }
    }
}

fn policy_input(state: &WorldState, goal: &[f64], fixed_goal: bool) -> Vec<f64> {
    let mut v = state.embodiment();
    if !fixed_goal {
        v.extend_from_slice(goal);
    }
    v
}

fn clamp(a: &[f64]) -> [f64; 2] {
    [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)]
}

fn rewards(source: RewardSource, encoder: &LatentEncoder, spec: &RewardSpec, frames: &[Image], goals: &[&Goal]) -> Result<Vec<f64>> {
    match source {
        RewardSource::Latent => {
            let refs: Vec<&Image> = frames.iter().collect();
            let x = encoder.encode(&refs)?;
            Ok(x.iter().zip(goals).map(|(x, g)| spec.reward(encoder.distance(x, &g.latent))).collect())
        }
        RewardSource::Pixel => frames
            .iter()
            .zip(goals)
            .map(|(f, g)| pixel_reward(f, &g.task.goal_image, spec, encoder.net.encoder.pixel_scale))
            .collect(),
    }
}

/// Success rate of the mean action on `goals`, episodes run in lockstep.
fn success_rate(policy: &GaussianPolicy, goals: &[Goal], env: &EnvConfig, fixed_goal: bool) -> Result<f64> {
    if goals.is_empty() {
        return Ok(0.0);
    }
    let mut states: Vec<WorldState> = goals.iter().map(|g| g.task.initial.clone()).collect();
    let mut done: Vec<bool> = states.iter().map(|s| worlds::success(s, env)).collect();
    for _ in 0..env.max_episode_steps {
        let live: Vec<usize> = (0..states.len()).filter(|&i| !done[i]).collect();
        if live.is_empty() {
            break;
        }
        let obs: Vec<Vec<f64>> = live.iter().map(|&i| policy_input(&states[i], &goals[i].latent, fixed_goal)).collect();
        let acts = policy.mean_actions(&obs)?;
        for (&i, a) in live.iter().zip(&acts) {
            states[i] = worlds::step(&states[i], clamp(a), env);
            done[i] = worlds::success(&states[i], env);
        }
    }
    Ok(done.iter().filter(|&&d| d).count() as f64 / goals.len() as f64)
}

/// Held-out success of `policy` on `n` goals from the fixed evaluation seed.
pub fn evaluate_policy(
    policy: &GaussianPolicy,
    encoder: &LatentEncoder,
    kind: TransferEnv,
    env: &EnvConfig,
    n: usize,
    fixed_goal: bool,
) -> Result<f64> {
    let env = kind.configure(env);
    let goals = eval_goals(encoder, kind, &env, n, fixed_goal)?;
    success_rate(policy, &goals, &env, fixed_goal)
}

fn eval_goals(encoder: &LatentEncoder, kind: TransferEnv, env: &EnvConfig, n: usize, fixed_goal: bool) -> Result<Vec<Goal>> {
    let mut src = Episodes {
        env,
        kind,
        encoder,
        fixed: None,
        rng: ChaCha8Rng::seed_from_u64(EVAL_SEED),
    };
    if fixed_goal {
        src.fixed = Some(fixed_goal_task(encoder, kind, env)?);
    }
    (0..n).map(|_| src.next()).collect()
}

/// The single goal of fixed-goal runs, shared by training and evaluation.
fn fixed_goal_task(encoder: &LatentEncoder, kind: TransferEnv, env: &EnvConfig) -> Result<Goal> {
    let mut rng = ChaCha8Rng::seed_from_u64(EVAL_SEED);
    rng.set_stream(1);
    let task = sample_task(env, kind.robot(), &mut rng)?;
    let latent = encoder.encode(&[&task.goal_image])?.remove(0);
    Ok(Goal { task, latent })
}

struct Slot {
    state: WorldState,
    goal: Goal,
    steps: usize,
    obs: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    logp: Vec<f64>,
    values: Vec<f64>,
    rewards: Vec<f64>,
}

impl Slot {
    fn new(goal: Goal) -> Self {
        Slot {
            state: goal.task.initial.clone(),
            goal,
            steps: 0,
            obs: Vec::new(),
            actions: Vec::new(),
            logp: Vec::new(),
            values: Vec::new(),
            rewards: Vec::new(),
        }
    }

    /// Closes the open segment, bootstrapping from `last_value`.
    fn flush(&mut self, last_value: f64, cfg: &RlConfig, out: &mut PpoBatch) -> Result<()> {
        if self.rewards.is_empty() {
            return Ok(());
        }
        let mut values = std::mem::take(&mut self.values);
        values.push(last_value);
        let (adv, ret) = super::gae(&self.rewards, &values, cfg.gamma, cfg.gae_lambda)?;
        out.extend(PpoBatch {
            obs: std::mem::take(&mut self.obs),
            actions: std::mem::take(&mut self.actions),
            logp: std::mem::take(&mut self.logp),
            advantages: adv,
            returns: ret,
        });
        self.rewards.clear();
        Ok(())
    }
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Trains a policy on `(q_t, f_phi(o_g))` inputs with per-step rewards from
/// `source`. Episodes end on success or at the step limit; both are
/// treated as truncations and bootstrapped from the value function.
///
/// Writes `rl.toml`, `curve.csv`, `ppo_log.csv` and `policy.ckpt` to
/// `run_dir`.
#[allow(clippy::too_many_arguments)]
pub fn train_transfer(
    encoder: &LatentEncoder,
    kind: TransferEnv,
    env: &EnvConfig,
    spec: &RewardSpec,
    source: RewardSource,
    cfg: &RlConfig,
    run_dir: &Path,
) -> Result<TransferSummary> {
    cfg.validate()?;
    spec.validate()?;
    if env.image_size != encoder.image_size() {
        return Err(Error::Config(format!(
            "environment renders {} px, encoder expects {} px",
            env.image_size,
            encoder.image_size()
        )));
    }
    let env = kind.configure(env);
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| Error::Io { path, source }
    };
    fs::create_dir_all(run_dir).map_err(io(run_dir))?;

    let obs_dim = kind.robot().embodiment_dim() + if cfg.fixed_goal { 0 } else { encoder.latent_dim() };
    let act_dim = kind.robot().action_dim();
    let stream = |i| {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(i);
        r
    };
    let mut policy = GaussianPolicy::new(obs_dim, act_dim, &cfg.hidden, cfg.init_log_std, &mut stream(0))?;
    let mut adam = Adam::new(&policy.params, cfg.learning_rate, 0.9, 0.999, 1e-8);
    let mut act_rng = stream(1);
    let mut episodes = Episodes {
        env: &env,
        kind,
        encoder,
        fixed: None,
        rng: stream(2),
    };
    if cfg.fixed_goal {
        episodes.fixed = Some(fixed_goal_task(encoder, kind, &env)?);
    }
    let mut shuffle_rng = stream(3);
    let held_out = eval_goals(encoder, kind, &env, cfg.eval_tasks, cfg.fixed_goal)?;

    let mut header = PolicyHeader {
        env: kind,
        reward: source,
        spec: spec.clone(),
        obs_dim,
        act_dim,
        env_steps: 0,
        config: cfg.clone(),
        env_config: env.clone(),
    };
    let toml_text = |h: &PolicyHeader| toml::to_string(h).expect("policy header serializes");
    let rl_toml = run_dir.join("rl.toml");
    fs::write(&rl_toml, toml_text(&header)).map_err(io(&rl_toml))?;

    let mut slots: Vec<Slot> = (0..cfg.num_envs).map(|_| episodes.next().map(Slot::new)).collect::<Result<_>>()?;
    let updates = (cfg.total_steps / cfg.steps_per_batch).max(1);
    let per_env = cfg.steps_per_batch / cfg.num_envs;
    let mut curve = Vec::new();
    let mut log = Vec::new();
    let (mut reward_sum, mut reward_count) = (0.0, 0usize);
    let mut env_steps = 0;

    for update in 1..=updates {
        let mut batch = PpoBatch::default();
        for _ in 0..per_env {
            let obs: Vec<Vec<f64>> = slots
                .iter()
                .map(|s| policy_input(&s.state, &s.goal.latent, cfg.fixed_goal))
                .collect();
            let (actions, logp, values) = policy.act(&obs, &mut act_rng)?;
            for (s, a) in slots.iter_mut().zip(&actions) {
                s.state = worlds::step(&s.state, clamp(a), &env);
                s.steps += 1;
            }
            let frames: Vec<Image> = slots.iter().map(|s| render(&s.state, &env)).collect();
            let goals: Vec<&Goal> = slots.iter().map(|s| &s.goal).collect();
            let r = rewards(source, encoder, spec, &frames, &goals)?;
            for (((s, o), a), ((lp, v), r)) in slots
                .iter_mut()
                .zip(obs)
                .zip(actions)
                .zip(logp.into_iter().zip(values).zip(&r))
            {
                s.obs.push(o);
                s.actions.push(a);
                s.logp.push(lp);
                s.values.push(v);
                s.rewards.push(*r);
                reward_sum += r;
                reward_count += 1;
            }
            env_steps += slots.len();
            let finished: Vec<usize> = (0..slots.len())
                .filter(|&i| worlds::success(&slots[i].state, &env) || slots[i].steps >= env.max_episode_steps)
                .collect();
            if !finished.is_empty() {
                let obs: Vec<Vec<f64>> = finished
                    .iter()
                    .map(|&i| policy_input(&slots[i].state, &slots[i].goal.latent, cfg.fixed_goal))
                    .collect();
                let last = policy.values(&obs)?;
                for (&i, v) in finished.iter().zip(last) {
                    slots[i].flush(v, cfg, &mut batch)?;
                    slots[i] = Slot::new(episodes.next()?);
                }
            }
        }
        let obs: Vec<Vec<f64>> = slots
            .iter()
            .map(|s| policy_input(&s.state, &s.goal.latent, cfg.fixed_goal))
            .collect();
        let last = policy.values(&obs)?;
        for (s, v) in slots.iter_mut().zip(last) {
            s.flush(v, cfg, &mut batch)?;
        }

        let stats = super::ppo_update(&mut policy, &mut adam, &batch, cfg, &mut shuffle_rng)?;
        let mean_reward = reward_sum / reward_count.max(1) as f64;
        log.push(LogRow {
            update,
            env_steps,
            mean_reward,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            approx_kl: stats.approx_kl,
            clip_fraction: stats.clip_fraction,
            clipped_min: stats.clipped_min,
            clipped_max: stats.clipped_max,
        });
        if update % cfg.eval_period == 0 || update == updates {
            let rate = success_rate(&policy, &held_out, &env, cfg.fixed_goal)?;
            log::info!("update {update}: {env_steps} steps, reward {mean_reward:.4}, success {rate:.3}");
            curve.push(CurveRow {
                env_steps,
                mean_reward,
                success_rate: rate,
                seed: cfg.seed,
            });
            reward_sum = 0.0;
            reward_count = 0;
        }
    }

    write_csv(&run_dir.join("curve.csv"), &curve)?;
    write_csv(&run_dir.join("ppo_log.csv"), &log)?;
    header.env_steps = env_steps;
    policy.params.save(&run_dir.join("policy.ckpt"), &toml_text(&header))?;
    Ok(TransferSummary {
        final_success: curve.last().map_or(0.0, |c| c.success_rate),
        curve,
        env_steps,
    })
}

impl GaussianPolicy {
    /// Rebuilds a policy from a checkpoint written by [`train_transfer`].
    pub fn load(path: &Path) -> Result<(Self, PolicyHeader)> {
        let (params, text) = crate::nets::ParameterSet::<f64>::load(path)?;
        let header: PolicyHeader = toml::from_str(&text).map_err(|e| Error::Config(format!("policy header: {e}")))?;
        let policy = GaussianPolicy {
            params,
            obs_dim: header.obs_dim,
            act_dim: header.act_dim,
            hidden: header.config.hidden.clone(),
        };
        Ok((policy, header))
    }
}
