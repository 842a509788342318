use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{plan_batch, random_plan, PlannerConfig};
use crate::error::{Error, Result};
use crate::nets::{NetConfig, ParameterSet};
use crate::tensor::{Real, Tensor};
use crate::worlds::{self, EnvConfig, Image, Task, WorldState};

/// Picks actions for a set of running episodes.
pub trait Controller {
    /// `ids` are indices into the episode list given to [`run_episodes`];
    /// the other slices are aligned with `ids`.
    fn act(&mut self, ids: &[usize], obs: &[&Image], q: &[Vec<f64>], goals: &[&Image]) -> Result<Vec<[f64; 2]>>;
}

#[derive(Clone, Debug)]
pub struct Episode {
    /// Initial state followed by the state after every executed action.
    pub states: Vec<WorldState>,
    /// Executed (clamped) actions.
    pub actions: Vec<[f64; 2]>,
    pub success: bool,
}

/// Runs episodes in lockstep until each succeeds or `max_steps` actions have
/// been executed. Success is checked before every action, so an episode that
/// starts on its goal executes nothing.
pub fn run_episodes(
    initial: &[WorldState],
    goals: &[Image],
    env: &EnvConfig,
    max_steps: usize,
    ctrl: &mut dyn Controller,
) -> Result<Vec<Episode>> {
    if initial.len() != goals.len() {
        return Err(Error::InvalidArgument("one goal image per episode required".into()));
    }
    let mut eps: Vec<Episode> = initial
        .iter()
        .map(|s| Episode {
            states: vec![s.clone()],
            actions: Vec::new(),
            success: worlds::success(s, env),
        })
        .collect();
    for _ in 0..max_steps {
        let ids: Vec<usize> = (0..eps.len()).filter(|&i| !eps[i].success).collect();
        if ids.is_empty() {
            break;
        }
        let current: Vec<&WorldState> = ids.iter().map(|&i| eps[i].states.last().expect("nonempty")).collect();
        let frames: Vec<Image> = current.iter().map(|s| worlds::render(s, env)).collect();
        let obs: Vec<&Image> = frames.iter().collect();
        let q: Vec<Vec<f64>> = current.iter().map(|s| s.embodiment()).collect();
        let gs: Vec<&Image> = ids.iter().map(|&i| &goals[i]).collect();
        let acts = ctrl.act(&ids, &obs, &q, &gs)?;
        if acts.len() != ids.len() {
            return Err(Error::InvalidArgument("controller returned the wrong number of actions".into()));
        }
        for (&i, a) in ids.iter().zip(acts) {
            let a = [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)];
            let next = worlds::step(eps[i].states.last().expect("nonempty"), a, env);
            eps[i].success = worlds::success(&next, env);
            eps[i].states.push(next);
            eps[i].actions.push(a);
        }
    }
    Ok(eps)
}

/// UPN under model-predictive control: plan, execute the first action,
/// replan.
pub struct UpnMpc<'a, T: Real> {
    pub params: &'a ParameterSet<T>,
    pub net: &'a NetConfig,
    pub cfg: PlannerConfig,
    pub rng: ChaCha8Rng,
    previous: HashMap<usize, Vec<Vec<f64>>>,
}

impl<'a, T: Real> UpnMpc<'a, T> {
    pub fn new(params: &'a ParameterSet<T>, net: &'a NetConfig, cfg: PlannerConfig, seed: u64) -> Self {
        UpnMpc {
            params,
            net,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            previous: HashMap::new(),
        }
    }

    fn initial_plan(&mut self, ids: &[usize], horizon: usize) -> Vec<Tensor<T>> {
        let dim = self.net.action_dim;
        let mut plan = random_plan::<T, _>(&mut self.rng, horizon, ids.len(), dim);
        if self.cfg.warm_start {
            for (b, id) in ids.iter().enumerate() {
                let Some(prev) = self.previous.get(id) else { continue };
                // Shift by one executed step; the last step keeps its fresh draw.
                for (k, step) in prev.iter().skip(1).take(horizon - 1).enumerate() {
                    for (j, &v) in step.iter().enumerate() {
                        plan[k].data_mut()[b * dim + j] = T::of(v);
                    }
                }
            }
        }
        plan
    }
}

impl<T: Real> Controller for UpnMpc<'_, T> {
    fn act(&mut self, ids: &[usize], obs: &[&Image], q: &[Vec<f64>], goals: &[&Image]) -> Result<Vec<[f64; 2]>> {
        let horizon = self.cfg.effective_mpc_horizon();
        let init = self.initial_plan(ids, horizon);
        let plans = plan_batch(self.params, self.net, &self.cfg, obs, q, goals, horizon, Some(init), &mut self.rng)?;
        let mut out = Vec::with_capacity(ids.len());
        for (&id, p) in ids.iter().zip(plans) {
            out.push([p.actions[0][0], p.actions[0][1]]);
            if self.cfg.warm_start {
                self.previous.insert(id, p.actions);
            }
        }
        Ok(out)
    }
}

/// Runs one MPC episode from `world` towards `goal`.
#[allow(clippy::too_many_arguments)]
pub fn mpc_act<T: Real>(
    world: &WorldState,
    goal: &Image,
    params: &ParameterSet<T>,
    net: &NetConfig,
    cfg: &PlannerConfig,
    env: &EnvConfig,
    max_steps: usize,
    seed: u64,
) -> Result<Episode> {
    let mut ctrl = UpnMpc::new(params, net, cfg.clone(), seed);
    let mut eps = run_episodes(std::slice::from_ref(world), std::slice::from_ref(goal), env, max_steps, &mut ctrl)?;
    Ok(eps.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub model: String,
    pub n_p: usize,
    pub seed: u64,
    pub successes: usize,
    pub trials: usize,
    pub rate: f64,
}

/// Success rate of MPC with each planning-step count and seed over `tasks`.
#[allow(clippy::too_many_arguments)]
pub fn eval_plan_steps<T: Real>(
    params: &ParameterSet<T>,
    net: &NetConfig,
    cfg: &PlannerConfig,
    env: &EnvConfig,
    tasks: &[Task],
    n_ps: &[usize],
    seeds: &[u64],
    max_steps: usize,
) -> Result<Vec<EvalRow>> {
    let initial: Vec<WorldState> = tasks.iter().map(|t| t.initial.clone()).collect();
    let goals: Vec<Image> = tasks.iter().map(|t| t.goal_image.clone()).collect();
    let mut rows = Vec::new();
    for &n_p in n_ps {
        for &seed in seeds {
            let c = PlannerConfig { n_p, ..cfg.clone() };
            let mut ctrl = UpnMpc::new(params, net, c, seed);
            let eps = run_episodes(&initial, &goals, env, max_steps, &mut ctrl)?;
            let successes = eps.iter().filter(|e| e.success).count();
            log::info!("n_p={n_p} seed={seed}: {successes}/{}", eps.len());
            rows.push(EvalRow {
                model: "upn".into(),
                n_p,
                seed,
                successes,
                trials: eps.len(),
                rate: if eps.is_empty() { 0.0 } else { successes as f64 / eps.len() as f64 },
            });
        }
    }
    Ok(rows)
}

pub fn write_eval_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
