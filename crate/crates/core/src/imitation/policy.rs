//! Closed-loop controllers for the baselines and a common evaluation entry.

use crate::autodiff::Graph;
use crate::error::Result;
use crate::gdp::{self, run_episodes, Controller, EvalRow, PlannerConfig};
use crate::nets::{self, ModelKind, NetConfig, ParameterSet};
use crate::tensor::Real;
use crate::worlds::{EnvConfig, Image, Task, WorldState};

fn first_actions<T: Real>(
    params: &ParameterSet<T>,
    net: &NetConfig,
    kind: ModelKind,
    obs: &[&Image],
    q: &[Vec<f64>],
    goals: &[&Image],
) -> Result<Vec<[f64; 2]>> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let pairs: Vec<(&Image, &Image)> = obs.iter().copied().zip(goals.iter().copied()).collect();
    let pair = g.constant(nets::image_pairs_to_tensor(&pairs, net.encoder.pixel_scale)?);
    let qv = g.constant(nets::rows_to_tensor(q)?);
    let a = match kind {
        ModelKind::Ail => nets::ail_forward(&mut g, &p, net, pair, qv, 1)?[0],
        _ => nets::ril_forward(&mut g, &p, net, pair, qv)?,
    };
    let v = g.value(a);
    Ok((0..obs.len()).map(|b| [v.row(b)[0].to_f64_lossy(), v.row(b)[1].to_f64_lossy()]).collect())
}

/// Executes the single predicted action.
pub struct RilPolicy<'a, T> {
    pub params: &'a ParameterSet<T>,
    pub net: &'a NetConfig,
}

impl<T: Real> Controller for RilPolicy<'_, T> {
    fn act(&mut self, _: &[usize], obs: &[&Image], q: &[Vec<f64>], goals: &[&Image]) -> Result<Vec<[f64; 2]>> {
        first_actions(self.params, self.net, ModelKind::Ril, obs, q, goals)
    }
}

/// Decodes a plan and executes its first action. The first decoded action
/// does not depend on the decoding length, so only one step is run.
pub struct AilPolicy<'a, T> {
    pub params: &'a ParameterSet<T>,
    pub net: &'a NetConfig,
}

impl<T: Real> Controller for AilPolicy<'_, T> {
    fn act(&mut self, _: &[usize], obs: &[&Image], q: &[Vec<f64>], goals: &[&Image]) -> Result<Vec<[f64; 2]>> {
        first_actions(self.params, self.net, ModelKind::Ail, obs, q, goals)
    }
}

/// Success rates on `tasks`. UPN gets one row per `(n_p, seed)`; the
/// deterministic baselines get one row per seed with `n_p = 0`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<T: Real>(
    kind: ModelKind,
    params: &ParameterSet<T>,
    net: &NetConfig,
    planner: &PlannerConfig,
    env: &EnvConfig,
    tasks: &[Task],
    n_ps: &[usize],
    seeds: &[u64],
    max_steps: usize,
) -> Result<Vec<EvalRow>> {
    if kind == ModelKind::Upn {
        return gdp::eval_plan_steps(params, net, planner, env, tasks, n_ps, seeds, max_steps);
    }
    let initial: Vec<WorldState> = tasks.iter().map(|t| t.initial.clone()).collect();
    let goals: Vec<Image> = tasks.iter().map(|t| t.goal_image.clone()).collect();
    let eps = match kind {
        ModelKind::Ril => run_episodes(&initial, &goals, env, max_steps, &mut RilPolicy { params, net })?,
        _ => run_episodes(&initial, &goals, env, max_steps, &mut AilPolicy { params, net })?,
    };
    let successes = eps.iter().filter(|e| e.success).count();
    let trials = eps.len();
    Ok(seeds
        .iter()
        .map(|&seed| EvalRow {
            model: kind.to_string(),
            n_p: 0,
            seed,
            successes,
            trials,
            rate: if trials == 0 { 0.0 } else { successes as f64 / trials as f64 },
        })
        .collect())
}
