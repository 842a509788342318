//! Gradient descent planning in latent space and receding-horizon control.
//!
//! The planner rolls a latent state forward through the dynamics for `H`
//! actions, scores the terminal state against the encoded goal, and takes
//! `n_p` clipped gradient steps on the actions. In training mode the whole
//! procedure stays on the graph so the imitation loss can be differentiated
//! through it.

mod mpc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nets::{self, Bound, NetConfig, ParameterSet};
use crate::tensor::{Real, Tensor};
use crate::worlds::Image;

pub use mpc::{
    eval_plan_steps, mpc_act, run_episodes, write_eval_csv, Controller, Episode, EvalRow, UpnMpc,
};

/// Planning horizon used for the point robot.
pub const HORIZON_POINT: usize = 50;
/// Planning horizon used for the reacher and pushing tasks.
pub const HORIZON_REACHER: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InnerLoss {
    /// Elementwise Huber with `huber_delta`.
    Huber,
    /// Elementwise squared error.
    Quadratic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    /// Number of plan updates.
    pub n_p: usize,
    pub step_first: f64,
    pub step_rest: f64,
    /// Inner gradients are clipped to `[-clip, clip]`.
    pub clip: f64,
    pub huber_delta: f64,
    pub loss: InnerLoss,
    /// Maximum planning horizon.
    pub horizon: usize,
    /// Horizon used when replanning under MPC; `0` means `horizon`.
    pub mpc_horizon: usize,
    /// Drop the dependence of inner gradients on earlier plan iterates
    /// (first-order ablation). Mixed parameter terms are kept.
    pub stop_inner_grad: bool,
    /// Under MPC, start each plan from the previous one shifted by a step.
    pub warm_start: bool,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            n_p: 40,
            step_first: 0.5,
            step_rest: 0.25,
            clip: 25.0,
            huber_delta: 0.85,
            loss: InnerLoss::Huber,
            horizon: HORIZON_POINT,
            mpc_horizon: 0,
            stop_inner_grad: false,
            warm_start: false,
        }
    }
}

impl PlannerConfig {
    pub fn step_size(&self, iteration: usize) -> f64 {
        if iteration == 0 {
            self.step_first
        } else {
            self.step_rest
        }
    }

    pub fn effective_mpc_horizon(&self) -> usize {
        if self.mpc_horizon == 0 {
            self.horizon
        } else {
            self.mpc_horizon
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("planner horizon must be >= 1".into()));
        }
        if self.clip <= 0.0 || self.huber_delta <= 0.0 {
            return Err(Error::Config("clip and huber_delta must be > 0".into()));
        }
        Ok(())
    }
}

/// One latent transition `x' = g(x, a)` on a batch.
pub trait LatentModel<T: Real> {
    fn step(&self, g: &mut Graph<T>, x: Var, a: Var) -> Result<Var>;
}

/// The UPN action encoder followed by the latent dynamics.
pub struct UpnDynamics<'a> {
    pub params: &'a Bound,
    pub net: &'a NetConfig,
}

impl<T: Real> LatentModel<T> for UpnDynamics<'_> {
    fn step(&self, g: &mut Graph<T>, x: Var, a: Var) -> Result<Var> {
        let u = nets::encode_action(g, self.params, self.net, a)?;
        nets::dynamics_step(g, self.params, self.net, x, u)
    }
}

/// `x' = x + a`; actions live in the latent space. Used as an analytic
/// oracle for the planner.
pub struct AdditiveDynamics;

impl<T: Real> LatentModel<T> for AdditiveDynamics {
    fn step(&self, g: &mut Graph<T>, x: Var, a: Var) -> Result<Var> {
        g.add(x, a)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlanMode {
    /// Values only; the graph is truncated between iterations.
    Inference,
    /// Every update stays on the graph for the outer gradient.
    Train,
}

/// Result of [`optimize`].
pub struct PlanOutput<T> {
    /// Final actions, one `[B, A]` node per step.
    pub actions: Vec<Var>,
    pub values: Vec<Tensor<T>>,
    /// `trace[i][b]`: loss of example `b` before update `i`.
    pub trace: Vec<Vec<f64>>,
}

/// Per-example inner loss `mean_d l(x_H - x_g)` as `[B, 1]`, plus the scalar
/// batch sum the gradients are taken of.
pub fn plan_loss<T: Real>(g: &mut Graph<T>, cfg: &PlannerConfig, x: Var, xg: Var) -> Result<(Var, Var)> {
    let z = g.sub(x, xg)?;
    let e = match cfg.loss {
        InnerLoss::Huber => g.huber(z, T::of(cfg.huber_delta))?,
        InnerLoss::Quadratic => g.square(z),
    };
    let per = g.mean_last(e)?;
    let total = g.sum(per);
    Ok((per, total))
}

/// Rolls `x0` forward through `actions`. Rows whose horizon is shorter than
/// the number of actions hold their state once their horizon is reached.
pub fn rollout<T: Real, M: LatentModel<T>>(
    g: &mut Graph<T>,
    model: &M,
    x0: Var,
    actions: &[Var],
    masks: &[Option<Var>],
) -> Result<Var> {
    let mut x = x0;
    for (k, &a) in actions.iter().enumerate() {
        let next = model.step(g, x, a)?;
        x = match masks.get(k).copied().flatten() {
            None => next,
            Some(m) => {
                let d = g.sub(next, x)?;
                let md = g.mul(m, d)?;
                g.add(x, md)?
            }
        };
    }
    Ok(x)
}

/// 0/1 masks `[B, D]` for steps where some row is past its horizon.
pub fn horizon_masks<T: Real>(g: &mut Graph<T>, horizons: &[usize], steps: usize, width: usize) -> Vec<Option<Var>> {
    (0..steps)
        .map(|k| {
            if horizons.iter().all(|&h| h > k) {
                return None;
            }
            let mut data = Vec::with_capacity(horizons.len() * width);
            for &h in horizons {
                let v = if h > k { T::one() } else { T::zero() };
                data.extend(std::iter::repeat_n(v, width));
            }
            Some(g.constant(Tensor::new(vec![horizons.len(), width], data).expect("mask shape")))
        })
        .collect()
}

/// Elementwise `U(-1, 1)` plan of `steps` tensors `[batch, dim]`.
pub fn random_plan<T: Real, R: Rng + ?Sized>(rng: &mut R, steps: usize, batch: usize, dim: usize) -> Vec<Tensor<T>> {
    (0..steps)
        .map(|_| {
            let data = (0..batch * dim).map(|_| T::of(rng.random_range(-1.0..1.0))).collect();
            Tensor::new(vec![batch, dim], data).expect("plan shape")
        })
        .collect()
}

fn check_finite(trace: &[f64], iteration: usize) -> Result<()> {
    if trace.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("planner loss is not finite at iteration {iteration}")))
    }
}

fn row_values<T: Real>(g: &Graph<T>, per: Var) -> Vec<f64> {
    g.value(per).data().iter().map(|v| v.to_f64_lossy()).collect()
}

/// Gradient descent on the plan. `x0` and `xg` are `[B, D]`; `init` holds
/// one `[B, A]` tensor per step; `horizons` optionally gives each row its own
/// number of active steps.
#[allow(clippy::too_many_arguments)]
pub fn optimize<T: Real, M: LatentModel<T>>(
    g: &mut Graph<T>,
    model: &M,
    cfg: &PlannerConfig,
    x0: Var,
    xg: Var,
    init: Vec<Tensor<T>>,
    horizons: Option<&[usize]>,
    mode: PlanMode,
) -> Result<PlanOutput<T>> {
    let steps = init.len();
    if steps == 0 {
        return Err(Error::InvalidArgument("plan needs at least one action".into()));
    }
    let width = g.shape(x0)[1];
    let masks = match horizons {
        Some(h) => {
            if h.len() != g.shape(x0)[0] || h.iter().any(|&v| v == 0 || v > steps) {
                return Err(Error::InvalidArgument(format!("horizons {h:?} do not fit {steps} steps")));
            }
            horizon_masks(g, h, steps, width)
        }
        None => vec![None; steps],
    };
    let mut trace = Vec::with_capacity(cfg.n_p);
    match mode {
        PlanMode::Inference => {
            let mark = g.len();
            let mut values = init;
            for i in 0..cfg.n_p {
                let acts: Vec<Var> = values.iter().map(|t| g.variable(t.clone())).collect();
                let x = rollout(g, model, x0, &acts, &masks)?;
                let (per, total) = plan_loss(g, cfg, x, xg)?;
                let rows = row_values(g, per);
                check_finite(&rows, i)?;
                trace.push(rows);
                let grads = g.grad(total, &acts, false)?;
                let alpha = T::of(cfg.step_size(i));
                let c = T::of(cfg.clip);
                for (v, gr) in values.iter_mut().zip(&grads) {
                    let gv = g.value(*gr).data().to_vec();
                    for (a, d) in v.data_mut().iter_mut().zip(gv) {
                        *a -= alpha * d.max(-c).min(c);
                    }
                }
                g.truncate(mark);
            }
            let actions = values.iter().map(|t| g.constant(t.clone())).collect();
            Ok(PlanOutput {
                actions,
                values,
                trace,
            })
        }
        PlanMode::Train => {
            let mut acts: Vec<Var> = init.into_iter().map(|t| g.variable(t)).collect();
            for i in 0..cfg.n_p {
                let wrt: Vec<Var> = if cfg.stop_inner_grad {
                    acts.iter().map(|&a| {
                        let v = g.value(a).clone();
                        g.variable(v)
                    }).collect()
                } else {
                    acts.clone()
                };
                let x = rollout(g, model, x0, &wrt, &masks)?;
                let (per, total) = plan_loss(g, cfg, x, xg)?;
                let rows = row_values(g, per);
                check_finite(&rows, i)?;
                trace.push(rows);
                let grads = g.grad(total, &wrt, true)?;
                let alpha = T::of(cfg.step_size(i));
                for (a, gr) in acts.iter_mut().zip(grads) {
                    let c = g.clip(gr, T::of(-cfg.clip), T::of(cfg.clip))?;
                    let step = g.scale(c, -alpha);
                    *a = g.add(*a, step)?;
                }
            }
            let values = acts.iter().map(|&a| g.value(a).clone()).collect();
            Ok(PlanOutput {
                actions: acts,
                values,
                trace,
            })
        }
    }
}

/// A plan for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    /// `H` action vectors.
    pub actions: Vec<Vec<f64>>,
    /// Inner loss before each of the `n_p` updates.
    pub loss_trace: Vec<f64>,
}

/// Encodes `o_t` (fused with `q_t`) and `o_g` for a batch. Returns
/// `(x_t, x_g)` as `[B, D]` nodes.
pub fn encode_start_goal<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    net: &NetConfig,
    obs: Var,
    q: Var,
    goal: Var,
) -> Result<(Var, Var)> {
    let eps = net.ln_eps;
    let x = nets::encode(g, p, &net.encoder, eps, obs)?;
    let xt = nets::fuse_embodiment(g, p, net, x, q)?;
    let xg = nets::encode(g, p, &net.encoder, eps, goal)?;
    Ok((xt, xg))
}

/// Plans for a batch of `(o_t, q_t, o_g)` with frozen parameters.
/// `init` defaults to a fresh `U(-1, 1)` plan drawn from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn plan_batch<T: Real, R: Rng + ?Sized>(
    params: &ParameterSet<T>,
    net: &NetConfig,
    cfg: &PlannerConfig,
    obs: &[&Image],
    q: &[Vec<f64>],
    goals: &[&Image],
    horizon: usize,
    init: Option<Vec<Tensor<T>>>,
    rng: &mut R,
) -> Result<Vec<Plan>> {
    if obs.len() != q.len() || obs.len() != goals.len() {
        return Err(Error::InvalidArgument("batch inputs differ in length".into()));
    }
    let batch = obs.len();
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let scale = net.encoder.pixel_scale;
    let o = g.constant(nets::images_to_tensor(obs, scale)?);
    let og = g.constant(nets::images_to_tensor(goals, scale)?);
    let qv = g.constant(nets::rows_to_tensor(q)?);
    let (xt, xg) = encode_start_goal(&mut g, &p, net, o, qv, og)?;
    let init = match init {
        Some(v) => v,
        None => random_plan(rng, horizon, batch, net.action_dim),
    };
    let model = UpnDynamics { params: &p, net };
    let out = optimize(&mut g, &model, cfg, xt, xg, init, None, PlanMode::Inference)?;
    Ok((0..batch)
        .map(|b| Plan {
            actions: out
                .values
                .iter()
                .map(|t| t.row(b).iter().map(|v| v.to_f64_lossy()).collect())
                .collect(),
            loss_trace: out.trace.iter().map(|r| r[b]).collect(),
        })
        .collect())
}

/// Plans for a single observation and goal.
#[allow(clippy::too_many_arguments)]
pub fn plan<T: Real, R: Rng + ?Sized>(
    params: &ParameterSet<T>,
    net: &NetConfig,
    cfg: &PlannerConfig,
    obs: &Image,
    q: &[f64],
    goal: &Image,
    rng: &mut R,
) -> Result<Plan> {
    let mut plans = plan_batch(params, net, cfg, &[obs], &[q.to_vec()], &[goal], cfg.horizon, None, rng)?;
    Ok(plans.remove(0))
}

#[cfg(test)]
mod tests;
