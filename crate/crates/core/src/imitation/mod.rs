//! Imitation training of the planner network and the two baselines.

mod adam;
mod policy;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::expert::DemoDataset;
use crate::gdp::{self, PlanMode, PlannerConfig, UpnDynamics};
use crate::nets::{self, Bound, ModelKind, NetConfig, ParameterSet};
use crate::tensor::{Real, Tensor};
use crate::worlds::Image;

pub use adam::Adam;
pub use policy::{evaluate, AilPolicy, RilPolicy};
pub use train::{
    train, train_baseline, validation_loss, CheckpointHeader, TrainState, TrainSummary, ValidationSet,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Total parameter updates.
    pub updates: usize,
    pub validation_period: usize,
    /// Updates drawn from the Poisson curriculum before switching to uniform.
    pub curriculum_cutoff: usize,
    /// Poisson rate; `H_max / 5` when unset.
    pub poisson_lambda: Option<f64>,
    pub validation_batches: usize,
    pub seed: u64,
    /// Seed of the train/validation/test split, shared by every model kind.
    pub split_seed: u64,
    pub planner: PlannerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            learning_rate: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            updates: 1_000_000,
            validation_period: 10_000,
            curriculum_cutoff: 300_000,
            poisson_lambda: None,
            validation_batches: 4,
            seed: 0,
            split_seed: 0,
            planner: PlannerConfig::default(),
        }
    }
}

/// Planning horizon of the desk preset.
pub const DESK_HORIZON: usize = 20;

impl TrainConfig {
    /// Desk-scale preset (not the published schedule): short run, small
    /// batches, ten planning steps over at most 20 actions.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 16,
            updates: 12_000,
            validation_period: 1_000,
            curriculum_cutoff: 3_600,
            planner: PlannerConfig {
                n_p: 10,
                horizon: DESK_HORIZON,
                ..PlannerConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn lambda(&self) -> f64 {
        self.poisson_lambda.unwrap_or(self.planner.horizon as f64 / 5.0)
    }

    pub fn sampler(&self) -> CurriculumSampler {
        CurriculumSampler {
            h_max: self.planner.horizon,
            lambda: self.lambda(),
            cutoff: self.curriculum_cutoff,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.planner.validate()?;
        if self.batch_size == 0 || self.validation_period == 0 || self.validation_batches == 0 {
            return Err(Error::Config("batch_size, validation_period and validation_batches must be >= 1".into()));
        }
        if self.lambda() <= 0.0 {
            return Err(Error::Config("poisson_lambda must be > 0".into()));
        }
        Ok(())
    }
}

/// Horizon sampler: truncated Poisson for the first `cutoff` updates, then
/// uniform on `[1, h_max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumSampler {
    pub h_max: usize,
    pub lambda: f64,
    pub cutoff: usize,
}

impl CurriculumSampler {
    pub fn is_poisson(&self, update: usize) -> bool {
        update < self.cutoff
    }

    /// A horizon in `[1, min(h_max, bound)]`.
    pub fn sample<R: Rng + ?Sized>(&self, update: usize, bound: usize, rng: &mut R) -> usize {
        let hi = self.h_max.min(bound).max(1);
        if !self.is_poisson(update) {
            return rng.random_range(1..=hi);
        }
        let pmf = truncated_poisson(self.lambda, hi);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, p) in pmf.iter().enumerate() {
            acc += p;
            if u < acc {
                return k + 1;
            }
        }
        hi
    }
}

/// Poisson(`lambda`) probabilities of `1..=hi`, renormalized.
fn truncated_poisson(lambda: f64, hi: usize) -> Vec<f64> {
    let mut log_fact = 0.0;
    let logs: Vec<f64> = (1..=hi)
        .map(|k| {
            log_fact += (k as f64).ln();
            k as f64 * lambda.ln() - log_fact
        })
        .collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

/// How batch elements are cut from trajectories.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    /// `H` from the sampler, goal at `t + H`, expert plan `a*_{t:t+H}`.
    Subsequence,
    /// Goal any later frame, expert plan the single action `a*_t`.
    Reactive,
}

impl BatchMode {
    pub fn for_kind(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Ril => BatchMode::Reactive,
            ModelKind::Upn | ModelKind::Ail => BatchMode::Subsequence,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub obs: Vec<Image>,
    pub q: Vec<Vec<f64>>,
    pub goals: Vec<Image>,
    /// Expert actions, `horizons[b]` of them per element.
    pub expert: Vec<Vec<[f64; 2]>>,
    pub horizons: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn max_horizon(&self) -> usize {
        self.horizons.iter().copied().max().unwrap_or(0)
    }
}

/// Draws `size` training elements from the trajectories listed in `indices`.
#[allow(clippy::too_many_arguments)]
pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &DemoDataset,
    indices: &[usize],
    sampler: &CurriculumSampler,
    update: usize,
    size: usize,
    mode: BatchMode,
    rng: &mut R,
) -> Result<Batch> {
    let usable: Vec<usize> = indices
        .iter()
        .copied()
        .filter(|&i| dataset.trajectories.get(i).is_some_and(|t| !t.is_empty()))
        .collect();
    if usable.is_empty() {
        return Err(Error::InvalidArgument("no non-empty trajectories to sample".into()));
    }
    let mut b = Batch {
        obs: Vec::with_capacity(size),
        q: Vec::with_capacity(size),
        goals: Vec::with_capacity(size),
        expert: Vec::with_capacity(size),
        horizons: Vec::with_capacity(size),
    };
    for _ in 0..size {
        let tr = &dataset.trajectories[usable[rng.random_range(0..usable.len())]];
        let len = tr.len();
        let (t, goal, plan) = match mode {
            BatchMode::Subsequence => {
                let h = sampler.sample(update, len, rng);
                let t = rng.random_range(0..=len - h);
                (t, t + h, tr.actions[t..t + h].to_vec())
            }
            BatchMode::Reactive => {
                let t = rng.random_range(0..len);
                (t, rng.random_range(t + 1..=len), vec![tr.actions[t]])
            }
        };
        b.obs.push(tr.frames[t].clone());
        b.q.push(tr.embodiment[t].clone());
        b.goals.push(tr.frames[goal].clone());
        b.horizons.push(plan.len());
        b.expert.push(plan);
    }
    Ok(b)
}

/// Mean squared error over the valid `(element, step, dim)` entries of
/// `preds`, one `[B, A]` node per step.
fn masked_mse<T: Real>(g: &mut Graph<T>, preds: &[Var], batch: &Batch) -> Result<Var> {
    let n = batch.len();
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for (k, &p) in preds.iter().enumerate() {
        let mut target = Vec::with_capacity(n * 2);
        let mut mask = Vec::with_capacity(n * 2);
        for (plan, &h) in batch.expert.iter().zip(&batch.horizons) {
            let on = k < h;
            let a = if on { plan[k] } else { [0.0; 2] };
            target.extend(a.iter().map(|&v| T::of(v)));
            mask.extend(std::iter::repeat_n(if on { T::one() } else { T::zero() }, 2));
            count += if on { 2 } else { 0 };
        }
        let y = g.constant(Tensor::new(vec![n, 2], target)?);
        let d = g.sub(p, y)?;
        let d = if batch.horizons.iter().all(|&h| h > k) {
            d
        } else {
            let m = g.constant(Tensor::new(vec![n, 2], mask)?);
            g.mul(d, m)?
        };
        let sq = g.square(d);
        let s = g.sum(sq);
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidArgument("empty prediction".into()))?;
    Ok(g.scale(total, T::of(1.0 / count.max(1) as f64)))
}

/// Imitation loss of `kind` on `batch`, plus the mean inner planning loss
/// (zero for the baselines).
#[allow(clippy::too_many_arguments)]
pub fn batch_loss<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    p: &Bound,
    kind: ModelKind,
    net: &NetConfig,
    planner: &PlannerConfig,
    batch: &Batch,
    mode: PlanMode,
    rng: &mut R,
) -> Result<(Var, f64)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let scale = net.encoder.pixel_scale;
    let q = g.constant(nets::rows_to_tensor(&batch.q)?);
    let h = batch.max_horizon();
    match kind {
        ModelKind::Upn => {
            let obs: Vec<&Image> = batch.obs.iter().collect();
            let goals: Vec<&Image> = batch.goals.iter().collect();
            let o = g.constant(nets::images_to_tensor(&obs, scale)?);
            let og = g.constant(nets::images_to_tensor(&goals, scale)?);
            let (xt, xg) = gdp::encode_start_goal(g, p, net, o, q, og)?;
            let init = gdp::random_plan(rng, h, batch.len(), net.action_dim);
            let horizons = if batch.horizons.iter().all(|&v| v == h) { None } else { Some(batch.horizons.as_slice()) };
            let model = UpnDynamics { params: p, net };
            let out = gdp::optimize(g, &model, planner, xt, xg, init, horizons, mode)?;
            let n = out.trace.iter().map(Vec::len).sum::<usize>();
            let trace_mean = if n == 0 { 0.0 } else { out.trace.iter().flatten().sum::<f64>() / n as f64 };
            Ok((masked_mse(g, &out.actions, batch)?, trace_mean))
        }
        ModelKind::Ril | ModelKind::Ail => {
            let pairs: Vec<(&Image, &Image)> = batch.obs.iter().zip(&batch.goals).collect();
            let pair = g.constant(nets::image_pairs_to_tensor(&pairs, scale)?);
            let preds = if kind == ModelKind::Ril {
                vec![nets::ril_forward(g, p, net, pair, q)?]
            } else {
                nets::ail_forward(g, p, net, pair, q, h)?
            };
            Ok((masked_mse(g, &preds, batch)?, 0.0))
        }
    }
}

/// Loss values of one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub plan_loss: f64,
}

/// Gradients of the imitation loss with respect to every parameter, in name
/// order, with the loss values.
#[allow(clippy::too_many_arguments)]
pub fn loss_gradients<T: Real, R: Rng + ?Sized>(
    params: &ParameterSet<T>,
    kind: ModelKind,
    net: &NetConfig,
    planner: &PlannerConfig,
    batch: &Batch,
    rng: &mut R,
) -> Result<(Vec<Tensor<T>>, StepStats)> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, true);
    let (loss, plan_loss) = batch_loss(&mut g, &p, kind, net, planner, batch, PlanMode::Train, rng)?;
    let value = g.value(loss).item().to_f64_lossy();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("imitation loss is {value}")));
    }
    let grads = g.grad(loss, &p.vars(), false)?;
    let grads = grads.iter().map(|v| g.value(*v).clone()).collect();
    Ok((grads, StepStats { loss: value, plan_loss }))
}

/// One Adam update on the imitation loss of `batch`.
#[allow(clippy::too_many_arguments)]
pub fn imitate_step<T: Real, R: Rng + ?Sized>(
    params: &mut ParameterSet<T>,
    kind: ModelKind,
    net: &NetConfig,
    planner: &PlannerConfig,
    batch: &Batch,
    adam: &mut Adam<T>,
    rng: &mut R,
) -> Result<StepStats> {
    let (grads, stats) = loss_gradients(params, kind, net, planner, batch, rng)?;
    adam.step(params, &grads)?;
    Ok(stats)
}
