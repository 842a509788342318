use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::RlConfig;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::imitation::Adam;
use crate::nets::{self, Bound, ParameterSet};
use crate::tensor::Tensor;

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal Gaussian policy with a state-independent log standard deviation
/// and a separate value network, both tanh MLPs.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPolicy {
    pub params: ParameterSet<f64>,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub hidden: Vec<usize>,
}

fn init_layer<R: Rng + ?Sized>(p: &mut ParameterSet<f64>, name: &str, fan_in: usize, out: usize, gain: f64, rng: &mut R) -> Result<()> {
    let bound = gain / (fan_in as f64).sqrt();
    let w = (0..fan_in * out).map(|_| rng.random_range(-bound..bound)).collect();
    p.insert(format!("{name}.w"), Tensor::new(vec![fan_in, out], w)?)?;
    p.insert(format!("{name}.b"), Tensor::zeros([1, out]))
}

impl GaussianPolicy {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, act_dim: usize, hidden: &[usize], init_log_std: f64, rng: &mut R) -> Result<Self> {
        if obs_dim == 0 || act_dim == 0 {
            return Err(Error::InvalidArgument("policy dimensions must be positive".into()));
        }
        let mut p = ParameterSet::new();
        for net in ["pi", "vf"] {
            let mut width = obs_dim;
            for (i, &h) in hidden.iter().enumerate() {
                init_layer(&mut p, &format!("{net}.fc{i}"), width, h, 1.0, rng)?;
                width = h;
            }
            let (out, gain) = if net == "pi" { (act_dim, 0.01) } else { (1, 1.0) };
            init_layer(&mut p, &format!("{net}.out"), width, out, gain, rng)?;
        }
        p.insert("log_std", Tensor::full([1, act_dim], init_log_std))?;
        Ok(GaussianPolicy {
            params: p,
            obs_dim,
            act_dim,
            hidden: hidden.to_vec(),
        })
    }

    fn mlp(&self, g: &mut Graph<f64>, p: &Bound, net: &str, x: Var) -> Result<Var> {
        let mut h = x;
        for i in 0..self.hidden.len() {
            let y = nets::dense(g, p, &format!("{net}.fc{i}"), h)?;
            h = g.tanh(y);
        }
        nets::dense(g, p, &format!("{net}.out"), h)
    }

    /// Action means `[N, A]` and values `[N, 1]`.
    pub fn forward(&self, g: &mut Graph<f64>, p: &Bound, obs: Var) -> Result<(Var, Var)> {
        Ok((self.mlp(g, p, "pi", obs)?, self.mlp(g, p, "vf", obs)?))
    }

    fn obs_tensor(&self, obs: &[Vec<f64>]) -> Result<Tensor<f64>> {
        if obs.iter().any(|o| o.len() != self.obs_dim) {
            return Err(Error::InvalidArgument(format!("policy expects {}-dimensional inputs", self.obs_dim)));
        }
        nets::rows_to_tensor(obs)
    }

    fn evaluate(&self, obs: &[Vec<f64>]) -> Result<(Tensor<f64>, Tensor<f64>)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let o = g.constant(self.obs_tensor(obs)?);
        let (m, v) = self.forward(&mut g, &p, o)?;
        Ok((g.value(m).clone(), g.value(v).clone()))
    }

    pub fn log_std(&self) -> &[f64] {
        self.params.get("log_std").expect("policy has log_std").data()
    }

    /// Log-density of `a` under `N(mean, exp(log_std)^2)`.
    pub fn log_prob(&self, mean: &[f64], a: &[f64]) -> f64 {
        let ls = self.log_std();
        mean.iter()
            .zip(a)
            .zip(ls)
            .map(|((m, x), s)| -0.5 * ((x - m) / s.exp()).powi(2) - s - 0.5 * LOG_2PI)
            .sum()
    }

    pub fn entropy(&self) -> f64 {
        self.log_std().iter().map(|s| s + 0.5 * (1.0 + LOG_2PI)).sum()
    }

    /// Samples actions; returns `(actions, log-probabilities, values)`.
    pub fn act<R: Rng + ?Sized>(&self, obs: &[Vec<f64>], rng: &mut R) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<f64>)> {
        let (m, v) = self.evaluate(obs)?;
        let ls = self.log_std().to_vec();
        let mut actions = Vec::with_capacity(obs.len());
        let mut logp = Vec::with_capacity(obs.len());
        for i in 0..obs.len() {
            let mean = m.row(i);
            let a: Vec<f64> = mean
                .iter()
                .zip(&ls)
                .map(|(mu, s)| mu + s.exp() * rng.sample::<f64, _>(StandardNormal))
                .collect();
            logp.push(self.log_prob(mean, &a));
            actions.push(a);
        }
        Ok((actions, logp, v.data().to_vec()))
    }

    pub fn mean_actions(&self, obs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let (m, _) = self.evaluate(obs)?;
        Ok((0..obs.len()).map(|i| m.row(i).to_vec()).collect())
    }

    pub fn values(&self, obs: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(self.evaluate(obs)?.1.data().to_vec())
    }
}

/// Transitions collected under the current policy.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PpoBatch {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub logp: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl PpoBatch {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn extend(&mut self, other: PpoBatch) {
        self.obs.extend(other.obs);
        self.actions.extend(other.actions);
        self.logp.extend(other.logp);
        self.advantages.extend(other.advantages);
        self.returns.extend(other.returns);
    }
}

/// Minibatch averages of one update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    /// Range of the clipped ratio over samples where clipping was active;
    /// `(1, 1)` when it never was.
    pub clipped_min: f64,
    pub clipped_max: f64,
    pub minibatches: usize,
}

fn normalized(adv: &[f64]) -> Vec<f64> {
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    adv.iter().map(|a| (a - mean) / (std + 1e-8)).collect()
}

fn column(v: &[f64]) -> Result<Tensor<f64>> {
    Tensor::new(vec![v.len(), 1], v.to_vec())
}

struct Minibatch {
    loss: Var,
    ratio: Var,
    logp: Var,
    policy: Var,
    value: Var,
}

fn minibatch_loss(g: &mut Graph<f64>, p: &Bound, policy: &GaussianPolicy, b: &PpoBatch, adv: &[f64], idx: &[usize], cfg: &RlConfig) -> Result<Minibatch> {
    let m = idx.len();
    let pick = |rows: &[Vec<f64>]| idx.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>();
    let obs = g.constant(policy.obs_tensor(&pick(&b.obs))?);
    let act = g.constant(nets::rows_to_tensor(&pick(&b.actions))?);
    let old = g.constant(column(&idx.iter().map(|&i| b.logp[i]).collect::<Vec<_>>())?);
    let a = g.constant(column(&idx.iter().map(|&i| adv[i]).collect::<Vec<_>>())?);
    let ret = g.constant(column(&idx.iter().map(|&i| b.returns[i]).collect::<Vec<_>>())?);

    let (mean, value) = policy.forward(g, p, obs)?;
    let ls = p.get("log_std")?;
    let shape = [m, policy.act_dim];
    let ls_b = g.broadcast(ls, &shape)?;
    let neg = g.neg(ls_b);
    let inv = g.exp(neg);
    let diff = g.sub(act, mean)?;
    let z = g.mul(diff, inv)?;
    let z2 = g.square(z);
    let quad = g.sum_last(z2)?;
    let norm = g.sum_last(ls_b)?;
    let half = g.scale(quad, -0.5);
    let lp = g.sub(half, norm)?;
    let logp = g.affine(lp, 1.0, -0.5 * LOG_2PI * policy.act_dim as f64);

    let delta = g.sub(logp, old)?;
    let ratio = g.exp(delta);
    let s1 = g.mul(ratio, a)?;
    let clipped = g.clip(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio)?;
    let s2 = g.mul(clipped, a)?;
    let surr = g.minimum(s1, s2)?;
    let sm = g.mean(surr);
    let policy_loss = g.neg(sm);

    let err = g.sub(value, ret)?;
    let e2 = g.square(err);
    let value_loss = g.mean(e2);

    let vl = g.scale(value_loss, cfg.value_coef);
    let mut loss = g.add(policy_loss, vl)?;
    if cfg.entropy_coef != 0.0 {
        let ent = g.sum(ls);
        let ent = g.scale(ent, -cfg.entropy_coef);
        loss = g.add(loss, ent)?;
    }
    Ok(Minibatch {
        loss,
        ratio,
        logp,
        policy: policy_loss,
        value: value_loss,
    })
}

/// One clipped-surrogate update over `cfg.epochs` shuffled passes.
pub fn ppo_update<R: Rng + ?Sized>(
    policy: &mut GaussianPolicy,
    adam: &mut Adam<f64>,
    batch: &PpoBatch,
    cfg: &RlConfig,
    rng: &mut R,
) -> Result<PpoStats> {
    let n = batch.len();
    if n == 0 || batch.actions.len() != n || batch.logp.len() != n || batch.advantages.len() != n || batch.returns.len() != n {
        return Err(Error::InvalidArgument("ppo batch is empty or ragged".into()));
    }
    let adv = normalized(&batch.advantages);
    let mut order: Vec<usize> = (0..n).collect();
    let mut s = PpoStats {
        clipped_min: 1.0,
        clipped_max: 1.0,
        ..PpoStats::default()
    };
    let (lo, hi) = (1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio);
    let mut clipped_count = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for idx in order.chunks(cfg.minibatch_size) {
            let mut g = Graph::new();
            let p = policy.params.bind(&mut g, true);
            let mb = minibatch_loss(&mut g, &p, policy, batch, &adv, idx, cfg)?;
            let loss = g.value(mb.loss).item();
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "ppo objective {loss} after {} minibatches: {s:?}",
                    s.minibatches
                )));
            }
            for (k, (&r, &lp)) in g.value(mb.ratio).data().iter().zip(g.value(mb.logp).data()).enumerate() {
                s.approx_kl += batch.logp[idx[k]] - lp;
                let active = (adv[idx[k]] > 0.0 && r > hi) || (adv[idx[k]] < 0.0 && r < lo);
                if active {
                    let c = r.clamp(lo, hi);
                    s.clipped_min = s.clipped_min.min(c);
                    s.clipped_max = s.clipped_max.max(c);
                    clipped_count += 1;
                }
            }
            s.policy_loss += g.value(mb.policy).item();
            s.value_loss += g.value(mb.value).item();
            s.minibatches += 1;
            let vars = p.vars();
            let grads = g.grad(mb.loss, &vars, false)?;
            let grads: Vec<Tensor<f64>> = grads.iter().map(|v| g.value(*v).clone()).collect();
            adam.step(&mut policy.params, &grads)?;
        }
    }
    let mb = s.minibatches as f64;
    let samples = (n * cfg.epochs) as f64;
    s.policy_loss /= mb;
    s.value_loss /= mb;
    s.approx_kl /= samples;
    s.clip_fraction = clipped_count as f64 / samples;
    s.entropy = policy.entropy();
    Ok(s)
}
