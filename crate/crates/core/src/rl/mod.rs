//! Dense rewards from a trained encoder's latent metric, and a small
//! clipped-surrogate policy-gradient learner that optimizes them.

mod map;
mod ppo;
mod transfer;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{huber, Graph};
use crate::error::{Error, Result};
use crate::imitation::CheckpointHeader;
use crate::nets::{self, ModelKind, NetConfig, ParameterSet};
use crate::worlds::Image;

pub use map::{latent_map, pearson, LatentMap, MapCell, GEODESIC_RESOLUTION};
pub use ppo::{GaussianPolicy, PpoBatch, PpoStats, ppo_update};
pub use transfer::{
    evaluate_policy, train_transfer, CurveRow, PolicyHeader, RewardSource, TransferEnv, TransferSummary,
};

/// Huber threshold used for latent distances, matching planner training.
pub const LATENT_HUBER_DELTA: f64 = 0.85;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardTerm {
    pub weight: f64,
    pub sigma: f64,
}

/// `r(d) = sum_k w_k exp(-sigma_k d)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub terms: Vec<RewardTerm>,
    /// Identifier of the encoder checkpoint the distances come from.
    #[serde(default)]
    pub source: String,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self::single(2.5)
    }
}

impl RewardSpec {
    pub fn single(sigma: f64) -> Self {
        RewardSpec {
            terms: vec![RewardTerm { weight: 1.0, sigma }],
            source: String::new(),
        }
    }

    /// `0.6 e^{-d} + 0.4 e^{-2.5 d}`.
    pub fn mixture() -> Self {
        RewardSpec {
            terms: vec![
                RewardTerm { weight: 0.6, sigma: 1.0 },
                RewardTerm { weight: 0.4, sigma: 2.5 },
            ],
            source: String::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.terms.is_empty() {
            return Err(Error::Config("reward spec has no terms".into()));
        }
        if self.terms.iter().any(|t| !(t.weight > 0.0) || !(t.sigma > 0.0) || !t.sigma.is_finite()) {
            return Err(Error::Config("reward weights and temperatures must be positive".into()));
        }
        let total: f64 = self.terms.iter().map(|t| t.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("reward weights sum to {total}, expected 1")));
        }
        Ok(())
    }

    pub fn reward(&self, d: f64) -> f64 {
        self.terms.iter().map(|t| t.weight * (-t.sigma * d).exp()).sum()
    }
}

/// Mean elementwise Huber distance.
pub fn huber_mean(a: &[f64], b: &[f64], delta: f64) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| huber(x - y, delta)).sum::<f64>() / a.len() as f64
}

/// Control reward on raw pixels scaled by `scale`.
pub fn pixel_reward(o_t: &Image, o_g: &Image, spec: &RewardSpec, scale: f64) -> Result<f64> {
    if (o_t.width, o_t.height) != (o_g.width, o_g.height) {
        return Err(Error::InvalidArgument("pixel reward images differ in size".into()));
    }
    let a: Vec<f64> = o_t.data.iter().map(|&v| v as f64 * scale).collect();
    let b: Vec<f64> = o_g.data.iter().map(|&v| v as f64 * scale).collect();
    Ok(spec.reward(huber_mean(&a, &b, LATENT_HUBER_DELTA)))
}

/// A frozen planner encoder `f_phi` used as a reward metric.
#[derive(Clone, Debug)]
pub struct LatentEncoder {
    pub params: ParameterSet<f64>,
    pub net: NetConfig,
    pub delta: f64,
}

impl LatentEncoder {
    pub fn new(params: ParameterSet<f64>, net: NetConfig) -> Result<Self> {
        net.validate()?;
        for (i, _) in net.encoder.conv.iter().enumerate() {
            let w = params
                .get(&format!("enc.conv{i}.w"))
                .ok_or_else(|| Error::Config(format!("checkpoint lacks enc.conv{i}.w")))?;
            if w.shape()[1] != if i == 0 { net.encoder.in_channels } else { net.encoder.conv[i - 1].out_channels } {
                return Err(Error::Config(format!("enc.conv{i}.w has shape {:?}", w.shape())));
            }
        }
        Ok(LatentEncoder {
            params,
            net,
            delta: LATENT_HUBER_DELTA,
        })
    }

    /// Loads the encoder of a UPN checkpoint of either precision.
    pub fn load(path: &Path) -> Result<Self> {
        let (params, header) = ParameterSet::<f64>::load_converting(path)?;
        let header = CheckpointHeader::from_toml(&header)?;
        if header.kind != ModelKind::Upn {
            return Err(Error::Config(format!("{} is a {} checkpoint, expected upn", path.display(), header.kind)));
        }
        if header.planner.huber_delta != LATENT_HUBER_DELTA {
            return Err(Error::Config(format!("checkpoint trained with huber delta {}", header.planner.huber_delta)));
        }
        Self::new(params, header.net)
    }

    pub fn image_size(&self) -> usize {
        self.net.encoder.image_size
    }

    pub fn latent_dim(&self) -> usize {
        self.net.latent_dim()
    }

    pub fn encode(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::<f64>::new();
        let p = self.params.bind(&mut g, false);
        let o = g.constant(nets::images_to_tensor(images, self.net.encoder.pixel_scale)?);
        let x = nets::encode(&mut g, &p, &self.net.encoder, self.net.ln_eps, o)?;
        let v = g.value(x);
        Ok((0..images.len()).map(|i| v.row(i).to_vec()).collect())
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        huber_mean(a, b, self.delta)
    }
}

/// Reward of the latent pair `(x_t, x_g)` under `spec`.
pub fn latent_reward(encoder: &LatentEncoder, x_t: &[f64], x_g: &[f64], spec: &RewardSpec) -> f64 {
    spec.reward(encoder.distance(x_t, x_g))
}

/// Generalized advantage estimates and value targets for one segment.
/// `values` carries the bootstrap value as its last entry.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if values.len() != rewards.len() + 1 {
        return Err(Error::InvalidArgument(format!(
            "gae needs {} values, got {}",
            rewards.len() + 1,
            values.len()
        )));
    }
    let mut adv = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Policy-gradient settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RlConfig {
    pub steps_per_batch: usize,
    pub clip_ratio: f64,
    pub gae_lambda: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub init_log_std: f64,
    /// Environment steps for the whole run.
    pub total_steps: usize,
    /// Environments stepped in lockstep during collection.
    pub num_envs: usize,
    /// Held-out goals per evaluation.
    pub eval_tasks: usize,
    /// Updates between evaluations.
    pub eval_period: usize,
    /// Drops the goal feature from the policy input.
    pub fixed_goal: bool,
    pub seed: u64,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            steps_per_batch: 4096,
            clip_ratio: 0.2,
            gae_lambda: 0.95,
            gamma: 0.99,
            epochs: 1,
            minibatch_size: 256,
            hidden: vec![128, 128, 128],
            learning_rate: 5e-5,
            value_coef: 0.5,
            entropy_coef: 0.0,
            init_log_std: 0.0,
            total_steps: 1_000_000,
            num_envs: 16,
            eval_tasks: 50,
            eval_period: 5,
            fixed_goal: false,
            seed: 0,
        }
    }
}

impl RlConfig {
    /// Desk budget: 2e5 environment steps.
    pub fn desk() -> Self {
        RlConfig {
            steps_per_batch: 2048,
            epochs: 4,
            learning_rate: 3e-4,
            total_steps: 200_000,
            init_log_std: -0.5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.steps_per_batch == 0 || self.minibatch_size == 0 || self.epochs == 0 {
            return bad("batch, minibatch and epochs must be positive");
        }
        if self.num_envs == 0 || self.steps_per_batch % self.num_envs != 0 {
            return bad("steps_per_batch must be a positive multiple of num_envs");
        }
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return bad("clip_ratio must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gamma and gae_lambda must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0) || self.hidden.contains(&0) || self.eval_period == 0 {
            return bad("learning rate, hidden widths and eval period must be positive");
        }
        Ok(())
    }
}
