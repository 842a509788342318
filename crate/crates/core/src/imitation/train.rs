//! The outer training loop: sampling, updates, validation, checkpoints and
//! logs.

use std::fs::{File, OpenOptions};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_loss, imitate_step, sample_batch, Adam, Batch, BatchMode, TrainConfig};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::expert::DemoDataset;
use crate::gdp::{PlanMode, PlannerConfig};
use crate::nets::{init_params, ModelKind, NetConfig, ParameterSet};
use crate::tensor::Real;

const VALIDATION_STREAM: u64 = 1 << 62;

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index);
    r
}

/// Header stored in every model checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    pub precision: String,
    pub update: usize,
    pub val_loss: f64,
    pub net: NetConfig,
    pub planner: PlannerConfig,
}

impl CheckpointHeader {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("checkpoint header serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("checkpoint header: {e}")))
    }
}

/// Fixed validation batches; the plan initializations are fixed too, so the
/// loss is a deterministic function of the parameters.
#[derive(Clone, Debug)]
pub struct ValidationSet {
    pub batches: Vec<Batch>,
    pub seed: u64,
}

impl ValidationSet {
    pub fn build(dataset: &DemoDataset, indices: &[usize], cfg: &TrainConfig, kind: ModelKind) -> Result<Self> {
        let mut rng = stream(cfg.seed, VALIDATION_STREAM);
        let sampler = cfg.sampler();
        let batches = (0..cfg.validation_batches)
            .map(|_| {
                sample_batch(
                    dataset,
                    indices,
                    &sampler,
                    sampler.cutoff,
                    cfg.batch_size,
                    BatchMode::for_kind(kind),
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ValidationSet { batches, seed: cfg.seed })
    }
}

/// Mean imitation loss over the validation batches.
pub fn validation_loss<T: Real>(
    params: &ParameterSet<T>,
    kind: ModelKind,
    net: &NetConfig,
    planner: &PlannerConfig,
    val: &ValidationSet,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, b) in val.batches.iter().enumerate() {
        let mut rng = stream(val.seed, VALIDATION_STREAM + 1 + i as u64);
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let (loss, _) = batch_loss(&mut g, &p, kind, net, planner, b, PlanMode::Inference, &mut rng)?;
        total += g.value(loss).item().to_f64_lossy();
    }
    Ok(total / val.batches.len() as f64)
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub params: ParameterSet<T>,
    pub adam: Adam<T>,
    pub update: usize,
    pub best_val: f64,
    pub best_update: usize,
    pub initial_val: f64,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    update: usize,
    best_val: f64,
    best_update: usize,
    initial_val: f64,
    adam_t: u64,
    adam_lr: f64,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
}

impl<T: Real> TrainState<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut all = ParameterSet::new();
        for (prefix, set) in [("param/", &self.params), ("adam.m/", &self.adam.m), ("adam.v/", &self.adam.v)] {
            for (name, t) in set.iter() {
                all.insert(format!("{prefix}{name}"), t.clone())?;
            }
        }
        let header = StateHeader {
            update: self.update,
            best_val: self.best_val,
            best_update: self.best_update,
            initial_val: self.initial_val,
            adam_t: self.adam.t,
            adam_lr: self.adam.lr,
            adam_beta1: self.adam.beta1,
            adam_beta2: self.adam.beta2,
            adam_eps: self.adam.eps,
        };
        all.save(path, &toml::to_string(&header).expect("state header serializes"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (all, text) = ParameterSet::<T>::load(path)?;
        let h: StateHeader = toml::from_str(&text).map_err(|e| Error::format(path, format!("state header: {e}")))?;
        let mut sets = [ParameterSet::new(), ParameterSet::new(), ParameterSet::new()];
        for (name, t) in all.iter() {
            let (slot, rest) = if let Some(r) = name.strip_prefix("param/") {
                (0, r)
            } else if let Some(r) = name.strip_prefix("adam.m/") {
                (1, r)
            } else if let Some(r) = name.strip_prefix("adam.v/") {
                (2, r)
            } else {
                return Err(Error::format(path, format!("unexpected record {name}")));
            };
            sets[slot].insert(rest, t.clone())?;
        }
        let [params, m, v] = sets;
        Ok(TrainState {
            params,
            adam: Adam {
                lr: h.adam_lr,
                beta1: h.adam_beta1,
                beta2: h.adam_beta2,
                eps: h.adam_eps,
                t: h.adam_t,
                m,
                v,
            },
            update: h.update,
            best_val: h.best_val,
            best_update: h.best_update,
            initial_val: h.initial_val,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub initial_val: f64,
    pub best_val: f64,
    pub best_update: usize,
    pub final_val: f64,
    pub updates: usize,
}

#[derive(Serialize)]
struct RunHeader<'a> {
    kind: ModelKind,
    precision: String,
    poisson_lambda: f64,
    dataset_env: &'a str,
    dataset_seed: u64,
    dataset_size: usize,
    train_trajectories: usize,
    validation_trajectories: usize,
    test_trajectories: usize,
    train: &'a TrainConfig,
    net: &'a NetConfig,
}

#[derive(Serialize)]
struct TrainRow {
    update: usize,
    train_loss: f64,
    plan_loss: f64,
}

#[derive(Serialize)]
struct ValidationRow {
    update: usize,
    val_loss: f64,
    best_val_loss: f64,
}

fn csv_writer(path: &Path, append: bool) -> Result<csv::Writer<File>> {
    let exists = append && path.exists();
    let file = if exists {
        OpenOptions::new().append(true).open(path)
    } else {
        File::create(path)
    }
    .map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(!exists).from_writer(file))
}

fn precision_name<T: Real>() -> String {
    format!("{:?}", T::PRECISION).to_lowercase()
}

/// Trains `kind` on the training split of `dataset`, writing into `run_dir`:
///
/// - `run.toml`: resolved configuration
/// - `train_log.csv`: `update,train_loss,plan_loss` per update
/// - `validation.csv`: `update,val_loss,best_val_loss` every validation period
/// - `best.ckpt`: parameters with the lowest validation loss
/// - `final.ckpt`, `state.ckpt`: last parameters, and optimizer state for resuming
///
/// With `resume`, continues from `state.ckpt` when present.
pub fn train<T: Real>(
    dataset: &DemoDataset,
    kind: ModelKind,
    net: &NetConfig,
    cfg: &TrainConfig,
    run_dir: &Path,
    resume: bool,
) -> Result<TrainSummary> {
    cfg.validate()?;
    net.validate()?;
    if dataset.header.image_size != net.encoder.image_size || dataset.header.embodiment_dim != net.embodiment_dim {
        return Err(Error::Config(format!(
            "dataset has {0}x{0} images and {1}-d embodiment; network expects {2}x{2} and {3}",
            dataset.header.image_size, dataset.header.embodiment_dim, net.encoder.image_size, net.embodiment_dim
        )));
    }
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let split = dataset.split(cfg.split_seed)?;
    let sampler = cfg.sampler();
    let mode = BatchMode::for_kind(kind);
    let val = ValidationSet::build(dataset, &split.validation, cfg, kind)?;
    let planner = &cfg.planner;
    let checkpoint = |update: usize, val_loss: f64| CheckpointHeader {
        kind,
        precision: precision_name::<T>(),
        update,
        val_loss,
        net: net.clone(),
        planner: planner.clone(),
    };

    let state_path = run_dir.join("state.ckpt");
    let resumed = resume && state_path.exists();
    let mut state = if resumed {
        let s = TrainState::<T>::load(&state_path)?;
        log::info!("resuming {kind} at update {}", s.update);
        s
    } else {
        let params = init_params::<T, _>(net, kind, &mut stream(cfg.seed, 0))?;
        let initial_val = validation_loss(&params, kind, net, planner, &val)?;
        params.save(&run_dir.join("best.ckpt"), &checkpoint(0, initial_val).to_toml())?;
        let adam = Adam::new(&params, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
        TrainState {
            params,
            adam,
            update: 0,
            best_val: initial_val,
            best_update: 0,
            initial_val,
        }
    };
    if !resumed {
        let header = RunHeader {
            kind,
            precision: precision_name::<T>(),
            poisson_lambda: cfg.lambda(),
            dataset_env: &dataset.header.env_id,
            dataset_seed: dataset.header.seed,
            dataset_size: dataset.len(),
            train_trajectories: split.train.len(),
            validation_trajectories: split.validation.len(),
            test_trajectories: split.test.len(),
            train: cfg,
            net,
        };
        let path = run_dir.join("run.toml");
        std::fs::write(&path, toml::to_string(&header).expect("run header serializes")).map_err(|e| Error::io(&path, e))?;
    }

    let mut train_log = csv_writer(&run_dir.join("train_log.csv"), resumed)?;
    let mut val_log = csv_writer(&run_dir.join("validation.csv"), resumed)?;
    let mut last_val = None;
    for u in state.update..cfg.updates {
        let mut rng = stream(cfg.seed, u as u64 + 1);
        let batch = sample_batch(dataset, &split.train, &sampler, u, cfg.batch_size, mode, &mut rng)?;
        let stats = match imitate_step(&mut state.params, kind, net, planner, &batch, &mut state.adam, &mut rng) {
            Ok(s) => s,
            Err(e @ Error::NonFinite(_)) => {
                state.params.save(&run_dir.join("nonfinite.ckpt"), &checkpoint(u, f64::NAN).to_toml())?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        train_log.serialize(TrainRow {
            update: u + 1,
            train_loss: stats.loss,
            plan_loss: stats.plan_loss,
        })?;
        state.update = u + 1;
        if state.update % cfg.validation_period == 0 {
            let v = validation_loss(&state.params, kind, net, planner, &val)?;
            last_val = Some(v);
            if v < state.best_val {
                state.best_val = v;
                state.best_update = state.update;
                state.params.save(&run_dir.join("best.ckpt"), &checkpoint(state.update, v).to_toml())?;
            }
            val_log.serialize(ValidationRow {
                update: state.update,
                val_loss: v,
                best_val_loss: state.best_val,
            })?;
            val_log.flush().map_err(|e| Error::io(run_dir, e))?;
            train_log.flush().map_err(|e| Error::io(run_dir, e))?;
            state.save(&state_path)?;
            log::info!("{kind} update {}: train {:.5} val {:.5} best {:.5}", state.update, stats.loss, v, state.best_val);
        }
    }
    train_log.flush().map_err(|e| Error::io(run_dir, e))?;
    let final_val = match last_val {
        Some(v) if state.update % cfg.validation_period == 0 => v,
        _ => validation_loss(&state.params, kind, net, planner, &val)?,
    };
    state.params.save(&run_dir.join("final.ckpt"), &checkpoint(state.update, final_val).to_toml())?;
    state.save(&state_path)?;
    Ok(TrainSummary {
        initial_val: state.initial_val,
        best_val: state.best_val,
        best_update: state.best_update,
        final_val,
        updates: state.update,
    })
}

/// [`train`] restricted to the RIL and AIL baselines.
pub fn train_baseline<T: Real>(
    dataset: &DemoDataset,
    kind: ModelKind,
    net: &NetConfig,
    cfg: &TrainConfig,
    run_dir: &Path,
    resume: bool,
) -> Result<TrainSummary> {
    if kind == ModelKind::Upn {
        return Err(Error::InvalidArgument("train_baseline takes ril or ail".into()));
    }
    train::<T>(dataset, kind, net, cfg, run_dir, resume)
}
