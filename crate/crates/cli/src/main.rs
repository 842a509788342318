//! `upn`: dataset generation, training, evaluation, latent maps and
//! transfer RL from one entry point.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use upn::expert::{build_dataset, DemoDataset};
use upn::gdp::write_eval_csv;
use upn::imitation::{evaluate, train, train_baseline, CheckpointHeader};
use upn::nets::{ModelKind, ParameterSet};
use upn::rl::{latent_map, train_transfer, CurveRow, LatentEncoder, RewardSource, RewardSpec, TransferEnv};
use upn::worlds::{sample_task, LayoutMode, RobotKind};
use upn::Real;

use config::{PrecisionArg, Preset, RunConfig};

const DATASET_FILE: &str = "demos.upnd";

#[derive(Parser)]
#[command(name = "upn", version, about = "Universal planning networks at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Output run directory.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with sections mirroring the module names.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base defaults the config file is merged onto.
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// `section.key=value` override, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvArg {
    Point,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Fovg,
    Vovg,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Upn,
    Ril,
    Ail,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an expert demonstration dataset.
    GenDemos {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "point")]
        env: EnvArg,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train UPN or a baseline on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        model: ModelArg,
        #[arg(long, value_enum)]
        precision: Option<PrecisionArg>,
        #[arg(long)]
        updates: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Drop second-order terms of the inner planning loop.
        #[arg(long)]
        stop_inner_grad: bool,
        /// Continue from `state.ckpt` in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Success rates of a checkpoint on held-out tasks.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tasks: Option<usize>,
        /// Planning-step counts, comma separated.
        #[arg(long, value_delimiter = ',')]
        n_p: Option<Vec<usize>>,
        /// Evaluation seeds, comma separated.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Latent distance from a reference state over a probe grid.
    LatentMap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        resolution: Option<usize>,
        /// Reference position `x,y` in meters.
        #[arg(long, value_delimiter = ',')]
        reference: Option<Vec<f64>>,
    },
    /// Policy optimization on latent (or pixel) rewards.
    TrainRl {
        #[command(flatten)]
        common: Common,
        /// UPN checkpoint providing the encoder.
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        env: Option<TransferEnv>,
        #[arg(long)]
        reward: Option<RewardSource>,
        /// Number of seeds, run one after another from `rl.seed`.
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// Use the two-term mixture reward.
        #[arg(long)]
        mixture: bool,
    },
}

/// A failure and its exit code: 1 for usage and configuration errors, 2 for
/// runtime failures.
struct Failure(u8, anyhow::Error);

fn usage<T>(r: Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(|e| Failure(1, e))
}

fn runtime<T>(r: Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(|e| Failure(2, e))
}

impl Common {
    fn resolve(&self) -> std::result::Result<RunConfig, Failure> {
        usage(RunConfig::resolve(self.preset, self.config.as_deref(), &self.overrides))
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn create_run_dir(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write(&dir.join("config.toml"), cfg.to_toml())
}

fn gen_demos(common: &Common, mode: Option<ModeArg>, n: Option<usize>, seed: Option<u64>) -> std::result::Result<(), Failure> {
    let mut cfg = common.resolve()?;
    if let Some(m) = mode {
        cfg.env.layout_mode = match m {
            ModeArg::Fovg => LayoutMode::Fovg,
            ModeArg::Vovg => LayoutMode::Vovg,
        };
    }
    if let Some(n) = n {
        cfg.demos.n = n;
    }
    if let Some(s) = seed {
        cfg.demos.seed = s;
    }
    let data = runtime(build_dataset(&cfg.env, &cfg.expert, cfg.demos.n, cfg.demos.seed).map_err(Into::into))?;
    runtime(create_run_dir(&common.out, &cfg))?;
    runtime(data.save(&common.out.join(DATASET_FILE)).map_err(Into::into))?;
    let s = &data.header.stats;
    println!(
        "{} demonstrations ({}) in {}: {} attempts, expert success {:.3}, hindsight {:.3}, discarded {}",
        data.len(),
        data.header.env_id,
        common.out.join(DATASET_FILE).display(),
        s.attempts,
        s.expert_success_rate(),
        data.hindsight_fraction(),
        s.discarded
    );
    Ok(())
}

fn run_training<T: Real>(data: &DemoDataset, kind: ModelKind, cfg: &RunConfig, dir: &Path, resume: bool) -> Result<()> {
    let s = match kind {
        ModelKind::Upn => train::<T>(data, kind, &cfg.net, &cfg.train, dir, resume)?,
        _ => train_baseline::<T>(data, kind, &cfg.net, &cfg.train, dir, resume)?,
    };
    println!(
        "{kind}: {} updates, validation loss {:.6} -> best {:.6} (update {}), final {:.6}",
        s.updates, s.initial_val, s.best_val, s.best_update, s.final_val
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    common: &Common,
    dataset: &Path,
    model: ModelArg,
    precision: Option<PrecisionArg>,
    updates: Option<usize>,
    seed: Option<u64>,
    stop_inner_grad: bool,
    resume: bool,
) -> std::result::Result<(), Failure> {
    let mut cfg = common.resolve()?;
    if let Some(p) = precision {
        cfg.precision = p;
    }
    if let Some(u) = updates {
        cfg.train.updates = u;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.train.planner.stop_inner_grad |= stop_inner_grad;
    let kind = match model {
        ModelArg::Upn => ModelKind::Upn,
        ModelArg::Ril => ModelKind::Ril,
        ModelArg::Ail => ModelKind::Ail,
    };
    let data = runtime(DemoDataset::load(dataset).map_err(Into::into))?;
    runtime(create_run_dir(&common.out, &cfg))?;
    runtime(match cfg.precision {
        PrecisionArg::F32 => run_training::<f32>(&data, kind, &cfg, &common.out, resume),
        PrecisionArg::F64 => run_training::<f64>(&data, kind, &cfg, &common.out, resume),
    })
}

fn load_header(path: &Path) -> Result<CheckpointHeader> {
    let (_, text) = ParameterSet::<f64>::load_converting(path)?;
    Ok(CheckpointHeader::from_toml(&text)?)
}

fn eval_with<T: Real>(path: &Path, header: &CheckpointHeader, cfg: &RunConfig, out: &Path) -> Result<()> {
    let (params, _) = ParameterSet::<T>::load(path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.task_seed);
    let tasks = (0..cfg.eval.tasks)
        .map(|_| sample_task(&cfg.env, RobotKind::Point, &mut rng))
        .collect::<upn::Result<Vec<_>>>()?;
    let rows = evaluate(
        header.kind,
        &params,
        &header.net,
        &header.planner,
        &cfg.env,
        &tasks,
        &cfg.eval.n_p,
        &cfg.eval.seeds,
        cfg.eval.max_steps,
    )?;
    write_eval_csv(&out.join("eval.csv"), &rows)?;
    for r in &rows {
        println!("{} n_p={} seed={}: {}/{} = {:.3}", r.model, r.n_p, r.seed, r.successes, r.trials, r.rate);
    }
    Ok(())
}

fn eval_cmd(
    common: &Common,
    checkpoint: &Path,
    tasks: Option<usize>,
    n_p: Option<Vec<usize>>,
    seeds: Option<Vec<u64>>,
    max_steps: Option<usize>,
) -> std::result::Result<(), Failure> {
    let mut cfg = common.resolve()?;
    if let Some(t) = tasks {
        cfg.eval.tasks = t;
    }
    if let Some(n) = n_p {
        cfg.eval.n_p = n;
    }
    if let Some(s) = seeds {
        cfg.eval.seeds = s;
    }
    if let Some(m) = max_steps {
        cfg.eval.max_steps = m;
    }
    let header = runtime(load_header(checkpoint))?;
    if header.net.encoder.image_size != cfg.env.image_size {
        return Err(Failure(
            1,
            anyhow!(
                "checkpoint expects {} px images, env.image_size is {}",
                header.net.encoder.image_size,
                cfg.env.image_size
            ),
        ));
    }
    runtime(create_run_dir(&common.out, &cfg))?;
    runtime(match header.precision.as_str() {
        "f32" => eval_with::<f32>(checkpoint, &header, &cfg, &common.out),
        "f64" => eval_with::<f64>(checkpoint, &header, &cfg, &common.out),
        p => Err(anyhow!("unknown checkpoint precision {p:?}")),
    })
}

fn latent_map_cmd(common: &Common, checkpoint: &Path, resolution: Option<usize>, reference: Option<Vec<f64>>) -> std::result::Result<(), Failure> {
    let mut cfg = common.resolve()?;
    if let Some(r) = resolution {
        cfg.latent_map.resolution = r;
    }
    if let Some(r) = reference {
        if r.len() != 2 {
            return Err(Failure(1, anyhow::anyhow!("--reference takes x,y")));
        }
        cfg.latent_map.reference = [r[0], r[1]];
    }
    let encoder = runtime(LatentEncoder::load(checkpoint).map_err(Into::into))?;
    let map = runtime(
        latent_map(&encoder, &cfg.env, &cfg.env.fixed_obstacles(), cfg.latent_map.reference, cfg.latent_map.resolution)
            .map_err(Into::into),
    )?;
    runtime((|| {
        create_run_dir(&common.out, &cfg)?;
        map.write_csv(&common.out.join("latent_map.csv"))?;
        map.heatmap(cfg.latent_map.pixels_per_cell)
            .write_ppm(&common.out.join("latent_map.ppm"))?;
        let summary = format!(
            "probes = {}\nreference = [{}, {}]\ncorr_geodesic = {}\ncorr_euclidean = {}\n",
            map.cells.len(),
            map.reference.0,
            map.reference.1,
            map.corr_geodesic,
            map.corr_euclidean
        );
        write(&common.out.join("latent_map.toml"), summary)
    })())?;
    println!(
        "{} probes; correlation with geodesic {:.4}, with euclidean {:.4}",
        map.cells.len(),
        map.corr_geodesic,
        map.corr_euclidean
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct AggregateRow {
    env_steps: usize,
    mean_reward: f64,
    mean_success: f64,
    min_success: f64,
    max_success: f64,
    seeds: usize,
}

fn aggregate(curves: &[Vec<CurveRow>]) -> Vec<AggregateRow> {
    let len = curves.iter().map(Vec::len).min().unwrap_or(0);
    (0..len)
        .map(|i| {
            let rows: Vec<&CurveRow> = curves.iter().map(|c| &c[i]).collect();
            let n = rows.len() as f64;
            AggregateRow {
                env_steps: rows[0].env_steps,
                mean_reward: rows.iter().map(|r| r.mean_reward).sum::<f64>() / n,
                mean_success: rows.iter().map(|r| r.success_rate).sum::<f64>() / n,
                min_success: rows.iter().map(|r| r.success_rate).fold(f64::INFINITY, f64::min),
                max_success: rows.iter().map(|r| r.success_rate).fold(f64::NEG_INFINITY, f64::max),
                seeds: rows.len(),
            }
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn train_rl_cmd(
    common: &Common,
    encoder: &Path,
    env: Option<TransferEnv>,
    reward: Option<RewardSource>,
    seeds: Option<usize>,
    steps: Option<usize>,
    mixture: bool,
) -> std::result::Result<(), Failure> {
    let mut cfg = common.resolve()?;
    if let Some(e) = env {
        cfg.rl.env = e;
    }
    if let Some(r) = reward {
        cfg.rl.reward = r;
    }
    if let Some(s) = seeds {
        cfg.rl.seeds = s;
    }
    if let Some(s) = steps {
        cfg.rl.ppo.total_steps = s;
    }
    if mixture {
        cfg.rl.spec = RewardSpec::mixture();
    }
    if cfg.rl.seeds == 0 {
        return Err(Failure(1, anyhow!("--seeds must be positive")));
    }
    cfg.rl.spec.source = encoder.display().to_string();
    let enc = runtime(LatentEncoder::load(encoder).map_err(Into::into))?;
    runtime(create_run_dir(&common.out, &cfg))?;
    let mut curves = Vec::new();
    for i in 0..cfg.rl.seeds {
        let mut ppo = cfg.rl.ppo.clone();
        ppo.seed += i as u64;
        let dir = common.out.join(format!("seed{}", ppo.seed));
        let s = runtime(train_transfer(&enc, cfg.rl.env, &cfg.env, &cfg.rl.spec, cfg.rl.reward, &ppo, &dir).map_err(Into::into))?;
        println!(
            "{} reward, seed {}: {} steps, held-out success {:.3}",
            cfg.rl.reward, ppo.seed, s.env_steps, s.final_success
        );
        curves.push(s.curve);
    }
    runtime((|| {
        let path = common.out.join("aggregate.csv");
        let mut w = csv::Writer::from_path(&path)?;
        for row in aggregate(&curves) {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    })())
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.command {
        Command::GenDemos { common, env: EnvArg::Point, mode, n, seed } => gen_demos(&common, mode, n, seed),
        Command::Train {
            common,
            dataset,
            model,
            precision,
            updates,
            seed,
            stop_inner_grad,
            resume,
        } => train_cmd(&common, &dataset, model, precision, updates, seed, stop_inner_grad, resume),
        Command::Eval {
            common,
            checkpoint,
            tasks,
            n_p,
            seeds,
            max_steps,
        } => eval_cmd(&common, &checkpoint, tasks, n_p, seeds, max_steps),
        Command::LatentMap {
            common,
            checkpoint,
            resolution,
            reference,
        } => latent_map_cmd(&common, &checkpoint, resolution, reference),
        Command::TrainRl {
            common,
            encoder,
            env,
            reward,
            seeds,
            steps,
            mixture,
        } => train_rl_cmd(&common, &encoder, env, reward, seeds, steps, mixture),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
