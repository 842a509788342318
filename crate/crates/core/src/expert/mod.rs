//! Demonstration generation: an A* waypoint expert tracked by a PD
//! controller, with hindsight relabeling of rollouts that miss their goal.

mod dataset;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::worlds::grid::OccupancyGrid;
use crate::worlds::{self, dist, EnvConfig, Rect, RobotKind, WorldState};

pub use dataset::{DatasetHeader, DemoDataset, Split, Trajectory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    /// Occupancy grid cell size, meters.
    pub resolution: f64,
    /// Extra clearance kept from obstacles when searching.
    pub clearance: f64,
    /// Distance at which an intermediate waypoint counts as reached.
    pub waypoint_tolerance: f64,
    pub kp: f64,
    pub kd: f64,
    /// Half-width of the uniform action noise.
    pub noise: f64,
    /// Maximum actions per demonstration.
    pub max_steps: usize,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            resolution: 0.02,
            clearance: 0.02,
            waypoint_tolerance: 0.06,
            kp: 16.0,
            kd: 6.0,
            noise: 0.1,
            max_steps: 50,
        }
    }
}

/// True if the open segment `p`-`q` passes through the interior of `r`.
fn segment_hits(p: [f64; 2], q: [f64; 2], r: &Rect) -> bool {
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for k in 0..2 {
        let d = q[k] - p[k];
        if d.abs() < 1e-15 {
            if p[k] <= r.min[k] || p[k] >= r.max[k] {
                return false;
            }
            continue;
        }
        let (a, b) = ((r.min[k] - p[k]) / d, (r.max[k] - p[k]) / d);
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    t1 - t0 > 1e-12
}

fn line_of_sight(p: [f64; 2], q: [f64; 2], inflated: &[Rect]) -> bool {
    !inflated.iter().any(|r| segment_hits(p, q, r))
}

/// Waypoints from `start` to `goal`: an 8-connected grid path around
/// obstacles inflated by the robot radius, greedily shortened to the
/// farthest waypoint in line of sight. Retries without the extra clearance
/// before reporting [`Error::Infeasible`].
pub fn shortest_path(
    obstacles: &[Rect],
    env: &EnvConfig,
    start: [f64; 2],
    goal: [f64; 2],
    expert: &ExpertConfig,
) -> Result<Vec<[f64; 2]>> {
    let inflated: Vec<Rect> = obstacles.iter().map(|r| r.inflate(env.robot_radius)).collect();
    if line_of_sight(start, goal, &inflated) {
        return Ok(vec![start, goal]);
    }
    for margin in [expert.clearance, 0.0] {
        let grid = OccupancyGrid::from_obstacles(obstacles, env, expert.resolution, margin);
        let (Some(s), Some(g)) = (grid.nearest_free(start), grid.nearest_free(goal)) else {
            continue;
        };
        let Some((cells, _)) = grid.shortest_path(s, g) else {
            continue;
        };
        let mut points = vec![start];
        points.extend(cells.iter().map(|&c| grid.center(c)));
        points.push(goal);
        return Ok(decimate(&points, &inflated));
    }
    Err(Error::Infeasible(format!("no path from {start:?} to {goal:?}")))
}

fn decimate(points: &[[f64; 2]], inflated: &[Rect]) -> Vec<[f64; 2]> {
    let mut out = vec![points[0]];
    let mut i = 0;
    while i + 1 < points.len() {
        let mut j = points.len() - 1;
        while j > i + 1 && !line_of_sight(points[i], points[j], inflated) {
            j -= 1;
        }
        out.push(points[j]);
        i = j;
    }
    out
}

pub fn path_length(points: &[[f64; 2]]) -> f64 {
    points.windows(2).map(|w| dist(w[0], w[1])).sum()
}

/// PD waypoint tracker for the point robot.
pub struct ExpertPolicy {
    pub config: ExpertConfig,
    waypoints: Vec<[f64; 2]>,
    next: usize,
}

impl ExpertPolicy {
    pub fn new(config: ExpertConfig, waypoints: Vec<[f64; 2]>) -> Self {
        ExpertPolicy {
            config,
            waypoints,
            next: 1,
        }
    }

    /// Noise-free action in `[-1, 1]^2`.
    pub fn act(&mut self, state: &WorldState, env: &EnvConfig) -> [f64; 2] {
        let last = self.waypoints.len() - 1;
        while self.next < last && dist(state.pos, self.waypoints[self.next]) < self.config.waypoint_tolerance {
            self.next += 1;
        }
        let target = self.waypoints[self.next.min(last)];
        let c = &self.config;
        let mut a = [0.0; 2];
        for k in 0..2 {
            let accel = c.kp * (target[k] - state.pos[k]) - c.kd * state.vel[k];
            a[k] = (accel * env.mass / env.force_scale).clamp(-1.0, 1.0);
        }
        a
    }
}

/// An expert rollout with the simulator states behind its frames.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub trajectory: Trajectory,
    pub states: Vec<WorldState>,
    pub success: bool,
}

/// Runs the noisy expert from `world` towards its goal until success or
/// `max_steps` actions.
pub fn rollout_expert<R: Rng + ?Sized>(world: &WorldState, env: &EnvConfig, expert: &ExpertConfig, rng: &mut R) -> Result<Rollout> {
    if world.kind != RobotKind::Point {
        return Err(Error::InvalidArgument("the expert drives the point robot only".into()));
    }
    let path = shortest_path(&world.obstacles, env, world.pos, world.goal, expert)?;
    let mut policy = ExpertPolicy::new(expert.clone(), path);
    let mut states = vec![world.clone()];
    let mut actions = Vec::new();
    let mut done = worlds::success(world, env);
    while !done && actions.len() < expert.max_steps {
        let s = states.last().expect("nonempty");
        let mut a = policy.act(s, env);
        for v in &mut a {
            let n = if expert.noise > 0.0 { rng.random_range(-expert.noise..expert.noise) } else { 0.0 };
            *v = (*v + n).clamp(-1.0, 1.0);
        }
        let next = worlds::step(s, a, env);
        done = worlds::success(&next, env);
        states.push(next);
        actions.push(a);
    }
    Ok(Rollout {
        trajectory: Trajectory::from_states(&states, actions, env, false),
        states,
        success: done,
    })
}

/// Moves the goal of a failed rollout to where the robot stopped and
/// re-renders every frame. Successful rollouts pass through unchanged;
/// `None` when the terminal position is not a legal goal.
pub fn hindsight_render(rollout: &Rollout, env: &EnvConfig) -> Option<Trajectory> {
    if rollout.success {
        return Some(rollout.trajectory.clone());
    }
    let last = rollout.states.last()?;
    if !last.is_free(last.pos, env) {
        return None;
    }
    let goal = last.pos;
    let states: Vec<WorldState> = rollout
        .states
        .iter()
        .map(|s| WorldState { goal, ..s.clone() })
        .collect();
    Some(Trajectory::from_states(&states, rollout.trajectory.actions.clone(), env, true))
}

/// Counters reported by [`build_dataset`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub attempts: usize,
    pub expert_successes: usize,
    pub hindsight: usize,
    pub discarded: usize,
}

impl DatasetStats {
    pub fn expert_success_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.expert_successes as f64 / self.attempts as f64
        }
    }
}

/// One task plus expert rollout, driven by its own rng stream.
fn attempt(env: &EnvConfig, expert: &ExpertConfig, seed: u64, index: u64) -> Result<Rollout> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let task = worlds::sample_task(env, RobotKind::Point, &mut rng)?;
    rollout_expert(&task.initial, env, expert, &mut rng)
}

/// Generates `n` point-robot demonstrations. Attempt `i` uses stream `i` of
/// a generator seeded with `seed`, so the output does not depend on thread
/// count.
pub fn build_dataset(env: &EnvConfig, expert: &ExpertConfig, n: usize, seed: u64) -> Result<DemoDataset> {
    let threads = std::thread::available_parallelism().map_or(1, |v| v.get());
    let mut trajectories = Vec::with_capacity(n);
    let mut stats = DatasetStats::default();
    let mut next = 0u64;
    while trajectories.len() < n {
        let want = n - trajectories.len();
        let block = (want + want / 8 + 1).min(threads * 16).max(1) as u64;
        let indices: Vec<u64> = (next..next + block).collect();
        next += block;
        let chunk = indices.len().div_ceil(threads);
        let results: Vec<Result<Rollout>> = std::thread::scope(|s| {
            let handles: Vec<_> = indices
                .chunks(chunk)
                .map(|c| s.spawn(move || c.iter().map(|&i| attempt(env, expert, seed, i)).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
        });
        for r in results {
            if trajectories.len() == n {
                break;
            }
            let r = r?;
            stats.attempts += 1;
            if r.success {
                stats.expert_successes += 1;
            }
            match hindsight_render(&r, env) {
                Some(t) => {
                    stats.hindsight += usize::from(t.hindsight);
                    trajectories.push(t);
                }
                None => stats.discarded += 1,
            }
        }
        if next > 100 * (n as u64 + 1) {
            return Err(Error::Infeasible("too many discarded demonstrations".into()));
        }
    }
    log::info!(
        "expert success {:.3}, hindsight {}/{}, discarded {}",
        stats.expert_success_rate(),
        stats.hindsight,
        n,
        stats.discarded
    );
    let header = DatasetHeader::new(env, expert, seed, stats);
    Ok(DemoDataset { header, trajectories })
}
