use rand::Rng;

use super::grid::OccupancyGrid;
use super::render::{render, Image, PALETTE};
use super::{dist, Distractor, EnvConfig, Layout, LayoutMode, Rect, RobotKind, WorldState};
use crate::error::{Error, Result};

/// Layout attempts before `sample_task` gives up.
pub const MAX_ATTEMPTS: usize = 200;

/// Grid resolution for feasibility checks, meters.
pub const FEASIBILITY_RESOLUTION: f64 = 0.02;

const DISTRACTOR_HALF_SIZE: f64 = 0.03;

/// An initial state plus the image of that scene with the robot on the goal.
#[derive(Clone, Debug)]
pub struct Task {
    pub initial: WorldState,
    pub goal_image: Image,
}

/// The FOVG obstacle set: a horizontal wall across the middle and a small
/// block in the upper left.
pub fn fixed_layout() -> Layout {
    Layout {
        obstacles: vec![Rect::new(0.25, 0.45, 0.75, 0.55), Rect::new(0.12, 0.75, 0.22, 0.85)],
    }
}

fn random_obstacles<R: Rng + ?Sized>(rng: &mut R, cfg: &EnvConfig) -> Vec<Rect> {
    let a = cfg.arena;
    let count = rng.random_range(1..=3);
    (0..count)
        .map(|_| {
            let long = rng.random_range(0.15..0.45);
            let short = rng.random_range(0.05..0.12);
            let (w, h) = if rng.random_bool(0.5) { (long, short) } else { (short, long) };
            let x0 = rng.random_range(a.min[0] + 0.1..a.max[0] - 0.1 - w);
            let y0 = rng.random_range(a.min[1] + 0.1..a.max[1] - 0.1 - h);
            Rect::new(x0, y0, x0 + w, y0 + h)
        })
        .collect()
}

fn free_point<R: Rng + ?Sized>(rng: &mut R, obstacles: &[Rect], cfg: &EnvConfig) -> Option<[f64; 2]> {
    let b = cfg.free_bounds();
    let probe = WorldState::new(RobotKind::Point, [0.0; 2], [0.0; 2], obstacles.to_vec());
    (0..1000)
        .map(|_| [rng.random_range(b.min[0]..=b.max[0]), rng.random_range(b.min[1]..=b.max[1])])
        .find(|&p| probe.is_free(p, cfg))
}

fn place_distractors<R: Rng + ?Sized>(rng: &mut R, state: &WorldState, cfg: &EnvConfig) -> Vec<Distractor> {
    let count = rng.random_range(0..=cfg.max_distractors);
    let h = DISTRACTOR_HALF_SIZE;
    let mut out = Vec::with_capacity(count);
    let mut tries = 0;
    while out.len() < count && tries < 1000 {
        tries += 1;
        let c = [
            rng.random_range(cfg.arena.min[0] + h..cfg.arena.max[0] - h),
            rng.random_range(cfg.arena.min[1] + h..cfg.arena.max[1] - h),
        ];
        let square = Rect::new(c[0] - h, c[1] - h, c[0] + h, c[1] + h);
        let clear_of_goal = dist(c, state.goal) > h * std::f64::consts::SQRT_2 + cfg.goal_radius + 0.01;
        let clear_of_robot = dist(c, state.pos) > h * std::f64::consts::SQRT_2 + cfg.robot_radius + 0.01;
        let clear_of_walls = state.obstacles.iter().all(|o| !overlaps(o, &square));
        if clear_of_goal && clear_of_robot && clear_of_walls {
            let shift = rng.random_range(1..PALETTE.len());
            out.push(Distractor {
                center: c,
                half_size: h,
                color: (state.goal_color + shift) % PALETTE.len(),
            });
        }
    }
    out
}

fn overlaps(a: &Rect, b: &Rect) -> bool {
    a.min[0] < b.max[0] && b.min[0] < a.max[0] && a.min[1] < b.max[1] && b.min[1] < a.max[1]
}

/// Samples a start, goal, goal color and distractors. FOVG keeps the
/// configured obstacle set; VOVG also samples obstacles. Every returned task
/// has a grid path from start to goal.
pub fn sample_task<R: Rng + ?Sized>(cfg: &EnvConfig, kind: RobotKind, rng: &mut R) -> Result<Task> {
    for _ in 0..MAX_ATTEMPTS {
        let obstacles = match cfg.layout_mode {
            LayoutMode::Fovg => cfg.fixed_obstacles(),
            LayoutMode::Vovg => random_obstacles(rng, cfg),
        };
        let (Some(start), Some(goal)) = (free_point(rng, &obstacles, cfg), free_point(rng, &obstacles, cfg)) else {
            continue;
        };
        if dist(start, goal) < cfg.min_goal_distance {
            continue;
        }
        let grid = OccupancyGrid::from_obstacles(&obstacles, cfg, FEASIBILITY_RESOLUTION, 0.0);
        let (Some(s), Some(g)) = (grid.nearest_free(start), grid.nearest_free(goal)) else {
            continue;
        };
        if grid.shortest_path(s, g).is_none() {
            continue;
        }
        let mut initial = WorldState::new(kind, start, goal, obstacles);
        initial.goal_color = rng.random_range(0..PALETTE.len());
        if kind == RobotKind::Car {
            initial.heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        }
        initial.distractors = place_distractors(rng, &initial, cfg);
        let goal_image = render(&initial.at_goal(), cfg);
        return Ok(Task { initial, goal_image });
    }
    Err(Error::Infeasible(format!("no feasible task after {MAX_ATTEMPTS} attempts")))
}
