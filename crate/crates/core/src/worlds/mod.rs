//! Deterministic 2-D navigation worlds with top-down RGB rendering.
//!
//! Two robots share the arena: a force-controlled point mass (the training
//! domain) and a unicycle "car" with thrust and turn-rate actions (the
//! transfer domain). Both render as the same disk.

pub mod grid;
mod physics;
mod render;
mod tasks;

use serde::{Deserialize, Serialize};

pub use physics::{step, step_car, step_point};
pub use render::{render, Image, PALETTE};
pub use tasks::{fixed_layout, sample_task, Task};

/// Axis-aligned rectangle `[min, max]` in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Rect {
            min: [x0, y0],
            max: [x1, y1],
        }
    }

    /// Strict interior test; points on the boundary are outside.
    pub fn contains_open(&self, p: [f64; 2]) -> bool {
        p[0] > self.min[0] && p[0] < self.max[0] && p[1] > self.min[1] && p[1] < self.max[1]
    }

    pub fn contains_closed(&self, p: [f64; 2]) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }

    pub fn inflate(&self, r: f64) -> Rect {
        Rect::new(self.min[0] - r, self.min[1] - r, self.max[0] + r, self.max[1] + r)
    }

    pub fn width(&self) -> f64 {
        self.max[0] - self.min[0]
    }

    pub fn height(&self) -> f64 {
        self.max[1] - self.min[1]
    }
}

/// Obstacle arrangement; serialized as the layout description file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub obstacles: Vec<Rect>,
}

impl Layout {
    pub fn from_toml(text: &str) -> crate::Result<Self> {
        toml::from_str(text).map_err(|e| crate::Error::Config(format!("layout: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("layout serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RobotKind {
    Point,
    Car,
}

impl RobotKind {
    /// Width of the embodiment vector `q_t`.
    pub fn embodiment_dim(self) -> usize {
        match self {
            RobotKind::Point => 4,
            RobotKind::Car => 5,
        }
    }

    pub fn action_dim(self) -> usize {
        2
    }
}

/// Obstacle regime: fixed obstacles with varying goals, or both varying.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayoutMode {
    Fovg,
    Vovg,
}

impl std::str::FromStr for LayoutMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fovg" => Ok(LayoutMode::Fovg),
            "vovg" => Ok(LayoutMode::Vovg),
            other => Err(crate::Error::Config(format!("unknown layout mode {other:?}"))),
        }
    }
}

/// A colored square that only affects pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distractor {
    pub center: [f64; 2],
    pub half_size: f64,
    pub color: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub dt: f64,
    pub mass: f64,
    pub damping: f64,
    pub force_scale: f64,
    /// Car turn rate at full steering input, rad/s.
    pub max_turn_rate: f64,
    pub max_episode_steps: usize,
    pub success_radius: f64,
    pub robot_radius: f64,
    pub goal_radius: f64,
    pub image_size: usize,
    /// Samples per pixel side when rasterizing.
    pub supersample: usize,
    pub layout_mode: LayoutMode,
    pub arena: Rect,
    /// Distractor count is drawn uniformly from `0..=max_distractors`.
    pub max_distractors: usize,
    /// Minimum start-to-goal distance for sampled tasks.
    pub min_goal_distance: f64,
    /// Obstacles used in FOVG mode; the built-in layout when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<Layout>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            dt: 0.05,
            mass: 1.0,
            damping: 2.0,
            force_scale: 3.0,
            max_turn_rate: 4.0,
            max_episode_steps: 100,
            success_radius: 0.05,
            robot_radius: 0.04,
            goal_radius: 0.04,
            image_size: 84,
            supersample: 4,
            layout_mode: LayoutMode::Fovg,
            arena: Rect::new(0.0, 0.0, 1.0, 1.0),
            max_distractors: 3,
            min_goal_distance: 0.15,
            layout: None,
        }
    }
}

impl EnvConfig {
    /// Reduced 42x42 preset used for desk-scale runs.
    pub fn desk() -> Self {
        EnvConfig {
            image_size: 42,
            ..Self::default()
        }
    }

    /// Arena shrunk by the robot radius: the set of legal robot centers.
    pub fn fixed_obstacles(&self) -> Vec<Rect> {
        match &self.layout {
            Some(l) => l.obstacles.clone(),
            None => fixed_layout().obstacles,
        }
    }

    pub fn free_bounds(&self) -> Rect {
        self.arena.inflate(-self.robot_radius)
    }
}

/// Full simulator state. Velocity is stored as a vector for both robots; the
/// car keeps it aligned with its heading except after a collision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub kind: RobotKind,
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub heading: f64,
    pub obstacles: Vec<Rect>,
    pub goal: [f64; 2],
    pub goal_color: usize,
    pub distractors: Vec<Distractor>,
}

impl WorldState {
    pub fn new(kind: RobotKind, pos: [f64; 2], goal: [f64; 2], obstacles: Vec<Rect>) -> Self {
        WorldState {
            kind,
            pos,
            vel: [0.0; 2],
            heading: 0.0,
            obstacles,
            goal,
            goal_color: 0,
            distractors: Vec::new(),
        }
    }

    /// Signed speed along the heading (car).
    pub fn speed(&self) -> f64 {
        self.vel[0] * self.heading.cos() + self.vel[1] * self.heading.sin()
    }

    /// Proprioceptive vector: `(p, v)` for the point robot,
    /// `(p, speed, cos psi, sin psi)` for the car.
    pub fn embodiment(&self) -> Vec<f64> {
        match self.kind {
            RobotKind::Point => vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1]],
            RobotKind::Car => vec![
                self.pos[0],
                self.pos[1],
                self.speed(),
                self.heading.cos(),
                self.heading.sin(),
            ],
        }
    }

    pub fn goal_distance(&self) -> f64 {
        dist(self.pos, self.goal)
    }

    /// The same scene with the robot resting on the goal.
    pub fn at_goal(&self) -> WorldState {
        WorldState {
            pos: self.goal,
            vel: [0.0; 2],
            ..self.clone()
        }
    }

    /// Whether `p` is a legal robot center (inside the arena, outside every
    /// inflated obstacle interior).
    pub fn is_free(&self, p: [f64; 2], cfg: &EnvConfig) -> bool {
        cfg.free_bounds().contains_closed(p)
            && !self
                .obstacles
                .iter()
                .any(|r| r.inflate(cfg.robot_radius).contains_open(p))
    }
}

/// True iff the robot is within the success radius of the goal (closed).
pub fn success(state: &WorldState, cfg: &EnvConfig) -> bool {
    state.goal_distance() <= cfg.success_radius
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[cfg(test)]
mod tests;
