use super::{EnvConfig, Rect, RobotKind, WorldState};

fn clamp_action(a: [f64; 2]) -> [f64; 2] {
    [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)]
}

/// Advances whichever robot `state` holds.
pub fn step(state: &WorldState, action: [f64; 2], cfg: &EnvConfig) -> WorldState {
    match state.kind {
        RobotKind::Point => step_point(state, action, cfg),
        RobotKind::Car => step_car(state, action, cfg),
    }
}

/// One semi-implicit Euler step of the damped point mass:
/// `v' = v + (a F / m - c v) dt`, `p' = p + v' dt`, then clip-and-slide.
pub fn step_point(state: &WorldState, action: [f64; 2], cfg: &EnvConfig) -> WorldState {
    let a = clamp_action(action);
    let mut vel = [0.0; 2];
    for k in 0..2 {
        let accel = a[k] * cfg.force_scale / cfg.mass - cfg.damping * state.vel[k];
        vel[k] = state.vel[k] + accel * cfg.dt;
    }
    let mut next = state.clone();
    let (pos, vel) = resolve_motion(state.pos, vel, cfg.dt, &state.obstacles, cfg);
    next.pos = pos;
    next.vel = vel;
    next
}

/// Unicycle: steering turns the heading, thrust accelerates along it.
pub fn step_car(state: &WorldState, action: [f64; 2], cfg: &EnvConfig) -> WorldState {
    let [thrust, turn] = clamp_action(action);
    let heading = wrap_angle(state.heading + turn * cfg.max_turn_rate * cfg.dt);
    let speed = state.speed();
    let speed = speed + (thrust * cfg.force_scale / cfg.mass - cfg.damping * speed) * cfg.dt;
    let vel = [speed * heading.cos(), speed * heading.sin()];
    let mut next = state.clone();
    let (pos, vel) = resolve_motion(state.pos, vel, cfg.dt, &state.obstacles, cfg);
    next.pos = pos;
    next.vel = vel;
    next.heading = heading;
    next
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a % two_pi;
    if r > std::f64::consts::PI {
        r -= two_pi;
    } else if r <= -std::f64::consts::PI {
        r += two_pi;
    }
    r
}

/// Moves `pos` by `vel * dt`, one axis at a time. Motion stops at the first
/// inflated obstacle face or arena wall crossed, and the velocity component
/// normal to that face is zeroed.
fn resolve_motion(
    pos: [f64; 2],
    mut vel: [f64; 2],
    dt: f64,
    obstacles: &[Rect],
    cfg: &EnvConfig,
) -> ([f64; 2], [f64; 2]) {
    let bounds = cfg.free_bounds();
    let inflated: Vec<Rect> = obstacles.iter().map(|r| r.inflate(cfg.robot_radius)).collect();
    let mut p = pos;
    for axis in 0..2 {
        let other = 1 - axis;
        let d = vel[axis] * dt;
        let start = p[axis];
        let mut target = start + d;
        let mut blocked = false;
        for r in &inflated {
            if !(p[other] > r.min[other] && p[other] < r.max[other]) {
                continue;
            }
            if d > 0.0 && start <= r.min[axis] && target > r.min[axis] {
                target = r.min[axis];
                blocked = true;
            } else if d < 0.0 && start >= r.max[axis] && target < r.max[axis] {
                target = r.max[axis];
                blocked = true;
            }
        }
        if target < bounds.min[axis] {
            target = bounds.min[axis];
            blocked = true;
        } else if target > bounds.max[axis] {
            target = bounds.max[axis];
            blocked = true;
        }
        p[axis] = target;
        if blocked {
            vel[axis] = 0.0;
        }
    }
    (p, vel)
}
