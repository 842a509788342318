use std::collections::VecDeque;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::grid::OccupancyGrid;
use super::*;

fn free_cfg() -> EnvConfig {
    EnvConfig {
        mass: 1.0,
        damping: 0.0,
        force_scale: 1.0,
        dt: 0.1,
        ..EnvConfig::default()
    }
}

fn point_at(p: [f64; 2]) -> WorldState {
    WorldState::new(RobotKind::Point, p, [0.9, 0.9], fixed_layout().obstacles)
}

#[test]
fn zero_action_at_rest_stays_put() {
    let cfg = EnvConfig::default();
    let s = point_at([0.3, 0.2]);
    let n = step_point(&s, [0.0, 0.0], &cfg);
    assert_eq!(n.pos, s.pos);
    assert_eq!(n.vel, [0.0, 0.0]);
}

#[test]
fn one_euler_step_in_free_space() {
    let cfg = free_cfg();
    let s = WorldState::new(RobotKind::Point, [0.5, 0.5], [0.9, 0.9], vec![]);
    let n = step_point(&s, [1.0, 0.0], &cfg);
    assert!((n.vel[0] - 0.1).abs() < 1e-15);
    assert_eq!(n.vel[1], 0.0);
    assert!((n.pos[0] - 0.51).abs() < 1e-15);
    assert_eq!(n.pos[1], 0.5);
}

#[test]
fn actions_are_clamped() {
    let cfg = free_cfg();
    let s = WorldState::new(RobotKind::Point, [0.5, 0.5], [0.9, 0.9], vec![]);
    assert_eq!(step_point(&s, [7.0, -3.0], &cfg), step_point(&s, [1.0, -1.0], &cfg));
}

#[test]
fn head_on_contact_stops_on_the_face() {
    // v' = 4 + (0 - 2*4) * 0.05 = 3.6, so y would reach 0.48; the wall's
    // lower face inflated by the 0.04 robot radius sits at 0.41.
    let cfg = EnvConfig::default();
    let mut s = point_at([0.5, 0.3]);
    s.vel = [0.0, 4.0];
    let n = step_point(&s, [0.0, 0.0], &cfg);
    assert_eq!(n.pos[0], 0.5);
    assert!((n.pos[1] - 0.41).abs() < 1e-12);
    assert_eq!(n.vel, [0.0, 0.0]);
}

#[test]
fn sliding_keeps_tangential_velocity() {
    let cfg = EnvConfig::default();
    let mut s = point_at([0.5, 0.3]);
    s.vel = [1.0, 4.0];
    let n = step_point(&s, [0.0, 0.0], &cfg);
    assert!((n.pos[1] - 0.41).abs() < 1e-12);
    assert_eq!(n.vel[1], 0.0);
    assert!((n.vel[0] - 0.9).abs() < 1e-12);
    assert!((n.pos[0] - (0.5 + 0.9 * 0.05)).abs() < 1e-12);
}

#[test]
fn arena_walls_clip() {
    let cfg = EnvConfig::default();
    let mut s = point_at([0.05, 0.2]);
    s.vel = [-3.0, 0.0];
    let n = step_point(&s, [-1.0, 0.0], &cfg);
    assert_eq!(n.pos[0], cfg.robot_radius);
    assert_eq!(n.vel[0], 0.0);
}

#[test]
fn car_coasts_with_damping_only() {
    let cfg = EnvConfig::default();
    let mut s = WorldState::new(RobotKind::Car, [0.5, 0.2], [0.9, 0.9], vec![]);
    s.heading = 0.3;
    s.vel = [0.5 * 0.3f64.cos(), 0.5 * 0.3f64.sin()];
    let n = step_car(&s, [0.0, 0.0], &cfg);
    assert_eq!(n.heading, 0.3);
    let expect = 0.5 * (1.0 - cfg.damping * cfg.dt);
    assert!((n.speed() - expect).abs() < 1e-12);
}

#[test]
fn car_pure_turn_rotates_in_place() {
    let cfg = EnvConfig {
        max_turn_rate: std::f64::consts::FRAC_PI_2 / 0.05,
        ..EnvConfig::default()
    };
    let s = WorldState::new(RobotKind::Car, [0.5, 0.2], [0.9, 0.9], vec![]);
    let n = step_car(&s, [0.0, 1.0], &cfg);
    assert!((n.heading - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    assert_eq!(n.pos, s.pos);
}

#[test]
fn car_thrust_along_x() {
    let cfg = EnvConfig::default();
    let s = WorldState::new(RobotKind::Car, [0.5, 0.2], [0.9, 0.9], vec![]);
    let n = step_car(&s, [1.0, 0.0], &cfg);
    assert!(n.pos[0] > 0.5);
    assert_eq!(n.pos[1], 0.2);
    assert_eq!(n.vel[1], 0.0);
}

#[test]
fn embodiment_widths() {
    let s = point_at([0.3, 0.2]);
    assert_eq!(s.embodiment().len(), RobotKind::Point.embodiment_dim());
    let mut c = s.clone();
    c.kind = RobotKind::Car;
    assert_eq!(c.embodiment().len(), RobotKind::Car.embodiment_dim());
    assert_eq!(c.embodiment()[3], 1.0);
}

#[test]
fn success_threshold_is_closed() {
    let cfg = EnvConfig::default();
    let at = |d: f64| WorldState::new(RobotKind::Point, [0.5 + d, 0.2], [0.5, 0.2], vec![]);
    assert!(success(&at(0.049), &cfg));
    assert!(!success(&at(0.051), &cfg));
    let mut s = at(0.0);
    s.pos = [0.5, 0.2];
    s.goal = [0.5, 0.25];
    s.pos[1] = s.goal[1] - cfg.success_radius;
    assert!(s.goal_distance() <= 0.05);
    assert!(success(&s, &cfg));
}

#[test]
fn render_is_deterministic() {
    let cfg = EnvConfig::desk();
    let mut s = point_at([0.3, 0.2]);
    s.distractors.push(Distractor {
        center: [0.8, 0.2],
        half_size: 0.03,
        color: 2,
    });
    let a = render(&s, &cfg);
    let b = render(&s, &cfg);
    assert_eq!(a, b);
    assert_eq!(a.data.len(), 42 * 42 * 3);
    let mut moved = s.clone();
    moved.pos = [0.6, 0.2];
    assert_ne!(render(&moved, &cfg), a);
}

#[test]
fn goal_color_changes_only_goal_pixels() {
    let cfg = EnvConfig::default();
    let mut s = point_at([0.3, 0.2]);
    s.goal = [0.613, 0.777];
    let a = render(&s, &cfg);
    s.goal_color = 3;
    let b = render(&s, &cfg);
    let n = cfg.image_size as f64;
    let r = cfg.goal_radius;
    let c0 = ((s.goal[0] - r) * n).floor() as usize;
    let c1 = ((s.goal[0] + r) * n).ceil() as usize;
    let r0 = ((1.0 - s.goal[1] - r) * n).floor() as usize;
    let r1 = ((1.0 - s.goal[1] + r) * n).ceil() as usize;
    let mut changed = 0;
    for row in 0..cfg.image_size {
        for col in 0..cfg.image_size {
            if a.pixel(row, col) != b.pixel(row, col) {
                changed += 1;
                assert!((r0..r1).contains(&row) && (c0..c1).contains(&col), "pixel ({row},{col}) changed");
            }
        }
    }
    assert!(changed > 0);
}

#[test]
fn image_orientation_puts_high_y_at_top() {
    let cfg = EnvConfig::desk();
    let s = WorldState::new(RobotKind::Point, [0.5, 0.9], [0.5, 0.1], vec![]);
    let img = render(&s, &cfg);
    let top = img.pixel((0.1 * 42.0) as usize, 21);
    assert_eq!(top, [70, 140, 255]);
}

#[test]
fn ppm_header() {
    let img = render(&point_at([0.3, 0.2]), &EnvConfig::desk());
    let ppm = img.to_ppm();
    assert!(ppm.starts_with(b"P6\n42 42\n255\n"));
    assert_eq!(ppm.len(), 13 + 42 * 42 * 3);
}

#[test]
fn layout_file_round_trip() {
    let l = fixed_layout();
    assert_eq!(Layout::from_toml(&l.to_toml()).unwrap(), l);
    assert!(Layout::from_toml("obstacles = 3").is_err());
}

#[test]
fn layout_mode_parses() {
    assert_eq!("VOVG".parse::<LayoutMode>().unwrap(), LayoutMode::Vovg);
    assert!("x".parse::<LayoutMode>().is_err());
}

#[test]
fn fovg_shares_obstacles() {
    let cfg = EnvConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let first = sample_task(&cfg, RobotKind::Point, &mut rng).unwrap();
    for _ in 0..99 {
        let t = sample_task(&cfg, RobotKind::Point, &mut rng).unwrap();
        assert_eq!(t.initial.obstacles, first.initial.obstacles);
        assert!(t.initial.is_free(t.initial.goal, &cfg));
        assert!(t.initial.is_free(t.initial.pos, &cfg));
    }
}

/// 4-connected flood fill over a fine grid of legal robot centers.
fn reachable(state: &WorldState, cfg: &EnvConfig, from: [f64; 2], to: [f64; 2]) -> bool {
    let n = 100usize;
    let h = 1.0 / n as f64;
    let free = |r: usize, c: usize| state.is_free([(c as f64 + 0.5) * h, (r as f64 + 0.5) * h], cfg);
    let cell = |p: [f64; 2]| ((p[1] / h) as usize, (p[0] / h) as usize);
    let nearest = |p: [f64; 2]| {
        let mut best = (f64::INFINITY, (0, 0));
        for r in 0..n {
            for c in 0..n {
                let d = dist(p, [(c as f64 + 0.5) * h, (r as f64 + 0.5) * h]);
                if free(r, c) && d < best.0 {
                    best = (d, (r, c));
                }
            }
        }
        best.1
    };
    let (s, g) = {
        let (s, g) = (cell(from), cell(to));
        (if free(s.0, s.1) { s } else { nearest(from) }, if free(g.0, g.1) { g } else { nearest(to) })
    };
    let mut seen = vec![false; n * n];
    let mut q = VecDeque::from([s]);
    seen[s.0 * n + s.1] = true;
    while let Some((r, c)) = q.pop_front() {
        if (r, c) == g {
            return true;
        }
        let mut push = |r: usize, c: usize| {
            if free(r, c) && !seen[r * n + c] {
                seen[r * n + c] = true;
                q.push_back((r, c));
            }
        };
        if r > 0 {
            push(r - 1, c);
        }
        if c > 0 {
            push(r, c - 1);
        }
        if r + 1 < n {
            push(r + 1, c);
        }
        if c + 1 < n {
            push(r, c + 1);
        }
    }
    false
}

#[test]
fn vovg_layouts_are_feasible() {
    let cfg = EnvConfig {
        layout_mode: LayoutMode::Vovg,
        ..EnvConfig::desk()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut distinct = std::collections::HashSet::new();
    for _ in 0..30 {
        let t = sample_task(&cfg, RobotKind::Point, &mut rng).unwrap();
        let s = &t.initial;
        assert!(s.is_free(s.goal, &cfg));
        assert!(reachable(s, &cfg, s.pos, s.goal));
        distinct.insert(format!("{:?}", s.obstacles));
    }
    assert!(distinct.len() > 20);
}

#[test]
fn goal_image_shows_robot_on_goal() {
    let cfg = EnvConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = sample_task(&cfg, RobotKind::Point, &mut rng).unwrap();
    assert_eq!(t.goal_image, render(&t.initial.at_goal(), &cfg));
    for d in &t.initial.distractors {
        assert_ne!(d.color, t.initial.goal_color);
    }
}

#[test]
fn grid_blocks_inflated_obstacles() {
    let cfg = EnvConfig::default();
    let g = OccupancyGrid::from_obstacles(&fixed_layout().obstacles, &cfg, 0.02, 0.0);
    assert_eq!((g.rows, g.cols), (50, 50));
    assert!(g.is_blocked(g.cell_of([0.5, 0.5])));
    assert!(g.is_blocked(g.cell_of([0.5, 0.42])));
    assert!(!g.is_blocked(g.cell_of([0.5, 0.35])));
    assert!(g.is_blocked((0, 0)));
    assert!(g.connected([0.5, 0.2], [0.5, 0.8]));
}

#[test]
fn point_robot_never_penetrates_under_long_fuzz() {
    let cfg = EnvConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut s = point_at([0.5, 0.2]);
    let mut c = WorldState { kind: RobotKind::Car, ..point_at([0.2, 0.2]) };
    for _ in 0..100_000 {
        let a = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
        s = step(&s, a, &cfg);
        c = step(&c, [a[1], a[0]], &cfg);
        assert!(s.is_free(s.pos, &cfg), "point at {:?}", s.pos);
        assert!(c.is_free(c.pos, &cfg), "car at {:?}", c.pos);
    }
}

proptest! {
    #[test]
    fn short_random_sequences_stay_free(
        x in 0.05f64..0.95, y in 0.05f64..0.4,
        actions in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..200),
    ) {
        let cfg = EnvConfig::default();
        let mut s = point_at([x, y]);
        for (ax, ay) in actions {
            s = step_point(&s, [ax, ay], &cfg);
            prop_assert!(s.is_free(s.pos, &cfg));
        }
    }

    #[test]
    fn unforced_speed_never_increases(
        vx in -3.0f64..3.0, vy in -3.0f64..3.0, x in 0.05f64..0.95, y in 0.05f64..0.4,
    ) {
        let cfg = EnvConfig::default();
        let mut s = point_at([x, y]);
        s.vel = [vx, vy];
        for _ in 0..50 {
            let n = step_point(&s, [0.0, 0.0], &cfg);
            prop_assert!(n.vel[0].hypot(n.vel[1]) <= s.vel[0].hypot(s.vel[1]));
            s = n;
        }
    }

    #[test]
    fn physics_is_deterministic(ax in -1.0f64..1.0, ay in -1.0f64..1.0) {
        let cfg = EnvConfig::default();
        let s = point_at([0.3, 0.2]);
        prop_assert_eq!(step(&s, [ax, ay], &cfg), step(&s, [ax, ay], &cfg));
    }
}
