use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::check::check_gradients;
use crate::nets::{init_params, ModelKind};
use crate::worlds::{EnvConfig, RobotKind, WorldState};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

fn quad(n_p: usize) -> PlannerConfig {
    PlannerConfig {
        n_p,
        loss: InnerLoss::Quadratic,
        ..PlannerConfig::default()
    }
}

fn random_image(size: usize, r: &mut ChaCha8Rng) -> Image {
    Image {
        width: size,
        height: size,
        data: (0..size * size * 3).map(|_| r.random_range(0..=255u8)).collect(),
    }
}

#[test]
fn zero_iterations_return_init() {
    let mut g = Graph::new();
    let x0 = g.constant(t(&[1, 2], &[0.0, 0.0]));
    let xg = g.constant(t(&[1, 2], &[1.0, 1.0]));
    let init = vec![t(&[1, 2], &[0.3, -0.7]), t(&[1, 2], &[0.1, 0.2])];
    let out = optimize(&mut g, &AdditiveDynamics, &quad(0), x0, xg, init.clone(), None, PlanMode::Inference).unwrap();
    assert_eq!(out.values, init);
    assert!(out.trace.is_empty());
}

#[test]
fn single_step_quadratic() {
    for mode in [PlanMode::Inference, PlanMode::Train] {
        let mut g = Graph::new();
        let x0 = g.constant(t(&[1, 1], &[0.0]));
        let xg = g.constant(t(&[1, 1], &[1.0]));
        let out = optimize(&mut g, &AdditiveDynamics, &quad(1), x0, xg, vec![t(&[1, 1], &[0.0])], None, mode).unwrap();
        assert_eq!(out.values[0].data(), &[1.0]);
        assert_eq!(out.trace, vec![vec![1.0]]);
        let x = rollout(&mut g, &AdditiveDynamics, x0, &out.actions, &[]).unwrap();
        let (per, _) = plan_loss(&mut g, &quad(1), x, xg).unwrap();
        assert_eq!(g.value(per).data(), &[0.0]);
    }
}

#[test]
fn converges_to_min_norm_plan() {
    let (start, goal) = ([0.3, -0.2], [1.0, 0.4]);
    let mut g = Graph::new();
    let x0 = g.constant(t(&[1, 2], &start));
    let xg = g.constant(t(&[1, 2], &goal));
    let init = vec![t(&[1, 2], &[0.0, 0.0]); 3];
    let out = optimize(&mut g, &AdditiveDynamics, &quad(30), x0, xg, init, None, PlanMode::Inference).unwrap();
    for step in &out.values {
        for d in 0..2 {
            let want = (goal[d] - start[d]) / 3.0;
            assert!((step.data()[d] - want).abs() < 1e-6, "{} vs {want}", step.data()[d]);
        }
    }
    for w in out.trace.windows(2) {
        assert!(w[1][0] <= w[0][0]);
    }
}

#[test]
fn update_is_clipped() {
    let mut g = Graph::new();
    let x0 = g.constant(t(&[1, 1], &[0.0]));
    let xg = g.constant(t(&[1, 1], &[100.0]));
    let out = optimize(&mut g, &AdditiveDynamics, &quad(1), x0, xg, vec![t(&[1, 1], &[0.0])], None, PlanMode::Inference).unwrap();
    assert_eq!(out.values[0].data(), &[12.5]);
}

#[test]
fn huber_gradient_is_bounded() {
    let cfg = PlannerConfig {
        n_p: 1,
        ..PlannerConfig::default()
    };
    let mut g = Graph::new();
    let x0 = g.constant(t(&[1, 1], &[0.0]));
    let xg = g.constant(t(&[1, 1], &[10.0]));
    let out = optimize(&mut g, &AdditiveDynamics, &cfg, x0, xg, vec![t(&[1, 1], &[0.0])], None, PlanMode::Inference).unwrap();
    assert!((out.values[0].data()[0] - 0.5 * 0.85).abs() < 1e-12);
}

#[test]
fn masks_hold_finished_rows() {
    let mut g = Graph::<f64>::new();
    let x0 = g.constant(t(&[2, 1], &[0.0, 0.0]));
    let acts: Vec<Var> = (0..3).map(|_| g.constant(t(&[2, 1], &[1.0, 1.0]))).collect();
    let masks = horizon_masks(&mut g, &[1, 3], 3, 1);
    assert!(masks[0].is_none());
    assert!(masks[1].is_some() && masks[2].is_some());
    let x = rollout(&mut g, &AdditiveDynamics, x0, &acts, &masks).unwrap();
    assert_eq!(g.value(x).data(), &[1.0, 3.0]);
}

#[test]
fn bad_horizons_rejected() {
    let mut g = Graph::new();
    let x0 = g.constant(t(&[1, 1], &[0.0]));
    let xg = g.constant(t(&[1, 1], &[1.0]));
    let init = vec![t(&[1, 1], &[0.0]); 2];
    let r = optimize(&mut g, &AdditiveDynamics, &quad(1), x0, xg, init, Some(&[3]), PlanMode::Inference);
    assert!(matches!(r, Err(Error::InvalidArgument(_))));
}

#[test]
fn nan_goal_is_reported() {
    let mut g = Graph::new();
    let x0 = g.constant(t(&[1, 1], &[0.0]));
    let xg = g.constant(t(&[1, 1], &[f64::NAN]));
    let r = optimize(&mut g, &AdditiveDynamics, &quad(2), x0, xg, vec![t(&[1, 1], &[0.0])], None, PlanMode::Inference);
    assert!(matches!(r, Err(Error::NonFinite(_))));
}

#[test]
fn inference_graph_does_not_grow() {
    let mut g = Graph::new();
    let x0 = g.constant(t(&[1, 1], &[0.0]));
    let xg = g.constant(t(&[1, 1], &[1.0]));
    let before = g.len();
    optimize(&mut g, &AdditiveDynamics, &quad(20), x0, xg, vec![t(&[1, 1], &[0.0])], None, PlanMode::Inference).unwrap();
    assert_eq!(g.len(), before + 1);
}

fn tiny_setup(seed: u64) -> (NetConfig, ParameterSet<f64>, Vec<Tensor<f64>>) {
    let net = NetConfig::tiny();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let params = init_params(&net, ModelKind::Upn, &mut r).unwrap();
    let o = random_image(10, &mut r);
    let og = random_image(10, &mut r);
    let inputs = vec![
        nets::images_to_tensor(&[&o], net.encoder.pixel_scale).unwrap(),
        nets::images_to_tensor(&[&og], net.encoder.pixel_scale).unwrap(),
        t(&[1, 4], &[0.2, -0.4, 0.1, 0.3]),
    ];
    (net, params, inputs)
}

/// Scalar outer loss of the plan produced on the tiny network.
fn outer_loss(g: &mut Graph<f64>, p: &Bound, net: &NetConfig, cfg: &PlannerConfig, inputs: &[Tensor<f64>]) -> Result<Var> {
    let o = g.constant(inputs[0].clone());
    let og = g.constant(inputs[1].clone());
    let q = g.constant(inputs[2].clone());
    let (xt, xg) = encode_start_goal(g, p, net, o, q, og)?;
    let init = vec![t(&[1, 2], &[0.3, -0.1]), t(&[1, 2], &[-0.2, 0.4])];
    let out = optimize(g, &UpnDynamics { params: p, net }, cfg, xt, xg, init, None, PlanMode::Train)?;
    let target = [t(&[1, 2], &[0.5, 0.5]), t(&[1, 2], &[-0.5, 0.25])];
    let mut total = None;
    for (a, y) in out.actions.iter().zip(target) {
        let y = g.constant(y);
        let d = g.sub(*a, y)?;
        let s = g.square(d);
        let s = g.sum(s);
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    Ok(total.expect("two steps"))
}

#[test]
fn outer_gradient_through_planner() {
    let (net, params, inputs) = tiny_setup(11);
    let cfg = PlannerConfig {
        n_p: 2,
        horizon: 2,
        ..PlannerConfig::default()
    };
    let names: Vec<String> = params.names().map(String::from).collect();
    let tensors: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let report = check_gradients(
        |g, vars| {
            let p = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
            outer_loss(g, &p, &net, &cfg, &inputs)
        },
        &tensors,
        1e-5,
        1e-3,
    )
    .unwrap();
    for c in &report.inputs {
        assert!(c.max_rel_error < 1e-3, "{}: rel {:.3e}", names[c.input], c.max_rel_error);
    }
}

fn param_grads(stop: bool) -> Vec<f64> {
    let (net, params, inputs) = tiny_setup(5);
    let cfg = PlannerConfig {
        n_p: 3,
        horizon: 2,
        stop_inner_grad: stop,
        ..PlannerConfig::default()
    };
    let mut g = Graph::new();
    let p = params.bind(&mut g, true);
    let loss = outer_loss(&mut g, &p, &net, &cfg, &inputs).unwrap();
    let vars = p.vars();
    let grads = g.grad(loss, &vars, false).unwrap();
    grads.iter().flat_map(|v| g.value(*v).to_f64_vec()).collect()
}

#[test]
fn stop_inner_grad_changes_outer_gradient() {
    let full = param_grads(false);
    let first = param_grads(true);
    assert!(first.iter().all(|v| v.is_finite()));
    assert!(first.iter().any(|v| v.abs() > 0.0));
    let diff = full.iter().zip(&first).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff > 1e-8, "diff {diff}");
}

#[test]
fn stop_inner_grad_keeps_forward_values() {
    let mut values = Vec::new();
    for stop in [false, true] {
        let cfg = PlannerConfig {
            stop_inner_grad: stop,
            ..quad(4)
        };
        let mut g = Graph::new();
        let x0 = g.constant(t(&[1, 1], &[0.0]));
        let xg = g.constant(t(&[1, 1], &[1.0]));
        let init = vec![t(&[1, 1], &[0.0]); 2];
        values.push(optimize(&mut g, &AdditiveDynamics, &cfg, x0, xg, init, None, PlanMode::Train).unwrap().values);
    }
    assert_eq!(values[0], values[1]);
}

#[test]
fn plan_is_seed_deterministic() {
    let net = NetConfig::tiny();
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let params: ParameterSet<f64> = init_params(&net, ModelKind::Upn, &mut r).unwrap();
    let o = random_image(10, &mut r);
    let og = random_image(10, &mut r);
    let cfg = PlannerConfig {
        n_p: 5,
        horizon: 4,
        ..PlannerConfig::default()
    };
    let q = [0.5, 0.5, 0.0, 0.0];
    let run = |seed| plan(&params, &net, &cfg, &o, &q, &og, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let a = run(1);
    assert_eq!(a, run(1));
    assert_ne!(a.actions, run(2).actions);
    assert_eq!(a.actions.len(), 4);
    assert_eq!(a.loss_trace.len(), 5);
}

#[test]
fn batched_plan_matches_single() {
    let net = NetConfig::tiny();
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let params: ParameterSet<f64> = init_params(&net, ModelKind::Upn, &mut r).unwrap();
    let imgs: Vec<Image> = (0..4).map(|_| random_image(10, &mut r)).collect();
    let q = vec![vec![0.1, 0.2, 0.3, 0.4], vec![0.9, 0.8, 0.0, 0.1]];
    let cfg = PlannerConfig {
        n_p: 3,
        horizon: 3,
        ..PlannerConfig::default()
    };
    let init = random_plan::<f64, _>(&mut r, 3, 2, 2);
    let both = plan_batch(&params, &net, &cfg, &[&imgs[0], &imgs[1]], &q, &[&imgs[2], &imgs[3]], 3, Some(init.clone()), &mut r).unwrap();
    let second: Vec<Tensor<f64>> = init.iter().map(|s| t(&[1, 2], s.row(1))).collect();
    let one = plan_batch(&params, &net, &cfg, &[&imgs[1]], &q[1..], &[&imgs[3]], 3, Some(second), &mut r).unwrap();
    for (x, y) in both[1].actions.iter().flatten().zip(one[0].actions.iter().flatten()) {
        assert!((x - y).abs() < 1e-9);
    }
}

struct Panics;

impl Controller for Panics {
    fn act(&mut self, _: &[usize], _: &[&Image], _: &[Vec<f64>], _: &[&Image]) -> Result<Vec<[f64; 2]>> {
        panic!("controller called on a solved episode");
    }
}

fn small_env() -> EnvConfig {
    EnvConfig {
        image_size: 10,
        ..EnvConfig::default()
    }
}

#[test]
fn episode_at_goal_takes_no_action() {
    let env = small_env();
    let s = WorldState::new(RobotKind::Point, [0.2, 0.2], [0.2, 0.2], vec![]);
    let goal = crate::worlds::render(&s.at_goal(), &env);
    let eps = run_episodes(&[s], &[goal], &env, 10, &mut Panics).unwrap();
    assert!(eps[0].success);
    assert!(eps[0].actions.is_empty());
}

/// Pushes straight at the goal and brakes near it.
struct Greedy {
    targets: Vec<[f64; 2]>,
}

impl Controller for Greedy {
    fn act(&mut self, ids: &[usize], _: &[&Image], q: &[Vec<f64>], _: &[&Image]) -> Result<Vec<[f64; 2]>> {
        Ok(ids
            .iter()
            .zip(q)
            .map(|(&i, q)| {
                let g = self.targets[i];
                // Overshooting commands exercise clamping.
                [10.0 * (g[0] - q[0]) - 2.0 * q[2], 10.0 * (g[1] - q[1]) - 2.0 * q[3]]
            })
            .collect())
    }
}

#[test]
fn lockstep_episodes_finish_independently() {
    let env = small_env();
    let near = WorldState::new(RobotKind::Point, [0.2, 0.2], [0.25, 0.2], vec![]);
    let far = WorldState::new(RobotKind::Point, [0.1, 0.9], [0.9, 0.1], vec![]);
    let goals = vec![crate::worlds::render(&near.at_goal(), &env), crate::worlds::render(&far.at_goal(), &env)];
    let mut ctrl = Greedy {
        targets: vec![near.goal, far.goal],
    };
    let eps = run_episodes(&[near, far], &goals, &env, 200, &mut ctrl).unwrap();
    assert!(eps.iter().all(|e| e.success));
    assert!(eps[0].actions.len() < eps[1].actions.len());
    for e in &eps {
        assert_eq!(e.states.len(), e.actions.len() + 1);
        assert!(e.actions.iter().flatten().all(|a| a.abs() <= 1.0));
    }
}

#[test]
fn mpc_runs_and_is_reproducible() {
    let env = small_env();
    let net = NetConfig::tiny();
    let params: ParameterSet<f64> = init_params(&net, ModelKind::Upn, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let s = WorldState::new(RobotKind::Point, [0.2, 0.2], [0.8, 0.8], vec![]);
    let goal = crate::worlds::render(&s.at_goal(), &env);
    for warm_start in [false, true] {
        let cfg = PlannerConfig {
            n_p: 2,
            horizon: 3,
            warm_start,
            ..PlannerConfig::default()
        };
        let a = mpc_act(&s, &goal, &params, &net, &cfg, &env, 4, 9).unwrap();
        let b = mpc_act(&s, &goal, &params, &net, &cfg, &env, 4, 9).unwrap();
        assert_eq!(a.actions, b.actions);
        assert_eq!(a.actions.len(), 4);
    }
}

#[test]
fn eval_csv_columns() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("eval.csv");
    let rows = vec![EvalRow {
        model: "upn".into(),
        n_p: 40,
        seed: 0,
        successes: 3,
        trials: 4,
        rate: 0.75,
    }];
    write_eval_csv(&path, &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text, "model,n_p,seed,successes,trials,rate\nupn,40,0,3,4,0.75\n");
}

#[test]
fn config_roundtrips_through_toml() {
    let cfg = PlannerConfig {
        loss: InnerLoss::Quadratic,
        warm_start: true,
        ..PlannerConfig::default()
    };
    let text = toml::to_string(&cfg).unwrap();
    assert!(text.contains("loss = \"quadratic\""));
    assert_eq!(toml::from_str::<PlannerConfig>(&text).unwrap(), cfg);
    let partial: PlannerConfig = toml::from_str("n_p = 5").unwrap();
    assert_eq!(partial.n_p, 5);
    assert_eq!(partial.step_first, 0.5);
}
