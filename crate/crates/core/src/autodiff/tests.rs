use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::check::check_gradients;
use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = numel(shape);
    t(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
}

/// Random values bounded away from zero, for log/sqrt/recip/div.
fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = numel(shape);
    t(shape, &(0..n).map(|_| rng.random_range(0.5..2.0)).collect::<Vec<_>>())
}

/// Reduces an arbitrary-shape output to a scalar with fixed random weights so
/// every output element contributes a distinct coefficient.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(g.shape(y), &mut rng);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

const H: f64 = 1e-5;

fn assert_first_order<F>(name: &str, inputs: &[Tensor<f64>], f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let report = check_gradients(|g, v| {
        let y = f(g, v)?;
        weighted_sum(g, y, 99)
    }, inputs, H, 1e-4)
    .unwrap();
    assert!(report.passed(), "{name}: {:?}", report.inputs);
}

/// Differentiates `sum(w * grad(L, inputs))` and checks it against finite
/// differences of the first gradient.
fn assert_second_order<F>(name: &str, inputs: &[Tensor<f64>], f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let report = check_gradients(|g, v| {
        let y = f(g, v)?;
        let loss = weighted_sum(g, y, 7)?;
        let grads = g.grad(loss, v, true)?;
        let mut terms = Vec::new();
        for (k, gr) in grads.into_iter().enumerate() {
            terms.push(weighted_sum(g, gr, 100 + k as u64)?);
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        Ok(acc)
    }, inputs, H, 1e-3)
    .unwrap();
    assert!(report.passed(), "{name} (second order): {:?}", report.inputs);
}

#[test]
fn square_of_three() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    assert_eq!(g.value(y).item(), 9.0);
    let dx = g.grad(y, &[x], false).unwrap()[0];
    assert_eq!(g.value(dx).item(), 6.0);
}

#[test]
fn second_derivative_of_cube() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::scalar(2.0));
    let x2 = g.square(x);
    let x3 = g.mul(x2, x).unwrap();
    let dx = g.grad(x3, &[x], true).unwrap()[0];
    assert_eq!(g.value(dx).item(), 12.0);
    let ddx = g.grad(dx, &[x], false).unwrap()[0];
    assert_eq!(g.value(ddx).item(), 12.0);
}

#[test]
fn layer_norm_of_constant_row_is_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(vec![1, 6], 5.0));
    let y = g.layer_norm(x, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_of_ones() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::ones(vec![1, 1, 4, 4]));
    let w = g.constant(Tensor::ones(vec![1, 1, 2, 2]));
    let y = g.conv2d(x, w, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 3, 3]);
    assert!(g.value(y).data().iter().all(|&v| v == 4.0));
}

#[test]
fn huber_values_and_gradients() {
    let mut g = Graph::<f64>::new();
    let z = g.variable(t(&[3], &[0.0, 0.5, 2.0]));
    let h = g.huber(z, 0.85).unwrap();
    let v = g.value(h).data().to_vec();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 0.125).abs() < 1e-15);
    assert!((v[2] - 1.33875).abs() < 1e-12);
    let s = g.sum(h);
    let dz = g.grad(s, &[z], false).unwrap()[0];
    let d = g.value(dz).data();
    assert_eq!(d[0], 0.0);
    assert!((d[2] - 0.85).abs() < 1e-15);
    assert!(g.huber(z, 0.0).is_err());
}

#[test]
fn huber_is_c1_at_delta() {
    let delta: f64 = 0.85;
    for sign in [-1.0, 1.0] {
        let below = sign * (delta - 1e-9);
        let above = sign * (delta + 1e-9);
        assert!((huber(below, delta) - huber(above, delta)).abs() < 1e-6);
        let slope = |z: f64| z.clamp(-delta, delta);
        assert!((slope(below) - slope(above)).abs() < 1e-6);
    }
}

#[test]
fn clip_values_and_saturated_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(t(&[4], &[100.0, -3.0, 30.0, 25.0]));
    let y = g.clip(x, -25.0, 25.0).unwrap();
    assert_eq!(g.value(y).data(), &[25.0, -3.0, 25.0, 25.0]);
    let s = g.sum(y);
    let dx = g.grad(s, &[x], false).unwrap()[0];
    // interior passes 1; saturated and boundary pass 0
    assert_eq!(g.value(dx).data(), &[0.0, 1.0, 0.0, 0.0]);
    assert!(g.clip(x, 1.0, 1.0).is_err());
}

#[test]
fn shape_errors_name_the_node() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![3, 2]));
    match g.add(a, b) {
        Err(Error::Shape { node, op, .. }) => {
            assert_eq!(node, 2);
            assert_eq!(op, "add");
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    let m = g.constant(Tensor::zeros(vec![2, 2]));
    assert!(matches!(g.matmul(a, m), Err(Error::Shape { op: "matmul", .. })));
}

#[test]
fn unrelated_wrt_gets_zero_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::scalar(1.0));
    let z = g.variable(Tensor::zeros(vec![2, 2]));
    let y = g.square(x);
    let grads = g.grad(y, &[x, z], false).unwrap();
    assert_eq!(g.shape(grads[1]), &[2, 2]);
    assert!(g.value(grads[1]).data().iter().all(|&v| v == 0.0));
}

#[test]
fn grad_without_create_graph_is_constant() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::scalar(3.0));
    let y = g.square(x);
    let dx = g.grad(y, &[x], false).unwrap()[0];
    assert!(g.is_frozen(dx));
    let dd = g.grad(dx, &[x], false).unwrap()[0];
    assert_eq!(g.value(dd).item(), 0.0);
}

#[test]
fn detach_stops_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::scalar(3.0));
    let y = g.square(x);
    let d = g.detach(y);
    let z = g.mul(d, x).unwrap();
    let dx = g.grad(z, &[x], false).unwrap()[0];
    assert_eq!(g.value(dx).item(), 9.0);
}

#[test]
fn forward_is_deterministic() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f64>::new();
        let x = g.variable(random(&[4, 5], &mut rng));
        let w = g.variable(random(&[5, 3], &mut rng));
        let h = g.matmul(x, w).unwrap();
        let h = g.layer_norm(h, 1e-5).unwrap();
        let h = g.swish(h);
        let s = g.mean(h);
        let dw = g.grad(s, &[w], false).unwrap()[0];
        (g.value(s).clone(), g.value(dw).clone())
    };
    let (a, b) = (build(), build());
    assert_eq!(a.0.data()[0].to_bits(), b.0.data()[0].to_bits());
    assert!(a.1.data().iter().zip(b.1.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = [3, 4];
    let a = random(&s, &mut rng);
    let b = random(&s, &mut rng);
    let p = positive(&s, &mut rng);
    let q = positive(&s, &mut rng);

    assert_first_order("add", &[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    assert_first_order("sub", &[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    assert_first_order("mul", &[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    assert_first_order("div", &[a.clone(), p.clone()], |g, v| g.div(v[0], v[1]));
    assert_first_order("min", &[a.clone(), b.clone()], |g, v| g.minimum(v[0], v[1]));
    assert_first_order("affine", &[a.clone()], |g, v| Ok(g.affine(v[0], -1.5, 0.3)));
    assert_first_order("square", &[a.clone()], |g, v| Ok(g.square(v[0])));
    assert_first_order("sqrt", &[p.clone()], |g, v| Ok(g.sqrt(v[0])));
    assert_first_order("exp", &[a.clone()], |g, v| Ok(g.exp(v[0])));
    assert_first_order("log", &[q.clone()], |g, v| Ok(g.log(v[0])));
    assert_first_order("recip", &[q.clone()], |g, v| Ok(g.recip(v[0])));
    assert_first_order("sigmoid", &[a.clone()], |g, v| Ok(g.sigmoid(v[0])));
    assert_first_order("tanh", &[a.clone()], |g, v| Ok(g.tanh(v[0])));
    assert_first_order("swish", &[a.clone()], |g, v| Ok(g.swish(v[0])));
    let wide = a.map(|x| 3.0 * x);
    assert_first_order("huber", &[wide.clone()], |g, v| g.huber(v[0], 0.85));
    assert_first_order("clip", &[wide], |g, v| g.clip(v[0], -1.2, 1.7));
}

#[test]
fn structural_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 5], &mut rng);
    let bt = random(&[5, 4], &mut rng);
    let at = random(&[4, 3], &mut rng);
    assert_first_order("matmul", &[a.clone(), b.clone()], |g, v| g.matmul(v[0], v[1]));
    assert_first_order("matmul_tb", &[a.clone(), bt.clone()], |g, v| g.matmul_t(v[0], v[1], false, true));
    assert_first_order("matmul_ta", &[at.clone(), b.clone()], |g, v| g.matmul_t(v[0], v[1], true, false));
    assert_first_order("matmul_tt", &[at.clone(), bt.clone()], |g, v| g.matmul_t(v[0], v[1], true, true));
    assert_first_order("reshape", &[a.clone()], |g, v| g.reshape(v[0], &[2, 6]));
    let c = random(&[3, 2], &mut rng);
    assert_first_order("concat", &[a.clone(), c], |g, v| g.concat(&[v[0], v[1]], 1));
    assert_first_order("slice", &[a.clone()], |g, v| g.slice(v[0], 1, 1, 2));
    assert_first_order("pad", &[a.clone()], |g, v| g.pad(v[0], 0, 2, 6));
    assert_first_order("sum", &[a.clone()], |g, v| Ok(g.sum(v[0])));
    assert_first_order("mean", &[a.clone()], |g, v| Ok(g.mean(v[0])));
    assert_first_order("sum_to", &[a.clone()], |g, v| g.sum_to(v[0], &[1, 4]));
    let row = random(&[1, 4], &mut rng);
    assert_first_order("broadcast", &[row], |g, v| g.broadcast(v[0], &[3, 4]));
    assert_first_order("layer_norm", &[a.clone()], |g, v| g.layer_norm(v[0], 1e-5));
    let gy = random(&[3, 4], &mut rng);
    assert_first_order("layer_norm_grad", &[a.clone(), gy], |g, v| g.layer_norm_grad(v[0], v[1], 1e-5));
}

#[test]
fn convolution_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[2, 2, 8, 8], &mut rng);
    let w = random(&[3, 2, 3, 3], &mut rng);
    assert_first_order("conv2d", &[x.clone(), w.clone()], |g, v| g.conv2d(v[0], v[1], 2));
    let gy = random(&[2, 3, 3, 3], &mut rng);
    assert_first_order("conv2d_input_grad", &[gy.clone(), w.clone()], |g, v| {
        g.conv2d_input_grad(v[0], v[1], &[2, 2, 8, 8], 2)
    });
    assert_first_order("conv2d_weight_grad", &[x, gy], |g, v| {
        g.conv2d_weight_grad(v[0], v[1], &[3, 2, 3, 3], 2)
    });
}

#[test]
fn second_order_closure_for_planner_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[3, 4], &mut rng);
    let m = random(&[4, 4], &mut rng);
    let row = random(&[1, 4], &mut rng);

    assert_second_order("mul", &[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    assert_second_order("sigmoid", &[a.clone()], |g, v| Ok(g.sigmoid(v[0])));
    assert_second_order("tanh", &[a.clone()], |g, v| Ok(g.tanh(v[0])));
    assert_second_order("swish", &[a.clone()], |g, v| Ok(g.swish(v[0])));
    assert_second_order("square", &[a.clone()], |g, v| Ok(g.square(v[0])));
    assert_second_order("exp", &[a.clone()], |g, v| Ok(g.exp(v[0])));
    let p = positive(&[3, 4], &mut rng);
    assert_second_order("sqrt", &[p.clone()], |g, v| Ok(g.sqrt(v[0])));
    assert_second_order("recip", &[p.clone()], |g, v| Ok(g.recip(v[0])));
    assert_second_order("div", &[a.clone(), p.clone()], |g, v| g.div(v[0], v[1]));
    assert_second_order("log", &[p], |g, v| Ok(g.log(v[0])));
    assert_second_order("matmul", &[a.clone(), m.clone()], |g, v| g.matmul(v[0], v[1]));
    assert_second_order("matmul_tb", &[a.clone(), m], |g, v| g.matmul_t(v[0], v[1], false, true));
    assert_second_order("broadcast_mul", &[a.clone(), row], |g, v| {
        let r = g.broadcast(v[1], &[3, 4])?;
        g.mul(v[0], r)
    });
    assert_second_order("concat_mul", &[a.clone(), b.clone()], |g, v| {
        let c = g.concat(&[v[0], v[1]], 1)?;
        g.mul(c, c)
    });
    assert_second_order("layer_norm", &[a.clone()], |g, v| g.layer_norm(v[0], 1e-5));
    assert_second_order("layer_norm_grad", &[a.clone(), b.clone()], |g, v| g.layer_norm_grad(v[0], v[1], 1e-5));
    let wide = a.map(|x| 2.0 * x);
    assert_second_order("huber_mul", &[wide.clone(), b.clone()], |g, v| {
        let h = g.huber(v[0], 0.85)?;
        g.mul(h, v[1])
    });
    assert_second_order("clip_mul", &[wide, b], |g, v| {
        let c = g.clip(v[0], -0.9, 1.1)?;
        g.mul(c, c)
    });
    let x = random(&[1, 2, 6, 6], &mut rng);
    let w = random(&[2, 2, 2, 2], &mut rng);
    assert_second_order("conv2d_swish", &[x, w], |g, v| {
        let y = g.conv2d(v[0], v[1], 2)?;
        Ok(g.swish(y))
    });
}

#[test]
fn three_layer_swish_net_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = vec![
        random(&[5, 6], &mut rng),
        random(&[6, 8], &mut rng),
        random(&[1, 8], &mut rng),
        random(&[8, 8], &mut rng),
        random(&[1, 8], &mut rng),
        random(&[8, 3], &mut rng),
        random(&[1, 3], &mut rng),
    ];
    let report = check_gradients(|g, v| {
        let mut h = v[0];
        for layer in 0..3 {
            let (w, b) = (v[1 + 2 * layer], v[2 + 2 * layer]);
            h = g.matmul(h, w)?;
            let n = g.shape(h)[0];
            let bw = g.shape(b)[1];
            let bb = g.broadcast(b, &[n, bw])?;
            h = g.add(h, bb)?;
            h = g.swish(h);
        }
        let sq = g.square(h);
        Ok(g.mean(sq))
    }, &inputs, H, 1e-4)
    .unwrap();
    assert!(report.passed(), "{:?}", report.inputs);
}

#[test]
fn gradient_check_on_square() {
    let report = check_gradients(|g, v| Ok(g.square(v[0])), &[Tensor::scalar(3.0)], 1e-5, 1e-8).unwrap();
    assert!(report.passed(), "{:?}", report.inputs);
    assert!((report.inputs[0].scale - 6.0).abs() < 1e-6);
}

#[test]
fn truncate_rewinds_graph() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::scalar(2.0));
    let mark = g.len();
    let y = g.square(x);
    let _ = g.grad(y, &[x], false).unwrap();
    g.truncate(mark);
    assert_eq!(g.len(), mark);
    let y = g.exp(x);
    assert!((g.value(y).item() - 2f64.exp()).abs() < 1e-12);
}

proptest! {
    #[test]
    fn clip_output_stays_in_bounds(xs in proptest::collection::vec(-1e6f64..1e6, 1..40),
                                   lo in -50.0f64..0.0, width in 1e-3f64..100.0) {
        let hi = lo + width;
        let mut g = Graph::<f64>::new();
        let n = xs.len();
        let x = g.constant(Tensor::new(vec![n], xs).unwrap());
        let y = g.clip(x, lo, hi).unwrap();
        prop_assert!(g.value(y).data().iter().all(|&v| v >= lo && v <= hi));
    }

    #[test]
    fn huber_is_nonnegative_and_even(z in -100.0f64..100.0, delta in 1e-3f64..10.0) {
        let h = huber(z, delta);
        prop_assert!(h >= 0.0);
        prop_assert_eq!(h, huber(-z, delta));
    }
}
